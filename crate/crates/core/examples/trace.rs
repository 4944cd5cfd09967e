// Temporary diagnostic: per-epoch IES / arch-gap / accuracy trace for one run.
// Usage: cargo run --release -p spdarts-core --example trace -- <mode> <plr> [t_sm] [seed] [bs]

use spdarts_core::data::{generate, DataSpec};
use spdarts_core::space::SearchSpaceSpec;
use spdarts_core::trainer::{SearchConfig, SearchMode, SearchRun};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode = match args[0].as_str() {
        "sp" => SearchMode::SpDarts,
        _ => SearchMode::SmoothOnly,
    };
    let plr: f64 = args[1].parse().unwrap();
    let t_sm: f64 = args.get(2).map(|v| v.parse().unwrap()).unwrap_or(1e-2);
    let seed: u64 = args.get(3).map(|v| v.parse().unwrap()).unwrap_or(1);
    let bs: usize = args.get(4).map(|v| v.parse().unwrap()).unwrap_or(64);

    let data = generate(&DataSpec {
        feature_dim: 8,
        num_classes: 4,
        train_size: 2048,
        val_size: 1024,
        test_size: 1024,
        seed: 1,
    })
    .unwrap();
    let cfg = SearchConfig {
        epochs: 50,
        batch_size: bs,
        param_lr: plr,
        t_sm,
        space: SearchSpaceSpec::with_default_ops(2, 8, true).unwrap(),
        seed,
        mode,
        ..SearchConfig::default()
    };
    let mut run = SearchRun::new(&cfg, &data).unwrap();
    println!("epoch p ies max_gap mean_abs_a sup disc geno train_loss");
    while !run.is_finished() {
        let row = run.run_epoch().unwrap().clone();
        let arch = run.arch();
        let mut max_gap = 0.0f64;
        let mut sum_abs = 0.0f64;
        for e in 0..arch.num_edges() {
            let r = arch.row(e);
            let mut sorted: Vec<f64> = r.to_vec();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            max_gap = max_gap.max(sorted[0] - sorted[1]);
            sum_abs += r.iter().map(|x| x.abs()).sum::<f64>();
        }
        if row.epoch % 5 == 0 || row.epoch >= 47 {
            println!(
                "{:2} {:.3} {:.4} {:+.4} {:.4} {:.3} {:.3} {} {:.4}",
                row.epoch,
                row.p,
                row.ies,
                max_gap,
                sum_abs / (arch.num_edges() * arch.num_ops()) as f64,
                row.supernet_val_acc,
                row.discretized_val_acc,
                row.genotype,
                row.train_loss,
            );
        }
    }
}
