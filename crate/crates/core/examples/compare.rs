// Temporary: exact criterion-7 clause evaluation for one candidate config.
// Usage: cargo run --release -p spdarts-core --example compare -- [plr_base] [plr_elevated] [bs] [wlr] [dseed]

use spdarts_core::bench::{build_bench, percentile_of, BenchTrainConfig};
use spdarts_core::data::{generate, DataSpec};
use spdarts_core::space::{build_space, SearchSpaceSpec};
use spdarts_core::trainer::{train_search, SearchConfig, SearchMode};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let plr_base: f64 = args.first().map(|v| v.parse().unwrap()).unwrap_or(3e-4);
    let plr_elev: f64 = args.get(1).map(|v| v.parse().unwrap()).unwrap_or(0.1);
    let bs: usize = args.get(2).map(|v| v.parse().unwrap()).unwrap_or(64);
    let wlr: f64 = args.get(3).map(|v| v.parse().unwrap()).unwrap_or(0.05);
    let dseed: u64 = args.get(4).map(|v| v.parse().unwrap()).unwrap_or(1);

    let data = generate(&DataSpec {
        feature_dim: 8,
        num_classes: 4,
        train_size: 2048,
        val_size: 1024,
        test_size: 1024,
        seed: dseed,
    })
    .unwrap();
    let spec = SearchSpaceSpec::with_default_ops(2, 8, true).unwrap();
    let space = build_space(&spec).unwrap();

    eprintln!("building bench...");
    let t0 = std::time::Instant::now();
    let (bench, _) = build_bench(
        &space,
        &data,
        &BenchTrainConfig::default(),
        &[1],
        4096,
        2,
        None,
    )
    .unwrap();
    eprintln!("bench built in {:.1}s", t0.elapsed().as_secs_f64());
    let accs: Vec<f64> = bench
        .entries
        .keys()
        .map(|k| bench.mean_val_acc(k).unwrap())
        .collect();
    let lo = accs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!("bench val-acc spread: [{lo:.3}, {hi:.3}]");

    let run = |mode: SearchMode, plr: f64, seed: u64| {
        let cfg = SearchConfig {
            epochs: 50,
            batch_size: bs,
            weight_lr: wlr,
            weight_lr_min: wlr,
            param_lr: plr,
            space: spec.clone(),
            seed,
            mode,
            ..SearchConfig::default()
        };
        train_search(&cfg, &data).unwrap()
    };

    let mut sp_ies = vec![];
    let mut sm_ies = vec![];
    let mut el_ies = vec![];
    let mut sp_gap = vec![];
    let mut sm_gap = vec![];
    let mut sp_pct = vec![];
    let mut sm_pct = vec![];
    for seed in 1..=5u64 {
        let sp = run(SearchMode::SpDarts, plr_base, seed);
        let sm = run(SearchMode::SmoothOnly, plr_base, seed);
        let el = run(SearchMode::SmoothOnly, plr_elev, seed);
        let gap = |r: &spdarts_core::trainer::SearchResult| {
            r.metrics
                .iter()
                .rev()
                .take(3)
                .map(|m| (m.supernet_val_acc - m.discretized_val_acc).abs())
                .sum::<f64>()
                / 3.0
        };
        sp_ies.push(sp.final_ies());
        sm_ies.push(sm.final_ies());
        el_ies.push(el.final_ies());
        sp_gap.push(gap(&sp));
        sm_gap.push(gap(&sm));
        sp_pct.push(percentile_of(&bench, &sp.final_genotype.key()).unwrap());
        sm_pct.push(percentile_of(&bench, &sm.final_genotype.key()).unwrap());
        println!(
            "seed {seed}: ies sp={:.6} sm={:.6} el={:.6} | gap sp={:.4} sm={:.4} | pct sp={:.3} sm={:.3} | geno sp={} sm={}",
            sp.final_ies(), sm.final_ies(), el.final_ies(),
            sp_gap.last().unwrap(), sm_gap.last().unwrap(),
            sp_pct.last().unwrap(), sm_pct.last().unwrap(),
            sp.final_genotype.key(), sm.final_genotype.key(),
        );
    }

    let count = |pred: &dyn Fn(usize) -> bool| (0..5).filter(|&i| pred(i)).count();
    let a1 = count(&|i| sp_ies[i] < sm_ies[i]);
    let a2 = count(&|i| sp_ies[i] < 0.1 * 3.0 * 4.0f64.ln());
    let b = count(&|i| sp_gap[i] < sm_gap[i]);
    let d = count(&|i| sp_ies[i] < el_ies[i] && el_ies[i] < sm_ies[i]);
    let median = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        s[2]
    };
    println!("7a ies ordering sp<sm: {a1}/5 (need >=4)");
    println!("7a ies < 0.4159: {a2}/5 (need >=4)");
    println!("7b gap sp<sm: {b}/5 (need >=4)");
    println!(
        "7c median pct: sp {:.3} vs sm {:.3} (need sp >= sm)",
        median(&sp_pct),
        median(&sm_pct)
    );
    println!("7d sandwich sp<el<sm: {d}/5 (need >=3)");
}
