// Temporary calibration harness for the comparative experiment.
// Usage: cargo run --release -p spdarts-core --example sweep -- <param_lr...>

use spdarts_core::data::{generate, DataSpec};
use spdarts_core::space::SearchSpaceSpec;
use spdarts_core::trainer::{train_search, SearchConfig, SearchMode};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let lrs: Vec<f64> = if args.is_empty() {
        vec![3e-4, 0.01, 0.1, 0.3, 1.0, 3.0]
    } else {
        args.iter().map(|a| a.parse().unwrap()).collect()
    };
    let batch_size: usize = std::env::var("SWEEP_BS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(64);
    let weight_lr: f64 = std::env::var("SWEEP_WLR")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0.05);
    let data_seed: u64 = std::env::var("SWEEP_DSEED")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1);

    let data = generate(&DataSpec {
        feature_dim: 8,
        num_classes: 4,
        train_size: 2048,
        val_size: 1024,
        test_size: 1024,
        seed: data_seed,
    })
    .unwrap();
    let space = SearchSpaceSpec::with_default_ops(2, 8, true).unwrap();
    let e_ln_m = 3.0 * 4.0f64.ln();
    println!("E*lnM = {e_ln_m:.4}, threshold 0.1*E*lnM = {:.4}", 0.1 * e_ln_m);
    println!("batch_size={batch_size} weight_lr={weight_lr} data_seed={data_seed}");

    for mode in [SearchMode::SpDarts, SearchMode::SmoothOnly] {
        for &plr in &lrs {
            let mut finals = Vec::new();
            let mut gaps = Vec::new();
            let mut genos = Vec::new();
            let mut supaccs = Vec::new();
            let mut discaccs = Vec::new();
            for seed in 1..=5u64 {
                let cfg = SearchConfig {
                    epochs: 50,
                    batch_size,
                    weight_lr,
                    weight_lr_min: weight_lr,
                    param_lr: plr,
                    space: space.clone(),
                    seed,
                    mode,
                    ..SearchConfig::default()
                };
                let started = std::time::Instant::now();
                match train_search(&cfg, &data) {
                    Ok(result) => {
                        let last3: Vec<_> =
                            result.metrics.iter().rev().take(3).collect();
                        let gap = last3
                            .iter()
                            .map(|r| (r.supernet_val_acc - r.discretized_val_acc).abs())
                            .sum::<f64>()
                            / 3.0;
                        finals.push(result.final_ies());
                        gaps.push(gap);
                        genos.push(result.final_genotype.key());
                        supaccs.push(result.metrics.last().unwrap().supernet_val_acc);
                        discaccs.push(result.metrics.last().unwrap().discretized_val_acc);
                        if seed == 1 {
                            eprintln!(
                                "  [{mode:?} plr={plr} seed=1] {:.1}s",
                                started.elapsed().as_secs_f64()
                            );
                        }
                    }
                    Err(e) => {
                        finals.push(f64::NAN);
                        gaps.push(f64::NAN);
                        genos.push(format!("DIVERGED({e})"));
                        supaccs.push(f64::NAN);
                        discaccs.push(f64::NAN);
                    }
                }
            }
            println!(
                "{mode:?} plr={plr}: ies={:?} gap={:?} sup={:?} disc={:?} geno={:?}",
                finals
                    .iter()
                    .map(|v| (v * 1000.0).round() / 1000.0)
                    .collect::<Vec<_>>(),
                gaps.iter()
                    .map(|v| (v * 1000.0).round() / 1000.0)
                    .collect::<Vec<_>>(),
                supaccs
                    .iter()
                    .map(|v| (v * 100.0).round() / 100.0)
                    .collect::<Vec<_>>(),
                discaccs
                    .iter()
                    .map(|v| (v * 100.0).round() / 100.0)
                    .collect::<Vec<_>>(),
                genos
            );
        }
    }
}
