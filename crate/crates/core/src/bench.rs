//! Exhaustive ground-truth benchmark.
//!
//! Every genotype in a (tiny) space is trained standalone from scratch, with
//! no weight sharing, and its best validation accuracy plus the test accuracy
//! at that epoch go into a lookup table. Per-genotype seeds are derived from
//! `(run seed, genotype key)` so the table is independent of build order and
//! the build is resumable.

use crate::data::Dataset;
use crate::seeding::{genotype_seed, json_digest};
use crate::space::{enumerate_genotypes, Genotype, SearchSpace, SearchSpaceSpec, SpaceError};
use crate::supernet::{correct_count, cross_entropy, finalnet_forward, SupernetWeights};
use crate::trainer::{cosine_lr, weight_step, TrainError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("bench config invalid: {0}")]
    BadConfig(String),
    #[error("genotype {0} not present in the bench")]
    UnknownGenotype(String),
    #[error("resume digest mismatch: existing {existing}, requested {requested}")]
    DigestMismatch { existing: String, requested: String },
    #[error("bad bench file: {0}")]
    BadFile(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Standalone training settings for bench entries: same optimizer family as
/// the search weight step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
}

impl Default for BenchTrainConfig {
    fn default() -> Self {
        BenchTrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            lr_min: 0.05,
            momentum: 0.9,
        }
    }
}

impl BenchTrainConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(BenchError::BadConfig(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.lr_min > 0.0) {
            return Err(BenchError::BadConfig("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(BenchError::BadConfig("momentum must lie in [0,1)".into()));
        }
        Ok(())
    }
}

/// One standalone training outcome.
///
/// `train_seconds` is wall time: it is excluded from serialization so bench
/// files stay identical across machines and schedules.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchEntry {
    #[serde(skip)]
    pub genotype_key: String,
    pub val_acc: f64,
    pub test_acc: f64,
    pub seed: u64,
    #[serde(default)]
    pub diverged: bool,
    #[serde(skip)]
    pub train_seconds: f64,
}

impl BenchEntry {
    /// Equality on the reproducible fields (wall time excluded).
    pub fn same_outcome(&self, other: &BenchEntry) -> bool {
        self.genotype_key == other.genotype_key
            && self.val_acc == other.val_acc
            && self.test_acc == other.test_acc
            && self.seed == other.seed
            && self.diverged == other.diverged
    }
}

/// The complete lookup table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MicroBench {
    pub space: SearchSpaceSpec,
    pub config_digest: String,
    pub entries: BTreeMap<String, Vec<BenchEntry>>,
}

impl MicroBench {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bench serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, BenchError> {
        let mut bench: MicroBench =
            serde_json::from_str(json).map_err(|e| BenchError::BadFile(e.to_string()))?;
        for (key, entries) in bench.entries.iter_mut() {
            for e in entries.iter_mut() {
                e.genotype_key = key.clone();
            }
        }
        Ok(bench)
    }

    /// Mean validation accuracy over seeds for one genotype.
    pub fn mean_val_acc(&self, key: &str) -> Option<f64> {
        let entries = self.entries.get(key)?;
        Some(entries.iter().map(|e| e.val_acc).sum::<f64>() / entries.len() as f64)
    }

    /// Mean test accuracy over seeds for one genotype.
    pub fn mean_test_acc(&self, key: &str) -> Option<f64> {
        let entries = self.entries.get(key)?;
        Some(entries.iter().map(|e| e.test_acc).sum::<f64>() / entries.len() as f64)
    }
}

/// Digest binding a bench to its space, training settings, and dataset.
pub fn bench_digest(
    space: &SearchSpaceSpec,
    config: &BenchTrainConfig,
    data: &Dataset,
) -> String {
    json_digest(&(space, config, &data.spec))
}

/// Trains one genotype from scratch and reports its best validation accuracy
/// and the test accuracy at that epoch. Divergence yields a zero-accuracy
/// entry flagged `diverged` instead of an error.
pub fn train_genotype(
    genotype: &Genotype,
    space: &SearchSpace,
    data: &Dataset,
    config: &BenchTrainConfig,
    seed: u64,
) -> Result<BenchEntry, BenchError> {
    config.validate()?;
    let started = Instant::now();
    let key = genotype.key();
    match train_genotype_inner(genotype, space, data, config, seed) {
        Ok((val_acc, test_acc)) => Ok(BenchEntry {
            genotype_key: key,
            val_acc,
            test_acc,
            seed,
            diverged: false,
            train_seconds: started.elapsed().as_secs_f64(),
        }),
        Err(TrainError::Diverged { .. }) => Ok(BenchEntry {
            genotype_key: key,
            val_acc: 0.0,
            test_acc: 0.0,
            seed,
            diverged: true,
            train_seconds: started.elapsed().as_secs_f64(),
        }),
        Err(e) => Err(e.into()),
    }
}

fn train_genotype_inner(
    genotype: &Genotype,
    space: &SearchSpace,
    data: &Dataset,
    config: &BenchTrainConfig,
    seed: u64,
) -> Result<(f64, f64), TrainError> {
    let d = space.spec.feature_dim;
    let train_batches = data.train.batches(config.batch_size, d);
    if train_batches.is_empty() {
        return Err(TrainError::BadData(
            "batch size leaves no full training batch".into(),
        ));
    }
    let val_batches = data.val.batches(config.batch_size, d);
    let test_batches = data.test.batches(config.batch_size, d);

    let mut weights = SupernetWeights::init(space, data.spec.num_classes, seed);
    let mut momentum = {
        let mut z = weights.clone();
        for per_edge in &mut z.edge_ops {
            for aff in per_edge.iter_mut().flatten() {
                aff.w.iter_mut().for_each(|x| *x = 0.0);
                aff.b.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        z.head_w.iter_mut().for_each(|x| *x = 0.0);
        z.head_b.iter_mut().for_each(|x| *x = 0.0);
        z
    };

    let eval = |weights: &SupernetWeights,
                batches: &[crate::supernet::Batch]|
     -> Result<f64, TrainError> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for batch in batches {
            let pass = finalnet_forward(batch, weights, genotype, space)?;
            correct += correct_count(&pass.logits_tensor(), &batch.labels);
            total += batch.len();
        }
        Ok(correct as f64 / total as f64)
    };

    let mut best_val = f64::NEG_INFINITY;
    let mut test_at_best = 0.0;
    for epoch in 0..config.epochs {
        let lr = cosine_lr(config.lr, config.lr_min, epoch, config.epochs);
        for (b, batch) in train_batches.iter().enumerate() {
            let mut pass = finalnet_forward(batch, &weights, genotype, space)
                .map_err(|e| TrainError::Diverged {
                    epoch,
                    batch: b,
                    detail: e.to_string(),
                })?;
            let loss = cross_entropy(&mut pass, &batch.labels)?;
            pass.graph.backward(loss)?;
            let grads = collect_grads(&pass, &weights);
            weight_step(&mut weights, &grads, &mut momentum, lr, config.momentum).map_err(
                |detail| TrainError::Diverged {
                    epoch,
                    batch: b,
                    detail,
                },
            )?;
        }
        let val_acc = eval(&weights, &val_batches)?;
        if val_acc > best_val {
            best_val = val_acc;
            test_at_best = eval(&weights, &test_batches)?;
        }
    }
    Ok((best_val, test_at_best))
}

fn collect_grads(
    pass: &crate::supernet::ForwardPass,
    template: &SupernetWeights,
) -> SupernetWeights {
    let mut g = template.clone();
    for per_edge in &mut g.edge_ops {
        for aff in per_edge.iter_mut().flatten() {
            aff.w.iter_mut().for_each(|x| *x = 0.0);
            aff.b.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    g.head_w.iter_mut().for_each(|x| *x = 0.0);
    g.head_b.iter_mut().for_each(|x| *x = 0.0);
    for (e, per_edge) in pass.leaves.edge_ops.iter().enumerate() {
        for (m, ids) in per_edge.iter().enumerate() {
            if let Some((wid, bid)) = ids {
                let aff = g.edge_ops[e][m].as_mut().expect("layouts match");
                aff.w = pass.graph.grad(*wid).data().to_vec();
                aff.b = pass.graph.grad(*bid).data().to_vec();
            }
        }
    }
    g.head_w = pass.graph.grad(pass.leaves.head_w).data().to_vec();
    g.head_b = pass.graph.grad(pass.leaves.head_b).data().to_vec();
    g
}

/// Builds (or completes) the exhaustive bench: every genotype times every run
/// seed. Already-present entries from `existing` are kept, so an interrupted
/// build resumes. Returns the bench and the number of newly trained entries.
pub fn build_bench(
    space: &SearchSpace,
    data: &Dataset,
    config: &BenchTrainConfig,
    run_seeds: &[u64],
    enumeration_cap: usize,
    jobs: usize,
    existing: Option<MicroBench>,
) -> Result<(MicroBench, usize), BenchError> {
    config.validate()?;
    if run_seeds.is_empty() {
        return Err(BenchError::BadConfig("need at least one run seed".into()));
    }
    let digest = bench_digest(&space.spec, config, data);
    let mut entries: BTreeMap<String, Vec<BenchEntry>> = match existing {
        Some(bench) => {
            if bench.config_digest != digest {
                return Err(BenchError::DigestMismatch {
                    existing: bench.config_digest,
                    requested: digest,
                });
            }
            bench.entries
        }
        None => BTreeMap::new(),
    };

    let genotypes = enumerate_genotypes(space, enumeration_cap)?;
    let mut tasks: Vec<(Genotype, u64)> = Vec::new();
    for genotype in &genotypes {
        let key = genotype.key();
        for &run_seed in run_seeds {
            let seed = genotype_seed(run_seed, &key);
            let present = entries
                .get(&key)
                .map(|v| v.iter().any(|e| e.seed == seed))
                .unwrap_or(false);
            if !present {
                tasks.push((genotype.clone(), seed));
            }
        }
    }

    let trained: Vec<BenchEntry> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| BenchError::BadConfig(e.to_string()))?;
        pool.install(|| {
            tasks
                .par_iter()
                .map(|(genotype, seed)| train_genotype(genotype, space, data, config, *seed))
                .collect::<Result<Vec<_>, _>>()
        })?
    } else {
        tasks
            .iter()
            .map(|(genotype, seed)| train_genotype(genotype, space, data, config, *seed))
            .collect::<Result<Vec<_>, _>>()?
    };

    let newly = trained.len();
    for entry in trained {
        entries.entry(entry.genotype_key.clone()).or_default().push(entry);
    }
    // deterministic order inside each genotype regardless of schedule
    for list in entries.values_mut() {
        list.sort_by_key(|e| e.seed);
    }

    Ok((
        MicroBench {
            space: space.spec.clone(),
            config_digest: digest,
            entries,
        },
        newly,
    ))
}

/// Fraction of genotypes with strictly lower mean validation accuracy.
pub fn percentile_of(bench: &MicroBench, key: &str) -> Result<f64, BenchError> {
    let target = bench
        .mean_val_acc(key)
        .ok_or_else(|| BenchError::UnknownGenotype(key.into()))?;
    let below = bench
        .entries
        .keys()
        .filter(|k| bench.mean_val_acc(k).expect("key exists") < target)
        .count();
    Ok(below as f64 / bench.entries.len() as f64)
}

/// Best mean test accuracy in the bench minus this genotype's mean test
/// accuracy; zero for the optimum.
pub fn regret(bench: &MicroBench, key: &str) -> Result<f64, BenchError> {
    let target = bench
        .mean_test_acc(key)
        .ok_or_else(|| BenchError::UnknownGenotype(key.into()))?;
    let best = bench
        .entries
        .keys()
        .map(|k| bench.mean_test_acc(k).expect("key exists"))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(best - target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DataSpec};
    use crate::space::build_space;

    fn small_data() -> Dataset {
        generate(&DataSpec {
            feature_dim: 4,
            num_classes: 4,
            train_size: 128,
            val_size: 64,
            test_size: 64,
            seed: 2,
        })
        .unwrap()
    }

    fn quick_config() -> BenchTrainConfig {
        BenchTrainConfig {
            epochs: 4,
            batch_size: 32,
            ..BenchTrainConfig::default()
        }
    }

    fn one_edge_space() -> SearchSpace {
        let spec = SearchSpaceSpec::with_default_ops(1, 4, true).unwrap();
        build_space(&spec).unwrap()
    }

    #[test]
    fn all_none_scores_majority_rate() {
        let space = one_edge_space();
        let data = small_data();
        let genotype = Genotype::new(vec![0], &space).unwrap();
        let entry = train_genotype(&genotype, &space, &data, &quick_config(), 5).unwrap();
        // the classifier sees zero features: accuracy is one class's share
        assert!((entry.val_acc - 0.25).abs() < 1e-9, "{}", entry.val_acc);
        assert!(!entry.diverged);
    }

    #[test]
    fn train_genotype_is_seed_deterministic() {
        let space = one_edge_space();
        let data = small_data();
        let genotype = Genotype::new(vec![2], &space).unwrap();
        let a = train_genotype(&genotype, &space, &data, &quick_config(), 9).unwrap();
        let b = train_genotype(&genotype, &space, &data, &quick_config(), 9).unwrap();
        assert!(a.same_outcome(&b));
    }

    #[test]
    fn parameterized_genotype_beats_all_none() {
        let space = one_edge_space();
        let data = small_data();
        let cfg = BenchTrainConfig {
            epochs: 10,
            batch_size: 32,
            ..BenchTrainConfig::default()
        };
        let none = train_genotype(&Genotype::new(vec![0], &space).unwrap(), &space, &data, &cfg, 5)
            .unwrap();
        let gated =
            train_genotype(&Genotype::new(vec![3], &space).unwrap(), &space, &data, &cfg, 5)
                .unwrap();
        assert!(
            gated.val_acc > none.val_acc,
            "gated {} vs none {}",
            gated.val_acc,
            none.val_acc
        );
    }

    #[test]
    fn build_covers_every_genotype() {
        let space = one_edge_space();
        let data = small_data();
        let (bench, newly) =
            build_bench(&space, &data, &quick_config(), &[1], 4096, 1, None).unwrap();
        assert_eq!(bench.entries.len(), 4);
        assert_eq!(newly, 4);
        for entries in bench.entries.values() {
            assert_eq!(entries.len(), 1);
            for e in entries {
                assert!((0.0..=1.0).contains(&e.val_acc));
                assert!((0.0..=1.0).contains(&e.test_acc));
            }
        }
    }

    #[test]
    fn resume_trains_only_missing_entries() {
        let space = one_edge_space();
        let data = small_data();
        let cfg = quick_config();
        let (mut bench, _) = build_bench(&space, &data, &cfg, &[1], 4096, 1, None).unwrap();
        // drop two genotypes to simulate an interrupted build
        bench.entries.remove("0");
        bench.entries.remove("2");
        let (resumed, newly) =
            build_bench(&space, &data, &cfg, &[1], 4096, 1, Some(bench)).unwrap();
        assert_eq!(newly, 2);
        assert_eq!(resumed.entries.len(), 4);
        // a complete bench resumes with nothing to do
        let (_, newly) = build_bench(&space, &data, &cfg, &[1], 4096, 1, Some(resumed)).unwrap();
        assert_eq!(newly, 0);
    }

    #[test]
    fn resume_rejects_other_digest() {
        let space = one_edge_space();
        let data = small_data();
        let cfg = quick_config();
        let (bench, _) = build_bench(&space, &data, &cfg, &[1], 4096, 1, None).unwrap();
        let mut other = cfg.clone();
        other.epochs += 1;
        assert!(matches!(
            build_bench(&space, &data, &other, &[1], 4096, 1, Some(bench)),
            Err(BenchError::DigestMismatch { .. })
        ));
    }

    #[test]
    fn parallel_build_equals_serial() {
        let space = one_edge_space();
        let data = small_data();
        let cfg = quick_config();
        let (serial, _) = build_bench(&space, &data, &cfg, &[1], 4096, 1, None).unwrap();
        let (parallel, _) = build_bench(&space, &data, &cfg, &[1], 4096, 4, None).unwrap();
        assert_eq!(serial.to_json(), parallel.to_json());
    }

    #[test]
    fn multi_seed_entries_per_genotype() {
        let space = one_edge_space();
        let data = small_data();
        let (bench, newly) =
            build_bench(&space, &data, &quick_config(), &[1, 2], 4096, 1, None).unwrap();
        assert_eq!(newly, 8);
        for entries in bench.entries.values() {
            assert_eq!(entries.len(), 2);
            assert_ne!(entries[0].seed, entries[1].seed);
        }
    }

    #[test]
    fn percentile_and_regret_are_consistent() {
        let space = one_edge_space();
        let data = small_data();
        let cfg = BenchTrainConfig {
            epochs: 8,
            batch_size: 32,
            ..BenchTrainConfig::default()
        };
        let (bench, _) = build_bench(&space, &data, &cfg, &[1], 4096, 1, None).unwrap();

        let keys: Vec<String> = bench.entries.keys().cloned().collect();
        let best = keys
            .iter()
            .max_by(|a, b| {
                bench
                    .mean_val_acc(a)
                    .unwrap()
                    .partial_cmp(&bench.mean_val_acc(b).unwrap())
                    .unwrap()
            })
            .unwrap();
        let worst = keys
            .iter()
            .min_by(|a, b| {
                bench
                    .mean_val_acc(a)
                    .unwrap()
                    .partial_cmp(&bench.mean_val_acc(b).unwrap())
                    .unwrap()
            })
            .unwrap();

        let n = keys.len() as f64;
        let best_pct = percentile_of(&bench, best).unwrap();
        // ties may push the strictly-below count lower, never higher
        assert!(best_pct <= (n - 1.0) / n + 1e-12);
        assert_eq!(percentile_of(&bench, worst).unwrap(), 0.0);

        // regret zero at the test-acc optimum and non-negative everywhere
        for key in &keys {
            assert!(regret(&bench, key).unwrap() >= 0.0);
        }
        let best_test = keys
            .iter()
            .max_by(|a, b| {
                bench
                    .mean_test_acc(a)
                    .unwrap()
                    .partial_cmp(&bench.mean_test_acc(b).unwrap())
                    .unwrap()
            })
            .unwrap();
        assert_eq!(regret(&bench, best_test).unwrap(), 0.0);

        assert!(matches!(
            percentile_of(&bench, "9-9"),
            Err(BenchError::UnknownGenotype(_))
        ));
    }

    #[test]
    fn json_round_trip_restores_keys() {
        let space = one_edge_space();
        let data = small_data();
        let (bench, _) = build_bench(&space, &data, &quick_config(), &[1], 4096, 1, None).unwrap();
        let back = MicroBench::from_json(&bench.to_json()).unwrap();
        assert_eq!(back.to_json(), bench.to_json());
        for (key, entries) in &back.entries {
            for e in entries {
                assert_eq!(&e.genotype_key, key);
            }
        }
    }
}
