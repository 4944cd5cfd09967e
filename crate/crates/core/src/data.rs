//! Deterministic synthetic classification data and its binary container.
//!
//! The generator draws a Gaussian mixture with two independent blobs per
//! class, alternating between them per occurrence, so one linear map cannot
//! fully separate the classes and the benchmark spreads architectures out by
//! how much nonlinearity they can express. Labels cycle `0..K` so every split
//! is exactly class-balanced.
//!
//! Container layout (all integers little-endian): magic `SPDATA01`, then
//! `feature_dim: u32`, `num_classes: u32`, `seed: u64`, three `u32` split
//! sizes, then per split the row-major `f64` inputs followed by `u32` labels.

use crate::supernet::Batch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use thiserror::Error;

pub const DATASET_MAGIC: &[u8; 8] = b"SPDATA01";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad dataset container: {0}")]
    BadContainer(String),
    #[error("bad generation parameters: {0}")]
    BadParams(String),
}

/// Generation parameters; the digest of these plus the seed identifies a
/// dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl DataSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.feature_dim == 0 || self.num_classes < 2 {
            return Err(DataError::BadParams(
                "need feature_dim >= 1 and num_classes >= 2".into(),
            ));
        }
        if self.train_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return Err(DataError::BadParams("all split sizes must be positive".into()));
        }
        Ok(())
    }
}

/// One split: row-major inputs and parallel labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub inputs: Vec<f64>,
    pub labels: Vec<u32>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Full mini batches of `batch_size` rows; the remainder is dropped.
    pub fn batches(&self, batch_size: usize, feature_dim: usize) -> Vec<Batch> {
        let n = self.len() / batch_size;
        (0..n)
            .map(|i| {
                let lo = i * batch_size;
                let hi = lo + batch_size;
                Batch::new(
                    self.inputs[lo * feature_dim..hi * feature_dim].to_vec(),
                    self.labels[lo..hi].iter().map(|&l| l as usize).collect(),
                    feature_dim,
                )
                .expect("split rows are consistent")
            })
            .collect()
    }

    /// The whole split as one batch.
    pub fn full_batch(&self, feature_dim: usize) -> Batch {
        Batch::new(
            self.inputs.clone(),
            self.labels.iter().map(|&l| l as usize).collect(),
            feature_dim,
        )
        .expect("split rows are consistent")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DataSpec,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

const MEAN_RADIUS: f64 = 2.0;
const NOISE_SIGMA: f64 = 0.8;

/// Generates the dataset deterministically from its spec.
pub fn generate(spec: &DataSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.feature_dim;
    let k = spec.num_classes;

    // two independent unit directions per class, scaled to the mean radius
    let unit = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        v.iter().map(|x| x / norm * MEAN_RADIUS).collect()
    };
    let means: Vec<[Vec<f64>; 2]> = (0..k)
        .map(|_| [unit(&mut rng), unit(&mut rng)])
        .collect();

    let mut gen_split = |size: usize| -> Split {
        let mut inputs = Vec::with_capacity(size * d);
        let mut labels = Vec::with_capacity(size);
        for i in 0..size {
            let label = i % k;
            // alternate between the class's two blobs per occurrence
            let blob = (i / k) % 2;
            for j in 0..d {
                inputs.push(means[label][blob][j] + NOISE_SIGMA * gaussian(&mut rng));
            }
            labels.push(label as u32);
        }
        Split { inputs, labels }
    };

    let train = gen_split(spec.train_size);
    let val = gen_split(spec.val_size);
    let test = gen_split(spec.test_size);
    Ok(Dataset {
        spec: spec.clone(),
        train,
        val,
        test,
    })
}

/// Box-Muller standard normal draw.
fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        if u1 > 1e-300 {
            let u2: f64 = rng.gen::<f64>();
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> Result<(), DataError> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&(ds.spec.feature_dim as u32).to_le_bytes())?;
    w.write_all(&(ds.spec.num_classes as u32).to_le_bytes())?;
    w.write_all(&ds.spec.seed.to_le_bytes())?;
    for size in [ds.spec.train_size, ds.spec.val_size, ds.spec.test_size] {
        w.write_all(&(size as u32).to_le_bytes())?;
    }
    for split in [&ds.train, &ds.val, &ds.test] {
        for x in &split.inputs {
            w.write_all(&x.to_le_bytes())?;
        }
        for l in &split.labels {
            w.write_all(&l.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset, DataError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(DataError::BadContainer(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    let mut read_u32 = |r: &mut R| -> Result<u32, DataError> {
        r.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let feature_dim = read_u32(&mut r)? as usize;
    let num_classes = read_u32(&mut r)? as usize;
    r.read_exact(&mut u64buf)?;
    let seed = u64::from_le_bytes(u64buf);
    let train_size = read_u32(&mut r)? as usize;
    let val_size = read_u32(&mut r)? as usize;
    let test_size = read_u32(&mut r)? as usize;

    let read_split = |r: &mut R, size: usize| -> Result<Split, DataError> {
        let mut inputs = vec![0f64; size * feature_dim];
        let mut f64buf = [0u8; 8];
        for x in inputs.iter_mut() {
            r.read_exact(&mut f64buf)?;
            *x = f64::from_le_bytes(f64buf);
        }
        let mut labels = vec![0u32; size];
        let mut u32buf = [0u8; 4];
        for l in labels.iter_mut() {
            r.read_exact(&mut u32buf)?;
            *l = u32::from_le_bytes(u32buf);
            if *l as usize >= num_classes {
                return Err(DataError::BadContainer(format!(
                    "label {l} out of range for {num_classes} classes"
                )));
            }
        }
        Ok(Split { inputs, labels })
    };

    let train = read_split(&mut r, train_size)?;
    let val = read_split(&mut r, val_size)?;
    let test = read_split(&mut r, test_size)?;
    Ok(Dataset {
        spec: DataSpec {
            feature_dim,
            num_classes,
            train_size,
            val_size,
            test_size,
            seed,
        },
        train,
        val,
        test,
    })
}

pub fn write_dataset_file(ds: &Dataset, path: &std::path::Path) -> Result<(), DataError> {
    let mut buf = Vec::new();
    write_dataset(ds, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_dataset_file(path: &std::path::Path) -> Result<Dataset, DataError> {
    let bytes = std::fs::read(path)?;
    read_dataset(bytes.as_slice())
}
