//! The batch-mixed bilevel search loop.
//!
//! Per epoch: evaluate the mixing-probability schedule, draw per-batch
//! sparse/smooth indicators, then walk the zipped train/val batch streams.
//! For every batch the shared weights take one SGD-momentum step on the
//! training loss and the architecture parameters take one adaptive-moment
//! step on the validation loss, both under the same indicator. First-order
//! alternation only; each epoch ends with an entropy/accuracy metrics row.
//!
//! Divergence aborts with the offending epoch and batch rather than
//! restarting: collapse behavior is part of what the artifact measures.

use crate::data::Dataset;
use crate::seeding::{derive_seed, json_digest};
use crate::space::{build_space, discretize, ArchParams, Genotype, SearchSpace, SearchSpaceSpec, SpaceError};
use crate::sparse::{
    ies, p_schedule, sample_indicators, IndicatorVec, MixPlan, SparseError, TemperaturePair,
};
use crate::supernet::{
    correct_count, cross_entropy, finalnet_forward, supernet_forward, Batch, SupernetError,
    SupernetWeights,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPDARTS1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Adaptive-moment hyperparameters for the parameter step.
pub const ADAM_BETA1: f64 = 0.5;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config invalid: {0}")]
    BadConfig(String),
    #[error("dataset does not fit config: {0}")]
    BadData(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Supernet(#[from] SupernetError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
}

/// Which relaxation drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SearchMode {
    /// Batch-mixed sparse/smooth training.
    #[serde(rename = "sp-darts")]
    SpDarts,
    /// Smooth branch only: the degenerate baseline configuration.
    #[serde(rename = "smooth-only")]
    SmoothOnly,
}

fn default_epochs() -> usize {
    50
}
fn default_batch_size() -> usize {
    64
}
fn default_weight_lr() -> f64 {
    0.05
}
fn default_weight_momentum() -> f64 {
    0.9
}
fn default_param_lr() -> f64 {
    3e-4
}
fn default_t_sp() -> f64 {
    1e-3
}
fn default_t_sm() -> f64 {
    1e-2
}
fn default_p_up() -> f64 {
    1.0
}
fn default_warmup() -> usize {
    1
}
fn default_mode() -> SearchMode {
    SearchMode::SpDarts
}
fn default_space() -> SearchSpaceSpec {
    SearchSpaceSpec::with_default_ops(2, 8, true).expect("default space is valid")
}

/// Full search configuration. Serialized form is the CLI config file schema;
/// unset fields take these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_weight_lr")]
    pub weight_lr: f64,
    /// Cosine annealing floor; equal to `weight_lr` gives a constant rate.
    #[serde(default = "default_weight_lr")]
    pub weight_lr_min: f64,
    #[serde(default = "default_weight_momentum")]
    pub weight_momentum: f64,
    #[serde(default = "default_param_lr")]
    pub param_lr: f64,
    /// Decoupled decay on the architecture parameters.
    #[serde(default)]
    pub param_decay: f64,
    #[serde(default = "default_t_sp")]
    pub t_sp: f64,
    #[serde(default = "default_t_sm")]
    pub t_sm: f64,
    #[serde(default)]
    pub p_low: f64,
    #[serde(default = "default_p_up")]
    pub p_up: f64,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_space")]
    pub space: SearchSpaceSpec,
    #[serde(default = "default_mode")]
    pub mode: SearchMode,
}

impl Default for SearchConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        for (name, v) in [
            ("weight_lr", self.weight_lr),
            ("weight_lr_min", self.weight_lr_min),
            ("param_lr", self.param_lr),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(TrainError::BadConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.weight_momentum) {
            return Err(TrainError::BadConfig(format!(
                "weight_momentum must lie in [0,1), got {}",
                self.weight_momentum
            )));
        }
        if self.param_decay < 0.0 || !self.param_decay.is_finite() {
            return Err(TrainError::BadConfig("param_decay must be >= 0".into()));
        }
        self.temps().validate()?;
        self.mix_plan()?.validate()?;
        self.space.validate()?;
        Ok(())
    }

    pub fn temps(&self) -> TemperaturePair {
        TemperaturePair {
            t_sp: self.t_sp,
            t_sm: self.t_sm,
        }
    }

    pub fn mix_plan(&self) -> Result<MixPlan, SparseError> {
        MixPlan::new(self.p_low, self.p_up, self.epochs, self.warmup_epochs)
    }

    /// Hex digest of the full config.
    pub fn digest(&self) -> String {
        json_digest(self)
    }

    /// Digest with the seed zeroed: identifies a method across seeds.
    pub fn method_digest(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        json_digest(&c)
    }

    /// Short human label for reports.
    pub fn method_label(&self) -> String {
        let mode = match self.mode {
            SearchMode::SpDarts => "sp-darts",
            SearchMode::SmoothOnly => "smooth-only",
        };
        format!("{mode}(plr={})", self.param_lr)
    }
}

/// One epoch of recorded diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Raw schedule value for this epoch (before clamping for sampling).
    pub p: f64,
    pub ies: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub supernet_val_acc: f64,
    pub discretized_val_acc: f64,
    pub genotype: String,
}

pub const METRICS_CSV_HEADER: &str =
    "epoch,p,ies,train_loss,val_loss,supernet_val_acc,discretized_val_acc,genotype";

impl MetricsRow {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.p,
            self.ies,
            self.train_loss,
            self.val_loss,
            self.supernet_val_acc,
            self.discretized_val_acc,
            self.genotype
        )
    }
}

/// Renders the full metrics CSV (header plus one row per epoch).
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv_row());
        out.push('\n');
    }
    out
}

/// Outcome of a finished search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub final_genotype: Genotype,
    pub metrics: Vec<MetricsRow>,
    pub final_arch_params: ArchParams,
    /// Number of batches trained under the sparse temperature.
    pub sparse_steps: usize,
    /// Per-epoch count of sparse indicators.
    pub phi_ones_per_epoch: Vec<usize>,
}

impl SearchResult {
    pub fn final_ies(&self) -> f64 {
        self.metrics.last().map(|r| r.ies).unwrap_or(0.0)
    }
}

/// Adaptive-moment state for the architecture parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// Cosine-annealed learning rate at `epoch` out of `total`:
/// `lr_min + (lr - lr_min) (1 + cos(pi epoch / total)) / 2`.
pub fn cosine_lr(lr: f64, lr_min: f64, epoch: usize, total: usize) -> f64 {
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos())
}

fn check_finite(slice: &[f64], what: &str) -> Result<(), String> {
    if slice.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(format!("non-finite {what}"))
    }
}

/// One SGD-momentum step over every shared weight tensor.
/// `grads` mirrors the weight layout; `momentum_buf` is updated in place.
pub fn weight_step(
    weights: &mut SupernetWeights,
    grads: &SupernetWeights,
    momentum_buf: &mut SupernetWeights,
    lr: f64,
    momentum: f64,
) -> Result<(), String> {
    let apply = |w: &mut [f64], g: &[f64], buf: &mut [f64]| -> Result<(), String> {
        check_finite(g, "weight gradient")?;
        for i in 0..w.len() {
            buf[i] = momentum * buf[i] + g[i];
            w[i] -= lr * buf[i];
        }
        Ok(())
    };
    for (e, per_edge) in weights.edge_ops.iter_mut().enumerate() {
        for (m, aff) in per_edge.iter_mut().enumerate() {
            if let Some(a) = aff {
                let g = grads.edge_ops[e][m].as_ref().expect("grad layout matches");
                let buf = momentum_buf.edge_ops[e][m].as_mut().expect("buf layout matches");
                apply(&mut a.w, &g.w, &mut buf.w)?;
                apply(&mut a.b, &g.b, &mut buf.b)?;
            }
        }
    }
    apply(&mut weights.head_w, &grads.head_w, &mut momentum_buf.head_w)?;
    apply(&mut weights.head_b, &grads.head_b, &mut momentum_buf.head_b)?;
    Ok(())
}

/// One adaptive-moment step on the architecture parameters with decoupled
/// decay.
pub fn param_step(
    arch: &mut ArchParams,
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    decay: f64,
) -> Result<(), String> {
    check_finite(grads, "parameter gradient")?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let a = arch.as_mut_slice();
    for i in 0..a.len() {
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * grads[i];
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        a[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS) + lr * decay * a[i];
    }
    Ok(())
}

fn zeros_like(w: &SupernetWeights) -> SupernetWeights {
    let mut z = w.clone();
    for per_edge in &mut z.edge_ops {
        for aff in per_edge.iter_mut().flatten() {
            aff.w.iter_mut().for_each(|x| *x = 0.0);
            aff.b.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    z.head_w.iter_mut().for_each(|x| *x = 0.0);
    z.head_b.iter_mut().for_each(|x| *x = 0.0);
    z
}

/// Extracts weight gradients from a built pass into the weight layout.
fn collect_weight_grads(
    pass: &crate::supernet::ForwardPass,
    template: &SupernetWeights,
) -> SupernetWeights {
    let mut g = zeros_like(template);
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

/// Accuracy of the discretized finalnet over the given batches with the
/// current shared weights.
pub fn evaluate_discretized(
    weights: &SupernetWeights,
    arch: &ArchParams,
    space: &SearchSpace,
    val_batches: &[Batch],
) -> Result<f64, TrainError> {
    let genotype = discretize(arch, space);
    let mut correct = 0usize;
    let mut total = 0usize;
    for batch in val_batches {
        let pass = finalnet_forward(batch, weights, &genotype, space)?;
        correct += correct_count(&pass.logits_tensor(), &batch.labels);
        total += batch.len();
    }
    Ok(correct as f64 / total as f64)
}

fn evaluate_supernet(
    weights: &SupernetWeights,
    arch: &ArchParams,
    space: &SearchSpace,
    temps: &TemperaturePair,
    val_batches: &[Batch],
) -> Result<f64, TrainError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for batch in val_batches {
        let pass = supernet_forward(batch, weights, arch, false, temps, space)?;
        correct += correct_count(&pass.logits_tensor(), &batch.labels);
        total += batch.len();
    }
    Ok(correct as f64 / total as f64)
}

/// Serializable mid-run snapshot: everything needed to continue the search.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointState {
    config_digest: String,
    seed: u64,
    next_epoch: usize,
    weights: SupernetWeights,
    arch: ArchParams,
    momentum: SupernetWeights,
    adam: AdamState,
    metrics: Vec<MetricsRow>,
    sparse_steps: usize,
    phi_ones_per_epoch: Vec<usize>,
}

/// A search in progress. Epochs run one at a time so callers can checkpoint
/// or stream metrics between them.
pub struct SearchRun {
    config: SearchConfig,
    space: SearchSpace,
    weights: SupernetWeights,
    arch: ArchParams,
    momentum: SupernetWeights,
    adam: AdamState,
    train_batches: Vec<Batch>,
    val_batches: Vec<Batch>,
    next_epoch: usize,
    metrics: Vec<MetricsRow>,
    sparse_steps: usize,
    phi_ones_per_epoch: Vec<usize>,
}

impl SearchRun {
    pub fn new(config: &SearchConfig, data: &Dataset) -> Result<Self, TrainError> {
        config.validate()?;
        if data.spec.feature_dim != config.space.feature_dim {
            return Err(TrainError::BadData(format!(
                "dataset feature_dim {} != space feature_dim {}",
                data.spec.feature_dim, config.space.feature_dim
            )));
        }
        let space = build_space(&config.space)?;
        let d = config.space.feature_dim;
        let train_batches = data.train.batches(config.batch_size, d);
        let val_batches = data.val.batches(config.batch_size, d);
        // zipped streams: epoch length is the shorter one
        let n = train_batches.len().min(val_batches.len());
        if n == 0 {
            return Err(TrainError::BadData(format!(
                "batch size {} leaves no full train/val batch pair",
                config.batch_size
            )));
        }
        let weights = SupernetWeights::init(
            &space,
            data.spec.num_classes,
            derive_seed("init", &[config.seed]),
        );
        let momentum = zeros_like(&weights);
        let arch = ArchParams::zeros(space.num_edges(), space.num_ops());
        let adam = AdamState::new(space.num_edges() * space.num_ops());
        Ok(SearchRun {
            config: config.clone(),
            space,
            weights,
            arch,
            momentum,
            adam,
            train_batches: train_batches[..n].to_vec(),
            val_batches: val_batches[..n].to_vec(),
            next_epoch: 0,
            metrics: Vec::new(),
            sparse_steps: 0,
            phi_ones_per_epoch: Vec::new(),
        })
    }

    pub fn config(&self) -> &SearchConfig {
        &self.config
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    pub fn arch(&self) -> &ArchParams {
        &self.arch
    }

    pub fn epochs_done(&self) -> usize {
        self.next_epoch
    }

    pub fn is_finished(&self) -> bool {
        self.next_epoch >= self.config.epochs
    }

    /// Indicators for one epoch: Bernoulli draws under the clamped schedule
    /// value in mixed mode, all-smooth in smooth-only mode.
    fn epoch_indicators(&self, epoch: usize, p_raw: f64) -> Result<IndicatorVec, TrainError> {
        let n = self.train_batches.len();
        Ok(match self.config.mode {
            SearchMode::SmoothOnly => IndicatorVec::all_smooth(n),
            SearchMode::SpDarts => {
                let p = p_raw.clamp(0.0, 1.0);
                sample_indicators(p, n, derive_seed("phi", &[self.config.seed, epoch as u64]))?
            }
        })
    }

    /// Runs one epoch and appends its metrics row.
    pub fn run_epoch(&mut self) -> Result<&MetricsRow, TrainError> {
        let epoch = self.next_epoch;
        if epoch >= self.config.epochs {
            return Err(TrainError::BadConfig("search already finished".into()));
        }
        // the recorded p is the effective sparse-batch probability: the raw
        // schedule value in mixed mode, identically zero in smooth-only mode
        let p_raw = match self.config.mode {
            SearchMode::SmoothOnly => 0.0,
            SearchMode::SpDarts => p_schedule(&self.config.mix_plan()?, epoch)?,
        };
        let indicators = self.epoch_indicators(epoch, p_raw)?;
        let temps = self.config.temps();
        let lr = cosine_lr(
            self.config.weight_lr,
            self.config.weight_lr_min,
            epoch,
            self.config.epochs,
        );

        let diverged = |e: usize, b: usize| {
            move |detail: String| TrainError::Diverged {
                epoch: e,
                batch: b,
                detail,
            }
        };

        let mut train_loss_sum = 0.0;
        let mut val_loss_sum = 0.0;
        let n = self.train_batches.len();
        for b in 0..n {
            let phi = indicators.flags()[b];
            if phi {
                self.sparse_steps += 1;
            }

            // weight step on the training batch
            let train_batch = &self.train_batches[b];
            let mut pass = supernet_forward(
                train_batch,
                &self.weights,
                &self.arch,
                phi,
                &temps,
                &self.space,
            )
            .map_err(|e| diverged(epoch, b)(e.to_string()))?;
            let loss = cross_entropy(&mut pass, &train_batch.labels)?;
            let loss_val = pass.graph.value(loss).item();
            pass.graph.backward(loss)?;
            let wgrads = collect_weight_grads(&pass, &self.weights);
            weight_step(
                &mut self.weights,
                &wgrads,
                &mut self.momentum,
                lr,
                self.config.weight_momentum,
            )
            .map_err(diverged(epoch, b))?;
            train_loss_sum += loss_val;

            // parameter step on the validation batch, same indicator
            let val_batch = &self.val_batches[b];
            let mut pass = supernet_forward(
                val_batch,
                &self.weights,
                &self.arch,
                phi,
                &temps,
                &self.space,
            )
            .map_err(|e| diverged(epoch, b)(e.to_string()))?;
            let loss = cross_entropy(&mut pass, &val_batch.labels)?;
            let loss_val = pass.graph.value(loss).item();
            pass.graph.backward(loss)?;
            let mut agrads = Vec::with_capacity(self.arch.as_slice().len());
            for row in &pass.leaves.arch_rows {
                agrads.extend_from_slice(pass.graph.grad(*row).data());
            }
            param_step(
                &mut self.arch,
                &agrads,
                &mut self.adam,
                self.config.param_lr,
                self.config.param_decay,
            )
            .map_err(diverged(epoch, b))?;
            self.arch
                .validate()
                .map_err(|e| diverged(epoch, b)(e.to_string()))?;
            val_loss_sum += loss_val;
        }

        let genotype = discretize(&self.arch, &self.space);
        let supernet_val_acc = evaluate_supernet(
            &self.weights,
            &self.arch,
            &self.space,
            &temps,
            &self.val_batches,
        )?;
        let discretized_val_acc =
            evaluate_discretized(&self.weights, &self.arch, &self.space, &self.val_batches)?;
        self.metrics.push(MetricsRow {
            epoch,
            p: p_raw,
            ies: ies(&self.arch),
            train_loss: train_loss_sum / n as f64,
            val_loss: val_loss_sum / n as f64,
            supernet_val_acc,
            discretized_val_acc,
            genotype: genotype.key(),
        });
        self.phi_ones_per_epoch.push(indicators.count_sparse());
        self.next_epoch += 1;
        Ok(self.metrics.last().expect("just pushed"))
    }

    /// Consumes the run and returns the result. All epochs must have run.
    pub fn finish(self) -> Result<SearchResult, TrainError> {
        if !self.is_finished() {
            return Err(TrainError::BadConfig(format!(
                "search stopped early: {} of {} epochs",
                self.next_epoch, self.config.epochs
            )));
        }
        Ok(SearchResult {
            final_genotype: discretize(&self.arch, &self.space),
            metrics: self.metrics,
            final_arch_params: self.arch,
            sparse_steps: self.sparse_steps,
            phi_ones_per_epoch: self.phi_ones_per_epoch,
        })
    }

    /// Full-state snapshot in the versioned checkpoint container.
    pub fn checkpoint(&self) -> Vec<u8> {
        let state = CheckpointState {
            config_digest: self.config.digest(),
            seed: self.config.seed,
            next_epoch: self.next_epoch,
            weights: self.weights.clone(),
            arch: self.arch.clone(),
            momentum: self.momentum.clone(),
            adam: self.adam.clone(),
            metrics: self.metrics.clone(),
            sparse_steps: self.sparse_steps,
            phi_ones_per_epoch: self.phi_ones_per_epoch.clone(),
        };
        let payload = serde_json::to_vec(&state).expect("state serializes");
        let mut out = Vec::with_capacity(8 + 4 + 8 + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    /// Restores a run from a checkpoint taken with the same config and data.
    pub fn restore(
        bytes: &[u8],
        config: &SearchConfig,
        data: &Dataset,
    ) -> Result<Self, TrainError> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(TrainError::BadCheckpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::BadCheckpoint(format!(
                "unsupported version {version}"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if bytes.len() != 20 + len {
            return Err(TrainError::BadCheckpoint("truncated payload".into()));
        }
        let state: CheckpointState = serde_json::from_slice(&bytes[20..])
            .map_err(|e| TrainError::BadCheckpoint(e.to_string()))?;
        if state.config_digest != config.digest() {
            return Err(TrainError::BadCheckpoint(
                "config digest does not match checkpoint".into(),
            ));
        }
        let mut run = SearchRun::new(config, data)?;
        run.weights = state.weights;
        run.arch = state.arch;
        run.momentum = state.momentum;
        run.adam = state.adam;
        run.next_epoch = state.next_epoch;
        run.metrics = state.metrics;
        run.sparse_steps = state.sparse_steps;
        run.phi_ones_per_epoch = state.phi_ones_per_epoch;
        Ok(run)
    }
}

/// Runs the full search loop.
pub fn train_search(config: &SearchConfig, data: &Dataset) -> Result<SearchResult, TrainError> {
    let mut run = SearchRun::new(config, data)?;
    while !run.is_finished() {
        run.run_epoch()?;
    }
    run.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DataSpec};

    fn tiny_data() -> Dataset {
        generate(&DataSpec {
            feature_dim: 4,
            num_classes: 4,
            train_size: 64,
            val_size: 32,
            test_size: 32,
            seed: 1,
        })
        .unwrap()
    }

    fn tiny_config() -> SearchConfig {
        SearchConfig {
            epochs: 2,
            batch_size: 16,
            space: SearchSpaceSpec::with_default_ops(1, 4, true).unwrap(),
            seed: 7,
            ..SearchConfig::default()
        }
    }

    #[test]
    fn structural_two_epochs() {
        let data = tiny_data();
        let result = train_search(&tiny_config(), &data).unwrap();
        assert_eq!(result.metrics.len(), 2);
        assert_eq!(result.metrics[0].epoch, 0);
        assert_eq!(result.metrics[1].epoch, 1);
        let key = &result.metrics[1].genotype;
        assert_eq!(key, &result.final_genotype.key());
        assert!(key.split('-').all(|s| s.parse::<usize>().unwrap() < 4));
    }

    #[test]
    fn deterministic_given_seed() {
        let data = tiny_data();
        let a = train_search(&tiny_config(), &data).unwrap();
        let b = train_search(&tiny_config(), &data).unwrap();
        assert_eq!(a, b);
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    }

    #[test]
    fn zero_mix_equals_smooth_only_bitwise() {
        let data = tiny_data();
        let mut mixed = tiny_config();
        mixed.p_low = 0.0;
        mixed.p_up = 0.0;
        mixed.mode = SearchMode::SpDarts;
        let mut smooth = tiny_config();
        smooth.mode = SearchMode::SmoothOnly;
        let a = train_search(&mixed, &data).unwrap();
        let b = train_search(&smooth, &data).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(a.final_arch_params, b.final_arch_params);
    }

    #[test]
    fn smooth_only_never_touches_sparse_branch() {
        let data = tiny_data();
        let mut cfg = tiny_config();
        cfg.mode = SearchMode::SmoothOnly;
        cfg.p_up = 1.0; // would mix if the mode did not override it
        let result = train_search(&cfg, &data).unwrap();
        assert_eq!(result.sparse_steps, 0);
    }

    #[test]
    fn recorded_p_matches_schedule() {
        let data = tiny_data();
        let mut cfg = tiny_config();
        cfg.epochs = 5;
        cfg.warmup_epochs = 2;
        cfg.p_low = 0.25;
        cfg.p_up = 0.75;
        let result = train_search(&cfg, &data).unwrap();
        let plan = cfg.mix_plan().unwrap();
        for row in &result.metrics {
            let want = p_schedule(&plan, row.epoch).unwrap();
            assert_eq!(row.p.to_bits(), want.to_bits());
        }
        // warmup epochs stay at zero
        assert_eq!(result.metrics[0].p, 0.0);
        assert_eq!(result.metrics[1].p, 0.0);
    }

    #[test]
    fn phi_fraction_within_binomial_bound() {
        let data = generate(&DataSpec {
            feature_dim: 4,
            num_classes: 4,
            train_size: 512,
            val_size: 512,
            test_size: 32,
            seed: 3,
        })
        .unwrap();
        let mut cfg = tiny_config();
        cfg.epochs = 4;
        cfg.batch_size = 4; // 128 batches per epoch
        cfg.warmup_epochs = 1;
        cfg.p_low = 0.5;
        cfg.p_up = 0.5;
        let result = train_search(&cfg, &data).unwrap();
        let n = 128.0;
        for (i, &ones) in result.phi_ones_per_epoch.iter().enumerate() {
            let p = result.metrics[i].p.clamp(0.0, 1.0);
            let sigma = (p * (1.0 - p) / n).sqrt();
            let frac = ones as f64 / n;
            assert!(
                (frac - p).abs() <= 3.0 * sigma + 1e-12,
                "epoch {i}: frac {frac} vs p {p}"
            );
        }
    }

    #[test]
    fn cosine_lr_endpoints() {
        assert_eq!(cosine_lr(0.05, 0.05, 0, 50), 0.05);
        assert_eq!(cosine_lr(0.05, 0.05, 37, 50), 0.05);
        assert!((cosine_lr(0.1, 0.01, 0, 50) - 0.1).abs() < 1e-15);
        assert!((cosine_lr(0.1, 0.01, 50, 50) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn param_step_zero_grad_is_identity() {
        let mut arch = ArchParams::from_rows(&[vec![0.5, -0.25, 1.0]]).unwrap();
        let before = arch.clone();
        let mut adam = AdamState::new(3);
        param_step(&mut arch, &[0.0, 0.0, 0.0], &mut adam, 0.1, 0.0).unwrap();
        assert_eq!(arch, before);
    }

    #[test]
    fn param_step_first_step_magnitude_is_lr() {
        let mut arch = ArchParams::zeros(1, 3);
        let mut adam = AdamState::new(3);
        param_step(&mut arch, &[0.3, -2.0, 0.001], &mut adam, 0.01, 0.0).unwrap();
        for v in arch.as_slice() {
            assert!((v.abs() - 0.01).abs() < 1e-5, "{v}");
        }
    }

    #[test]
    fn param_step_rejects_non_finite() {
        let mut arch = ArchParams::zeros(1, 2);
        let mut adam = AdamState::new(2);
        assert!(param_step(&mut arch, &[f64::NAN, 0.0], &mut adam, 0.1, 0.0).is_err());
    }

    #[test]
    fn divergence_aborts_with_coordinates() {
        let data = tiny_data();
        let mut cfg = tiny_config();
        // one step at this rate pushes both the cell weights and the head
        // past 1e150, so the next matvec overflows
        cfg.weight_lr = 1e200;
        cfg.weight_lr_min = 1e200;
        let err = train_search(&cfg, &data);
        match err {
            Err(TrainError::Diverged { epoch, batch, .. }) => {
                assert_eq!(epoch, 0);
                assert!(batch <= 1, "batch {batch}");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_continues_identically() {
        let data = tiny_data();
        let mut cfg = tiny_config();
        cfg.epochs = 4;

        let mut run = SearchRun::new(&cfg, &data).unwrap();
        run.run_epoch().unwrap();
        run.run_epoch().unwrap();
        let snapshot = run.checkpoint();
        run.run_epoch().unwrap();
        run.run_epoch().unwrap();
        let straight = run.finish().unwrap();

        let mut restored = SearchRun::restore(&snapshot, &cfg, &data).unwrap();
        assert_eq!(restored.epochs_done(), 2);
        restored.run_epoch().unwrap();
        restored.run_epoch().unwrap();
        let resumed = restored.finish().unwrap();
        assert_eq!(straight, resumed);
    }

    #[test]
    fn checkpoint_rejects_other_config() {
        let data = tiny_data();
        let cfg = tiny_config();
        let mut run = SearchRun::new(&cfg, &data).unwrap();
        run.run_epoch().unwrap();
        let snapshot = run.checkpoint();
        let mut other = cfg.clone();
        other.seed = 99;
        assert!(matches!(
            SearchRun::restore(&snapshot, &other, &data),
            Err(TrainError::BadCheckpoint(_))
        ));
    }

    #[test]
    fn evaluate_discretized_untrained_is_near_chance() {
        let data = generate(&DataSpec {
            feature_dim: 4,
            num_classes: 4,
            train_size: 64,
            val_size: 1024,
            test_size: 32,
            seed: 11,
        })
        .unwrap();
        let spec = SearchSpaceSpec::with_default_ops(1, 4, true).unwrap();
        let space = build_space(&spec).unwrap();
        let weights = SupernetWeights::init(&space, 4, 123);
        let arch = ArchParams::zeros(space.num_edges(), space.num_ops());
        let batches = data.val.batches(64, 4);
        let acc = evaluate_discretized(&weights, &arch, &space, &batches).unwrap();
        // untrained network on balanced classes: near 1/4
        assert!((acc - 0.25).abs() < 0.15, "acc {acc}");
        let again = evaluate_discretized(&weights, &arch, &space, &batches).unwrap();
        assert_eq!(acc, again);
    }

    #[test]
    fn config_defaults_parse_from_empty_json() {
        let cfg: SearchConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.epochs, 50);
        assert_eq!(cfg.weight_lr, 0.05);
        assert_eq!(cfg.weight_lr_min, 0.05);
        assert_eq!(cfg.param_lr, 3e-4);
        assert_eq!(cfg.param_decay, 0.0);
        assert_eq!(cfg.t_sp, 1e-3);
        assert_eq!(cfg.t_sm, 1e-2);
        assert_eq!(cfg.p_low, 0.0);
        assert_eq!(cfg.p_up, 1.0);
        assert_eq!(cfg.warmup_epochs, 1);
        assert_eq!(cfg.mode, SearchMode::SpDarts);
        cfg.validate().unwrap();
    }

    #[test]
    fn config_rejects_unknown_fields_and_bad_values() {
        let err: Result<SearchConfig, _> = serde_json::from_str(r#"{"lr": 3}"#);
        assert!(err.is_err());
        let mut cfg = SearchConfig::default();
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = SearchConfig::default();
        cfg.t_sp = 0.5;
        cfg.t_sm = 0.1; // t_sp > t_sm
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn method_digest_ignores_seed() {
        let mut a = SearchConfig::default();
        let mut b = SearchConfig::default();
        a.seed = 1;
        b.seed = 2;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.method_digest(), b.method_digest());
        b.param_lr = 0.1;
        assert_ne!(a.method_digest(), b.method_digest());
    }
}
