//! The weight-sharing network.
//!
//! One cell: features flow from the input node through compound edges to the
//! last intermediate node, whose features feed an affine classifier head.
//! In supernet mode every edge computes a convex combination of all candidate
//! operations under the selected edge distribution; in finalnet mode each edge
//! applies exactly its chosen operation with coefficient 1 and no residue from
//! the others.

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::space::{ArchParams, Genotype, OperationKind, SearchSpace};
use crate::sparse::{graph_softmax, SparseError, TemperaturePair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SupernetError {
    #[error("batch invalid: {0}")]
    BadBatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("genotype does not fit the space: {0}")]
    BadGenotype(String),
    #[error("weights do not fit the space: {0}")]
    BadWeights(String),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Trainable weights for one candidate operation: `W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineWeights {
    /// Row-major `dim x dim`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// All shared operation weights plus the classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupernetWeights {
    pub feature_dim: usize,
    pub num_classes: usize,
    /// `edge_ops[e][m]` is `Some` only when op `m` carries weights.
    pub edge_ops: Vec<Vec<Option<AffineWeights>>>,
    /// Row-major `num_classes x feature_dim`.
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

impl SupernetWeights {
    /// Fresh weights: affine maps uniform in `(-1/sqrt(d), 1/sqrt(d))` from a
    /// seeded generator; biases zero.
    pub fn init(space: &SearchSpace, num_classes: usize, seed: u64) -> Self {
        let d = space.spec.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d as f64).sqrt();
        let mut rand_vec = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        let edge_ops = (0..space.num_edges())
            .map(|_| {
                space
                    .spec
                    .op_set
                    .iter()
                    .map(|op| {
                        op.has_weights().then(|| AffineWeights {
                            w: rand_vec(d * d),
                            b: vec![0.0; d],
                        })
                    })
                    .collect()
            })
            .collect();
        let head_w = rand_vec(num_classes * d);
        let head_b = vec![0.0; num_classes];
        SupernetWeights {
            feature_dim: d,
            num_classes,
            edge_ops,
            head_w,
            head_b,
        }
    }

    pub fn validate(&self, space: &SearchSpace) -> Result<(), SupernetError> {
        let d = space.spec.feature_dim;
        if self.feature_dim != d || self.edge_ops.len() != space.num_edges() {
            return Err(SupernetError::BadWeights("dimension mismatch".into()));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        for per_edge in &self.edge_ops {
            if per_edge.len() != space.num_ops() {
                return Err(SupernetError::BadWeights("op count mismatch".into()));
            }
            for w in per_edge.iter().flatten() {
                if w.w.len() != d * d || w.b.len() != d || !finite(&w.w) || !finite(&w.b) {
                    return Err(SupernetError::BadWeights("bad affine tensor".into()));
                }
            }
        }
        if self.head_w.len() != self.num_classes * d
            || self.head_b.len() != self.num_classes
            || !finite(&self.head_w)
            || !finite(&self.head_b)
        {
            return Err(SupernetError::BadWeights("bad classifier head".into()));
        }
        Ok(())
    }
}

/// A mini batch: `B x feature_dim` inputs with one class label per row.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub feature_dim: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, feature_dim: usize) -> Result<Self, SupernetError> {
        if labels.is_empty() {
            return Err(SupernetError::BadBatch("empty batch".into()));
        }
        if inputs.len() != labels.len() * feature_dim {
            return Err(SupernetError::BadBatch(format!(
                "inputs length {} does not match {} rows of dim {}",
                inputs.len(),
                labels.len(),
                feature_dim
            )));
        }
        Ok(Batch {
            inputs,
            labels,
            feature_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, b: usize) -> &[f64] {
        &self.inputs[b * self.feature_dim..(b + 1) * self.feature_dim]
    }
}

/// Graph-node handles for every trainable tensor staged into a forward pass.
pub struct ParamLeaves {
    /// Per-edge rows of `A` (supernet mode only).
    pub arch_rows: Vec<NodeId>,
    /// Mirrors `SupernetWeights::edge_ops`: `(w, b)` leaf per weighted op.
    pub edge_ops: Vec<Vec<Option<(NodeId, NodeId)>>>,
    pub head_w: NodeId,
    pub head_b: NodeId,
}

/// One built forward pass: the graph plus per-sample logits vectors.
pub struct ForwardPass {
    pub graph: Graph,
    pub logits: Vec<NodeId>,
    pub leaves: ParamLeaves,
}

impl ForwardPass {
    /// Copies the per-sample logit values into one `B x K` tensor.
    pub fn logits_tensor(&self) -> Tensor {
        let k = self.graph.value(self.logits[0]).numel();
        let mut data = Vec::with_capacity(self.logits.len() * k);
        for id in &self.logits {
            data.extend_from_slice(self.graph.value(*id).data());
        }
        Tensor::new(vec![self.logits.len(), k], data).expect("finite logits")
    }
}

fn stage_weights(
    g: &mut Graph,
    weights: &SupernetWeights,
    d: usize,
) -> Result<ParamLeaves, SupernetError> {
    let mut edge_ops = Vec::with_capacity(weights.edge_ops.len());
    for per_edge in &weights.edge_ops {
        let mut ops = Vec::with_capacity(per_edge.len());
        for aff in per_edge {
            ops.push(match aff {
                Some(a) => {
                    let w = g.leaf(Tensor::matrix(d, d, a.w.clone())?)?;
                    let b = g.leaf(Tensor::vector(a.b.clone())?)?;
                    Some((w, b))
                }
                None => None,
            });
        }
        edge_ops.push(ops);
    }
    let head_w = g.leaf(Tensor::matrix(weights.num_classes, d, weights.head_w.clone())?)?;
    let head_b = g.leaf(Tensor::vector(weights.head_b.clone())?)?;
    Ok(ParamLeaves {
        arch_rows: Vec::new(),
        edge_ops,
        head_w,
        head_b,
    })
}

fn apply_operation(
    g: &mut Graph,
    kind: OperationKind,
    leaf: Option<(NodeId, NodeId)>,
    x: NodeId,
    d: usize,
) -> Result<NodeId, SupernetError> {
    Ok(match kind {
        OperationKind::None => g.constant(Tensor::zeros(vec![d]))?,
        OperationKind::Skip => x,
        OperationKind::Linear => {
            let (w, b) = leaf.expect("linear op staged with weights");
            let wx = g.matvec(w, x)?;
            g.add(wx, b)?
        }
        OperationKind::GatedLinear => {
            let (w, b) = leaf.expect("gated-linear op staged with weights");
            let wx = g.matvec(w, x)?;
            let pre = g.add(wx, b)?;
            g.tanh(pre)?
        }
    })
}

/// Convex combination of all candidate operations applied to `x`, weighted by
/// the entries of `dist` (a length-M node). Differentiable in `x`, the
/// operation weights, and `dist`.
pub fn mixed_edge_forward(
    g: &mut Graph,
    x: NodeId,
    kinds: &[OperationKind],
    leaves: &[Option<(NodeId, NodeId)>],
    dist: NodeId,
    d: usize,
) -> Result<NodeId, SupernetError> {
    let m = kinds.len();
    let mut acc: Option<NodeId> = None;
    for (i, kind) in kinds.iter().enumerate() {
        let mut onehot = vec![0.0; m];
        onehot[i] = 1.0;
        let mask = g.constant(Tensor::vector(onehot)?)?;
        let masked = g.mul(dist, mask)?;
        let coeff = g.sum(masked)?;
        let op_out = apply_operation(g, *kind, leaves[i], x, d)?;
        let scaled = g.scale(coeff, op_out)?;
        acc = Some(match acc {
            Some(prev) => g.add(prev, scaled)?,
            None => scaled,
        });
    }
    Ok(acc.expect("op set is never empty"))
}

fn head_logits(
    g: &mut Graph,
    leaves: &ParamLeaves,
    features: NodeId,
) -> Result<NodeId, SupernetError> {
    let wx = g.matvec(leaves.head_w, features)?;
    Ok(g.add(wx, leaves.head_b)?)
}

/// Builds the supernet forward pass for a batch: every edge mixes all
/// candidate operations under `softmax(A_e / t)` where `t` is picked by the
/// batch indicator `phi`. Returns the graph with per-sample logits and leaf
/// handles for `A` rows and all weights.
pub fn supernet_forward(
    batch: &Batch,
    weights: &SupernetWeights,
    arch: &ArchParams,
    phi: bool,
    temps: &TemperaturePair,
    space: &SearchSpace,
) -> Result<ForwardPass, SupernetError> {
    temps.validate()?;
    let d = space.spec.feature_dim;
    if batch.feature_dim != d {
        return Err(SupernetError::BadBatch(format!(
            "batch feature dim {} != space feature dim {}",
            batch.feature_dim, d
        )));
    }
    let t = if phi { temps.t_sp } else { temps.t_sm };

    let mut g = Graph::new();
    let mut leaves = stage_weights(&mut g, weights, d)?;

    let mut dists = Vec::with_capacity(space.num_edges());
    for e in 0..space.num_edges() {
        let row = g.leaf(Tensor::vector(arch.row(e).to_vec())?)?;
        leaves.arch_rows.push(row);
        dists.push(graph_softmax(&mut g, row, t)?);
    }

    let mut logits = Vec::with_capacity(batch.len());
    for b in 0..batch.len() {
        let x0 = g.constant(Tensor::vector(batch.row(b).to_vec())?)?;
        let mut feats = vec![x0];
        for node in 1..=space.spec.num_intermediate_nodes {
            let mut agg: Option<NodeId> = None;
            for (e, from) in space.incoming(node) {
                let out = mixed_edge_forward(
                    &mut g,
                    feats[from],
                    &space.spec.op_set,
                    &leaves.edge_ops[e],
                    dists[e],
                    d,
                )?;
                agg = Some(match agg {
                    Some(prev) => g.add(prev, out)?,
                    None => out,
                });
            }
            feats.push(agg.expect("every intermediate node has incoming edges"));
        }
        logits.push(head_logits(&mut g, &leaves, feats[space.output_node()])?);
    }
    Ok(ForwardPass { graph: g, logits, leaves })
}

/// Builds the discretized finalnet forward pass: each edge applies only its
/// chosen operation, with coefficient exactly 1 and the others absent.
pub fn finalnet_forward(
    batch: &Batch,
    weights: &SupernetWeights,
    genotype: &Genotype,
    space: &SearchSpace,
) -> Result<ForwardPass, SupernetError> {
    let d = space.spec.feature_dim;
    if batch.feature_dim != d {
        return Err(SupernetError::BadBatch(format!(
            "batch feature dim {} != space feature dim {}",
            batch.feature_dim, d
        )));
    }
    if genotype.choices.len() != space.num_edges()
        || genotype.choices.iter().any(|&c| c >= space.num_ops())
    {
        return Err(SupernetError::BadGenotype(genotype.key()));
    }

    let mut g = Graph::new();
    let leaves = stage_weights(&mut g, weights, d)?;

    let mut logits = Vec::with_capacity(batch.len());
    for b in 0..batch.len() {
        let x0 = g.constant(Tensor::vector(batch.row(b).to_vec())?)?;
        let mut feats = vec![x0];
        for node in 1..=space.spec.num_intermediate_nodes {
            let mut agg: Option<NodeId> = None;
            for (e, from) in space.incoming(node) {
                let m = genotype.choices[e];
                let out = apply_operation(
                    &mut g,
                    space.spec.op_set[m],
                    leaves.edge_ops[e][m],
                    feats[from],
                    d,
                )?;
                agg = Some(match agg {
                    Some(prev) => g.add(prev, out)?,
                    None => out,
                });
            }
            feats.push(agg.expect("every intermediate node has incoming edges"));
        }
        logits.push(head_logits(&mut g, &leaves, feats[space.output_node()])?);
    }
    Ok(ForwardPass { graph: g, logits, leaves })
}

/// Mean over the batch of `-log softmax(logits_b)[label_b]`, as a scalar node
/// in the pass's graph.
pub fn cross_entropy(
    pass: &mut ForwardPass,
    labels: &[usize],
) -> Result<NodeId, SupernetError> {
    let g = &mut pass.graph;
    let k = g.value(pass.logits[0]).numel();
    if labels.len() != pass.logits.len() {
        return Err(SupernetError::BadBatch(format!(
            "{} labels for {} logit rows",
            labels.len(),
            pass.logits.len()
        )));
    }
    let mut total: Option<NodeId> = None;
    for (b, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(SupernetError::LabelOutOfRange { label, classes: k });
        }
        let row = pass.logits[b];
        // log-sum-exp with a detached max shift
        let max = g
            .value(row)
            .data()
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let neg_max = g.constant(Tensor::new(vec![k], vec![-max; k])?)?;
        let shifted = g.add(row, neg_max)?;
        let exps = g.exp(shifted)?;
        let total_exp = g.sum(exps)?;
        let log_total = g.log(total_exp)?;
        let max_node = g.constant(Tensor::scalar(max)?)?;
        let lse = g.add(log_total, max_node)?;

        let mut onehot = vec![0.0; k];
        onehot[label] = 1.0;
        let mask = g.constant(Tensor::vector(onehot)?)?;
        let picked_vec = g.mul(row, mask)?;
        let picked = g.sum(picked_vec)?;
        let neg_picked = g.scale_const(-1.0, picked)?;
        let loss_b = g.add(lse, neg_picked)?;
        total = Some(match total {
            Some(prev) => g.add(prev, loss_b)?,
            None => loss_b,
        });
    }
    let total = total.expect("non-empty batch");
    Ok(g.scale_const(1.0 / labels.len() as f64, total)?)
}

/// Max relative error between backward gradients of the supernet
/// cross-entropy loss and central finite differences, taken over all
/// architecture parameters, every weighted op on edge 0, and the classifier
/// head. Finite differences are void in the saturation regime, so callers
/// should keep the effective temperature at or above ~0.1.
pub fn supernet_loss_grad_error(
    batch: &Batch,
    weights: &SupernetWeights,
    arch: &ArchParams,
    phi: bool,
    temps: &TemperaturePair,
    space: &SearchSpace,
    eps: f64,
) -> Result<f64, SupernetError> {
    let eval = |w: &SupernetWeights, a: &ArchParams| -> Result<f64, SupernetError> {
        let mut pass = supernet_forward(batch, w, a, phi, temps, space)?;
        let loss = cross_entropy(&mut pass, &batch.labels)?;
        Ok(pass.graph.value(loss).item())
    };

    let mut pass = supernet_forward(batch, weights, arch, phi, temps, space)?;
    let loss = cross_entropy(&mut pass, &batch.labels)?;
    pass.graph.backward(loss)?;

    let rel = |analytic: f64, numeric: f64| {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
    };
    let mut worst: f64 = 0.0;

    for e in 0..space.num_edges() {
        let grad = pass.graph.grad(pass.leaves.arch_rows[e]);
        for m in 0..space.num_ops() {
            let mut ap = arch.clone();
            ap.row_mut(e)[m] += eps;
            let mut am = arch.clone();
            am.row_mut(e)[m] -= eps;
            let numeric = (eval(weights, &ap)? - eval(weights, &am)?) / (2.0 * eps);
            worst = worst.max(rel(grad.data()[m], numeric));
        }
    }
    for m in 0..space.num_ops() {
        if let Some((wid, bid)) = pass.leaves.edge_ops[0][m] {
            let wgrad = pass.graph.grad(wid);
            for i in 0..wgrad.numel() {
                let mut wp = weights.clone();
                let mut wm = weights.clone();
                wp.edge_ops[0][m].as_mut().unwrap().w[i] += eps;
                wm.edge_ops[0][m].as_mut().unwrap().w[i] -= eps;
                let numeric = (eval(&wp, arch)? - eval(&wm, arch)?) / (2.0 * eps);
                worst = worst.max(rel(wgrad.data()[i], numeric));
            }
            let bgrad = pass.graph.grad(bid);
            for i in 0..bgrad.numel() {
                let mut wp = weights.clone();
                let mut wm = weights.clone();
                wp.edge_ops[0][m].as_mut().unwrap().b[i] += eps;
                wm.edge_ops[0][m].as_mut().unwrap().b[i] -= eps;
                let numeric = (eval(&wp, arch)? - eval(&wm, arch)?) / (2.0 * eps);
                worst = worst.max(rel(bgrad.data()[i], numeric));
            }
        }
    }
    let head_grad = pass.graph.grad(pass.leaves.head_w);
    for i in 0..head_grad.numel() {
        let mut wp = weights.clone();
        let mut wm = weights.clone();
        wp.head_w[i] += eps;
        wm.head_w[i] -= eps;
        let numeric = (eval(&wp, arch)? - eval(&wm, arch)?) / (2.0 * eps);
        worst = worst.max(rel(head_grad.data()[i], numeric));
    }
    Ok(worst)
}

/// Number of rows whose argmax matches the label; ties break to the lowest
/// index.
pub fn correct_count(logits: &Tensor, labels: &[usize]) -> usize {
    let rows = logits.shape()[0];
    let k = logits.shape()[1];
    debug_assert_eq!(rows, labels.len());
    (0..rows)
        .filter(|&b| crate::space::argmax(&logits.data()[b * k..(b + 1) * k]) == labels[b])
        .count()
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    correct_count(logits, labels) as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{build_space, SearchSpaceSpec};

    fn tiny_space(nodes: usize) -> SearchSpace {
        let spec = SearchSpaceSpec::with_default_ops(nodes, 3, true).unwrap();
        build_space(&spec).unwrap()
    }

    fn batch_of(rows: &[&[f64]], labels: &[usize], d: usize) -> Batch {
        let inputs: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Batch::new(inputs, labels.to_vec(), d).unwrap()
    }

    #[test]
    fn mixed_edge_one_hot_skip_is_identity() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.5, -2.0, 0.5]).unwrap()).unwrap();
        let dist = g
            .leaf(Tensor::vector(vec![0.0, 1.0]).unwrap())
            .unwrap();
        let kinds = [OperationKind::None, OperationKind::Skip];
        let out = mixed_edge_forward(&mut g, x, &kinds, &[None, None], dist, 3).unwrap();
        assert_eq!(g.value(out).data(), &[1.5, -2.0, 0.5]);
    }

    #[test]
    fn mixed_edge_half_skip_half_none() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![2.0, -4.0, 6.0]).unwrap()).unwrap();
        let dist = g.leaf(Tensor::vector(vec![0.5, 0.5]).unwrap()).unwrap();
        let kinds = [OperationKind::Skip, OperationKind::None];
        let out = mixed_edge_forward(&mut g, x, &kinds, &[None, None], dist, 3).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn mixed_edge_one_hot_none_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let dist = g.leaf(Tensor::vector(vec![1.0, 0.0]).unwrap()).unwrap();
        let kinds = [OperationKind::None, OperationKind::Skip];
        let out = mixed_edge_forward(&mut g, x, &kinds, &[None, None], dist, 3).unwrap();
        assert_eq!(g.value(out).data(), &[0.0, 0.0, 0.0]);
    }

    fn saturated_arch(space: &SearchSpace, choices: &[usize]) -> ArchParams {
        let mut a = ArchParams::zeros(space.num_edges(), space.num_ops());
        for (e, &c) in choices.iter().enumerate() {
            for m in 0..space.num_ops() {
                a.row_mut(e)[m] = if m == c { 1000.0 } else { -1000.0 };
            }
        }
        a
    }

    #[test]
    fn saturated_supernet_matches_finalnet() {
        let space = tiny_space(2);
        let weights = SupernetWeights::init(&space, 4, 17);
        let choices = vec![2usize, 1, 3];
        let arch = saturated_arch(&space, &choices);
        let genotype = Genotype::new(choices, &space).unwrap();
        let batch = batch_of(&[&[0.4, -0.2, 1.0], &[1.0, 0.0, -1.0]], &[0, 1], 3);
        let temps = TemperaturePair::default();

        for phi in [true, false] {
            let sup = supernet_forward(&batch, &weights, &arch, phi, &temps, &space).unwrap();
            let fin = finalnet_forward(&batch, &weights, &genotype, &space).unwrap();
            let (a, b) = (sup.logits_tensor(), fin.logits_tensor());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-6, "phi={phi}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn uniform_arch_skip_none_space_closed_form() {
        // Ops {none, skip}, two intermediate nodes, uniform distribution:
        // node1 = x/2, node2 = (x + node1)/2 = 0.75 x.
        let spec = SearchSpaceSpec::new(
            2,
            3,
            vec![OperationKind::None, OperationKind::Skip],
            true,
        )
        .unwrap();
        let space = build_space(&spec).unwrap();
        let mut weights = SupernetWeights::init(&space, 2, 5);
        // identity head to read features directly: 2x3 top rows of identity
        weights.head_w = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        weights.head_b = vec![0.0, 0.0];
        let arch = ArchParams::zeros(space.num_edges(), space.num_ops());
        let batch = batch_of(&[&[2.0, -4.0, 8.0]], &[0], 3);
        let temps = TemperaturePair::new(1e-3, 1.0).unwrap();
        let pass = supernet_forward(&batch, &weights, &arch, false, &temps, &space).unwrap();
        let logits = pass.logits_tensor();
        assert!((logits.data()[0] - 1.5).abs() < 1e-12);
        assert!((logits.data()[1] - -3.0).abs() < 1e-12);
    }

    #[test]
    fn per_sample_independence() {
        let space = tiny_space(2);
        let weights = SupernetWeights::init(&space, 4, 3);
        let arch = ArchParams::zeros(space.num_edges(), space.num_ops());
        let temps = TemperaturePair::default();
        let row: &[f64] = &[0.3, 0.6, -0.9];
        let single = batch_of(&[row], &[2], 3);
        let multi = batch_of(&[&[1.0, 1.0, 1.0], row, &[0.0, 0.0, 0.0], &[2.0, -1.0, 0.1]], &[0, 2, 1, 3], 3);
        let a = supernet_forward(&single, &weights, &arch, false, &temps, &space).unwrap();
        let b = supernet_forward(&multi, &weights, &arch, false, &temps, &space).unwrap();
        let (la, lb) = (a.logits_tensor(), b.logits_tensor());
        for k in 0..4 {
            assert_eq!(la.data()[k].to_bits(), lb.data()[4 + k].to_bits());
        }
    }

    #[test]
    fn finalnet_all_skip_doubles_input_via_sum_aggregation() {
        // all-skip with 2 intermediate nodes: node2 = x0 + node1 = 2 x0
        let space = tiny_space(2);
        let mut weights = SupernetWeights::init(&space, 2, 9);
        weights.head_w = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        weights.head_b = vec![0.5, -0.5];
        let genotype = Genotype::new(vec![1, 1, 1], &space).unwrap();
        let batch = batch_of(&[&[1.0, 2.0, 3.0]], &[0], 3);
        let pass = finalnet_forward(&batch, &weights, &genotype, &space).unwrap();
        let logits = pass.logits_tensor();
        assert!((logits.data()[0] - 2.5).abs() < 1e-12);
        assert!((logits.data()[1] - 3.5).abs() < 1e-12);
    }

    #[test]
    fn finalnet_all_none_gives_head_bias() {
        let space = tiny_space(2);
        let mut weights = SupernetWeights::init(&space, 4, 9);
        weights.head_b = vec![0.1, 0.2, 0.3, 0.4];
        let genotype = Genotype::new(vec![0, 0, 0], &space).unwrap();
        let batch = batch_of(&[&[1.0, 2.0, 3.0], &[-1.0, 0.0, 1.0]], &[0, 1], 3);
        let pass = finalnet_forward(&batch, &weights, &genotype, &space).unwrap();
        let logits = pass.logits_tensor();
        for b in 0..2 {
            for k in 0..4 {
                assert!((logits.data()[b * 4 + k] - weights.head_b[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn finalnet_ignores_unchosen_weights() {
        let space = tiny_space(2);
        let mut weights = SupernetWeights::init(&space, 4, 11);
        let genotype = Genotype::new(vec![2, 1, 3], &space).unwrap();
        let batch = batch_of(&[&[0.2, 0.4, -0.6]], &[1], 3);
        let before = finalnet_forward(&batch, &weights, &genotype, &space)
            .unwrap()
            .logits_tensor();
        // perturb every weight not selected by the genotype
        for (e, &c) in genotype.choices.iter().enumerate() {
            for m in 0..space.num_ops() {
                if m != c {
                    if let Some(a) = &mut weights.edge_ops[e][m] {
                        for v in a.w.iter_mut() {
                            *v += 123.0;
                        }
                    }
                }
            }
        }
        let after = finalnet_forward(&batch, &weights, &genotype, &space)
            .unwrap()
            .logits_tensor();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn finalnet_rejects_bad_genotype() {
        let space = tiny_space(1);
        let weights = SupernetWeights::init(&space, 4, 2);
        let batch = batch_of(&[&[1.0, 0.0, 0.0]], &[0], 3);
        let bad = Genotype {
            choices: vec![9],
        };
        assert!(finalnet_forward(&batch, &weights, &bad, &space).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let space = tiny_space(1);
        let mut weights = SupernetWeights::init(&space, 4, 2);
        weights.head_w = vec![0.0; 4 * 3];
        weights.head_b = vec![0.0; 4];
        let genotype = Genotype::new(vec![1], &space).unwrap();
        let batch = batch_of(&[&[1.0, 2.0, 3.0]], &[2], 3);
        let mut pass = finalnet_forward(&batch, &weights, &genotype, &space).unwrap();
        let loss = cross_entropy(&mut pass, &batch.labels).unwrap();
        let v = pass.graph.value(loss).item();
        assert!((v - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_huge_margin_vanishes() {
        let space = tiny_space(1);
        let mut weights = SupernetWeights::init(&space, 4, 2);
        weights.head_w = vec![0.0; 4 * 3];
        weights.head_b = vec![1000.0, 0.0, 0.0, 0.0];
        let genotype = Genotype::new(vec![0], &space).unwrap();
        let batch = batch_of(&[&[0.0, 0.0, 0.0]], &[0], 3);
        let mut pass = finalnet_forward(&batch, &weights, &genotype, &space).unwrap();
        let loss = cross_entropy(&mut pass, &batch.labels).unwrap();
        assert!(pass.graph.value(loss).item() < 1e-6);
    }

    #[test]
    fn cross_entropy_mean_invariant_to_duplication() {
        let space = tiny_space(1);
        let weights = SupernetWeights::init(&space, 4, 23);
        let genotype = Genotype::new(vec![2], &space).unwrap();
        let one = batch_of(&[&[0.3, -0.1, 0.8]], &[1], 3);
        let two = batch_of(&[&[0.3, -0.1, 0.8], &[0.3, -0.1, 0.8]], &[1, 1], 3);
        let l1 = {
            let mut p = finalnet_forward(&one, &weights, &genotype, &space).unwrap();
            let loss = cross_entropy(&mut p, &one.labels).unwrap();
            p.graph.value(loss).item()
        };
        let l2 = {
            let mut p = finalnet_forward(&two, &weights, &genotype, &space).unwrap();
            let loss = cross_entropy(&mut p, &two.labels).unwrap();
            p.graph.value(loss).item()
        };
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_label_out_of_range() {
        let space = tiny_space(1);
        let weights = SupernetWeights::init(&space, 4, 2);
        let genotype = Genotype::new(vec![1], &space).unwrap();
        let batch = batch_of(&[&[1.0, 0.0, 0.0]], &[0], 3);
        let mut pass = finalnet_forward(&batch, &weights, &genotype, &space).unwrap();
        assert!(matches!(
            cross_entropy(&mut pass, &[7]),
            Err(SupernetError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn accuracy_counts() {
        let logits = Tensor::new(
            vec![4, 2],
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        assert_eq!(accuracy(&logits, &[0, 1, 0, 0]), 1.0);
        assert_eq!(accuracy(&logits, &[1, 0, 1, 1]), 0.0);
        assert_eq!(accuracy(&logits, &[0, 1, 0, 1]), 0.75);
        // tie breaks to the lowest index
        let tied = Tensor::new(vec![1, 3], vec![0.5, 0.5, 0.5]).unwrap();
        assert_eq!(accuracy(&tied, &[0]), 1.0);
        assert_eq!(accuracy(&tied, &[1]), 0.0);
    }

    /// Gradients of the supernet loss with respect to both the shared weights
    /// and the architecture parameters pass a finite-difference check away
    /// from the saturation regime.
    #[test]
    fn supernet_loss_grad_check() {
        let spec = SearchSpaceSpec::with_default_ops(2, 3, true).unwrap();
        let space = build_space(&spec).unwrap();
        let weights = SupernetWeights::init(&space, 3, 31);
        let mut arch = ArchParams::zeros(space.num_edges(), space.num_ops());
        for (i, v) in arch.as_mut_slice().iter_mut().enumerate() {
            *v = 0.1 * ((i as f64 * 0.7).sin());
        }
        let batch = batch_of(&[&[0.5, -0.3, 0.2], &[-1.0, 0.4, 0.7]], &[0, 2], 3);
        let temps = TemperaturePair::new(0.5, 1.0).unwrap();
        for phi in [true, false] {
            let worst =
                supernet_loss_grad_error(&batch, &weights, &arch, phi, &temps, &space, 1e-5)
                    .unwrap();
            assert!(worst < 1e-4, "phi={phi}: max rel error {worst}");
        }
    }
}
