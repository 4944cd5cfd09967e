//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a define-by-run arena: every operation appends a node whose
//! parents were created earlier, so construction order is already a topological
//! order and [`Graph::backward`] is a single reverse sweep. Graphs are rebuilt
//! per forward pass and confined to one thread; distinct graphs are
//! independent.
//!
//! Everything is 64-bit. The sparse-softmax path divides logits by
//! temperatures near 1e-3, which multiplies values by ~1000; 32-bit precision
//! would corrupt those gradients. Broadcasting is limited to scalar-times-
//! tensor so each backward rule stays auditable.

use thiserror::Error;

/// Errors from graph construction, evaluation, or gradient checking.
#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("operation {op} expects a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("matvec expects a matrix and a vector, got {lhs:?} and {rhs:?}")]
    NotMatVec { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("grad_check: {0}")]
    GradCheck(String),
}

/// A dense tensor: a shape and a flat row-major buffer of finite `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` matches `shape` and is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(AutodiffError::InvalidTensor(format!(
                "zero dimension in shape {shape:?}"
            )));
        }
        if data.len() != numel {
            return Err(AutodiffError::InvalidTensor(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(AutodiffError::InvalidTensor(
                "non-finite entry in tensor data".into(),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Result<Self, AutodiffError> {
        Tensor::new(vec![], vec![value])
    }

    /// Length-`n` vector.
    pub fn vector(data: Vec<f64>) -> Result<Self, AutodiffError> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    /// `rows x cols` matrix from a row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AutodiffError> {
        Tensor::new(vec![rows, cols], data)
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// True for rank-0 tensors and single-element vectors.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }
}

/// Handle to a node inside one [`Graph`]. Not valid across graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Parameter leaf: receives gradient.
    Leaf,
    /// Constant leaf: backward skips it.
    Const,
    Add(NodeId, NodeId),
    /// Scalar node times tensor node; gradient flows to both.
    Scale(NodeId, NodeId),
    /// Fixed scalar times tensor node.
    ScaleConst(f64, NodeId),
    /// Elementwise product.
    Mul(NodeId, NodeId),
    /// `[r, c]` matrix times `[c]` vector.
    MatVec(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Max over all entries; subgradient routed to the first argmax.
    MaxReduce(NodeId),
}

struct NodeRec {
    value: Tensor,
    op: Op,
    grad: Option<Vec<f64>>,
}

/// Define-by-run computation graph.
pub struct Graph {
    nodes: Vec<NodeRec>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId, AutodiffError> {
        if !value.data.iter().all(|x| x.is_finite()) {
            return Err(AutodiffError::NonFinite { op: op_name(&op) });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(NodeRec {
            value,
            op,
            grad: None,
        });
        Ok(id)
    }

    /// Parameter leaf; its gradient is available after [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId, AutodiffError> {
        self.push(value, Op::Leaf)
    }

    /// Constant input; backward does not propagate into it.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId, AutodiffError> {
        self.push(value, Op::Const)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward target with respect to `id`.
    /// Zero tensor when the node is unreachable from the loss.
    pub fn grad(&self, id: NodeId) -> Tensor {
        let rec = &self.nodes[id.0];
        match &rec.grad {
            Some(g) => Tensor {
                shape: rec.value.shape.clone(),
                data: g.clone(),
            },
            None => Tensor::zeros(rec.value.shape.clone()),
        }
    }

    fn same_shape(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(), AutodiffError> {
        let (sa, sb) = (&self.nodes[a.0].value.shape, &self.nodes[b.0].value.shape);
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(())
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].value.shape.clone();
        self.push(Tensor { shape, data }, Op::Add(a, b))
    }

    /// Scalar node `s` times tensor node `x`.
    pub fn scale(&mut self, s: NodeId, x: NodeId) -> Result<NodeId, AutodiffError> {
        if !self.nodes[s.0].value.is_scalar() {
            return Err(AutodiffError::NotScalar {
                op: "scale",
                shape: self.nodes[s.0].value.shape.clone(),
            });
        }
        let sv = self.nodes[s.0].value.item();
        let data: Vec<f64> = self.nodes[x.0].value.data.iter().map(|v| sv * v).collect();
        let shape = self.nodes[x.0].value.shape.clone();
        self.push(Tensor { shape, data }, Op::Scale(s, x))
    }

    /// Fixed finite scalar times tensor node.
    pub fn scale_const(&mut self, c: f64, x: NodeId) -> Result<NodeId, AutodiffError> {
        if !c.is_finite() {
            return Err(AutodiffError::NonFinite { op: "scale_const" });
        }
        let data: Vec<f64> = self.nodes[x.0].value.data.iter().map(|v| c * v).collect();
        let shape = self.nodes[x.0].value.shape.clone();
        self.push(Tensor { shape, data }, Op::ScaleConst(c, x))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].value.shape.clone();
        self.push(Tensor { shape, data }, Op::Mul(a, b))
    }

    /// `[r, c]` matrix times `[c]` vector, yielding `[r]`.
    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId, AutodiffError> {
        let ms = self.nodes[m.0].value.shape.clone();
        let vs = self.nodes[v.0].value.shape.clone();
        if ms.len() != 2 || vs.len() != 1 || ms[1] != vs[0] {
            return Err(AutodiffError::NotMatVec { lhs: ms, rhs: vs });
        }
        let (rows, cols) = (ms[0], ms[1]);
        let md = &self.nodes[m.0].value.data;
        let vd = &self.nodes[v.0].value.data;
        let mut data = vec![0.0; rows];
        for i in 0..rows {
            let mut acc = 0.0;
            for j in 0..cols {
                acc += md[i * cols + j] * vd[j];
            }
            data[i] = acc;
        }
        self.push(
            Tensor {
                shape: vec![rows],
                data,
            },
            Op::MatVec(m, v),
        )
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let data: Vec<f64> = self.nodes[x.0].value.data.iter().map(|v| v.exp()).collect();
        let shape = self.nodes[x.0].value.shape.clone();
        self.push(Tensor { shape, data }, Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let data: Vec<f64> = self.nodes[x.0].value.data.iter().map(|v| v.ln()).collect();
        let shape = self.nodes[x.0].value.shape.clone();
        self.push(Tensor { shape, data }, Op::Log(x))
    }

    /// Rectifier; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let data: Vec<f64> = self.nodes[x.0]
            .value
            .data
            .iter()
            .map(|v| v.max(0.0))
            .collect();
        let shape = self.nodes[x.0].value.shape.clone();
        self.push(Tensor { shape, data }, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let data: Vec<f64> = self.nodes[x.0]
            .value
            .data
            .iter()
            .map(|v| v.tanh())
            .collect();
        let shape = self.nodes[x.0].value.shape.clone();
        self.push(Tensor { shape, data }, Op::Tanh(x))
    }

    /// Sum of all entries, as a rank-0 scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let s: f64 = self.nodes[x.0].value.data.iter().sum();
        self.push(
            Tensor {
                shape: vec![],
                data: vec![s],
            },
            Op::Sum(x),
        )
    }

    /// Arithmetic mean of all entries, as a rank-0 scalar.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let n = self.nodes[x.0].value.data.len() as f64;
        let s: f64 = self.nodes[x.0].value.data.iter().sum();
        self.push(
            Tensor {
                shape: vec![],
                data: vec![s / n],
            },
            Op::Mean(x),
        )
    }

    /// Maximum entry, as a rank-0 scalar. Gradient goes to the first argmax.
    pub fn max_reduce(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let m = self.nodes[x.0]
            .value
            .data
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        self.push(
            Tensor {
                shape: vec![],
                data: vec![m],
            },
            Op::MaxReduce(x),
        )
    }

    /// Reverse sweep from a scalar `loss`: afterwards every reachable
    /// parameter leaf's gradient holds d(loss)/d(leaf). Gradients from a
    /// previous backward call are cleared first.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), AutodiffError> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(AutodiffError::NotScalar {
                op: "backward",
                shape: self.nodes[loss.0].value.shape.clone(),
            });
        }
        for rec in &mut self.nodes {
            rec.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf | Op::Const => {}
                Op::Add(a, b) => {
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::Scale(s, x) => {
                    let sv = self.nodes[s.0].value.item();
                    let xd = self.nodes[x.0].value.data.clone();
                    let ds: f64 = g.iter().zip(&xd).map(|(gi, xi)| gi * xi).sum();
                    self.accumulate(s, &[ds]);
                    let dx: Vec<f64> = g.iter().map(|gi| sv * gi).collect();
                    self.accumulate(x, &dx);
                }
                Op::ScaleConst(c, x) => {
                    let dx: Vec<f64> = g.iter().map(|gi| c * gi).collect();
                    self.accumulate(x, &dx);
                }
                Op::Mul(a, b) => {
                    let ad = self.nodes[a.0].value.data.clone();
                    let bd = self.nodes[b.0].value.data.clone();
                    let da: Vec<f64> = g.iter().zip(&bd).map(|(gi, bi)| gi * bi).collect();
                    let db: Vec<f64> = g.iter().zip(&ad).map(|(gi, ai)| gi * ai).collect();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::MatVec(m, v) => {
                    let (rows, cols) = {
                        let s = &self.nodes[m.0].value.shape;
                        (s[0], s[1])
                    };
                    let md = self.nodes[m.0].value.data.clone();
                    let vd = self.nodes[v.0].value.data.clone();
                    let mut dm = vec![0.0; rows * cols];
                    let mut dv = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dm[r * cols + c] = g[r] * vd[c];
                            dv[c] += g[r] * md[r * cols + c];
                        }
                    }
                    self.accumulate(m, &dm);
                    self.accumulate(v, &dv);
                }
                Op::Exp(x) => {
                    let out = self.nodes[i].value.data.clone();
                    let dx: Vec<f64> = g.iter().zip(&out).map(|(gi, oi)| gi * oi).collect();
                    self.accumulate(x, &dx);
                }
                Op::Log(x) => {
                    let xd = self.nodes[x.0].value.data.clone();
                    let dx: Vec<f64> = g.iter().zip(&xd).map(|(gi, xi)| gi / xi).collect();
                    self.accumulate(x, &dx);
                }
                Op::Relu(x) => {
                    let xd = self.nodes[x.0].value.data.clone();
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&xd)
                        .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Tanh(x) => {
                    let out = self.nodes[i].value.data.clone();
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&out)
                        .map(|(gi, oi)| gi * (1.0 - oi * oi))
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Sum(x) => {
                    let n = self.nodes[x.0].value.data.len();
                    let dx = vec![g[0]; n];
                    self.accumulate(x, &dx);
                }
                Op::Mean(x) => {
                    let n = self.nodes[x.0].value.data.len();
                    let dx = vec![g[0] / n as f64; n];
                    self.accumulate(x, &dx);
                }
                Op::MaxReduce(x) => {
                    let xd = &self.nodes[x.0].value.data;
                    let mut best = 0usize;
                    for (j, v) in xd.iter().enumerate() {
                        if *v > xd[best] {
                            best = j;
                        }
                    }
                    let mut dx = vec![0.0; xd.len()];
                    dx[best] = g[0];
                    self.accumulate(x, &dx);
                }
            }
            // restore for callers that read grads of interior nodes
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contrib: &[f64]) {
        if matches!(self.nodes[id.0].op, Op::Const) {
            return;
        }
        let rec = &mut self.nodes[id.0];
        match &mut rec.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => rec.grad = Some(contrib.to_vec()),
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Const => "const",
        Op::Add(..) => "add",
        Op::Scale(..) => "scale",
        Op::ScaleConst(..) => "scale_const",
        Op::Mul(..) => "mul",
        Op::MatVec(..) => "matvec",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Relu(..) => "relu",
        Op::Tanh(..) => "tanh",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::MaxReduce(..) => "max_reduce",
    }
}

/// Outcome of comparing analytic gradients against central finite differences.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Worst relative error across all checked parameters.
    pub max_rel_error: f64,
    /// Relative error per parameter, in point order.
    pub per_param: Vec<f64>,
}

/// Checks the backward gradient of a scalar-valued function at one point.
///
/// `build` receives a fresh graph and the point as a leaf, and must return the
/// scalar output node. Analytic gradients are compared against
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` with relative error
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(mut build: F, point: &Tensor, eps: f64) -> Result<GradReport, AutodiffError>
where
    F: FnMut(&mut Graph, NodeId) -> Result<NodeId, AutodiffError>,
{
    grad_check_many(
        |g, ids| {
            debug_assert_eq!(ids.len(), 1);
            build(g, ids[0])
        },
        std::slice::from_ref(point),
        eps,
    )
}

/// [`grad_check`] over several leaf tensors at once; errors are concatenated
/// in point order.
pub fn grad_check_many<F>(
    mut build: F,
    points: &[Tensor],
    eps: f64,
) -> Result<GradReport, AutodiffError>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId, AutodiffError>,
{
    if !(eps > 0.0) {
        return Err(AutodiffError::GradCheck(format!(
            "eps must be positive, got {eps}"
        )));
    }

    let eval = |build: &mut F, pts: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = pts
            .iter()
            .map(|p| g.leaf(p.clone()))
            .collect::<Result<_, _>>()?;
        let out = build(&mut g, &ids)?;
        if !g.value(out).is_scalar() {
            return Err(AutodiffError::NotScalar {
                op: "grad_check",
                shape: g.value(out).shape().to_vec(),
            });
        }
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(AutodiffError::GradCheck("non-finite evaluation".into()));
        }
        Ok(v)
    };

    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = points
        .iter()
        .map(|p| g.leaf(p.clone()))
        .collect::<Result<_, _>>()?;
    let out = build(&mut g, &ids)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|id| g.grad(*id).data().to_vec()).collect();

    let mut per_param = Vec::new();
    let mut pts: Vec<Tensor> = points.to_vec();
    for (k, point) in points.iter().enumerate() {
        for i in 0..point.numel() {
            let orig = point.data[i];
            pts[k].data[i] = orig + eps;
            let fp = eval(&mut build, &pts)?;
            pts[k].data[i] = orig - eps;
            let fm = eval(&mut build, &pts)?;
            pts[k].data[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[k][i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            per_param.push((a - numeric).abs() / denom);
        }
    }
    let max_rel_error = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradReport {
        max_rel_error,
        per_param,
    })
}
