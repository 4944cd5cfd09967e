//! Cell-based search spaces: candidate operations, compound edges, genotype
//! enumeration, and argmax discretization.
//!
//! A cell has one input node and `num_intermediate_nodes` intermediate nodes;
//! every intermediate node receives an edge from every predecessor. Each edge
//! carries the full candidate operation set, so a discrete architecture
//! (genotype) is one operation index per edge.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error("search space spec invalid: {0}")]
    InvalidSpec(String),
    #[error("enumeration cap exceeded: {count} genotypes > cap {cap}")]
    EnumerationCap { count: u128, cap: usize },
    #[error("arch params invalid: {0}")]
    InvalidParams(String),
    #[error("genotype invalid: {0}")]
    InvalidGenotype(String),
}

/// One candidate operation on an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperationKind {
    /// Zero map: output is the zero tensor.
    None,
    /// Identity: output equals input.
    Skip,
    /// Affine map `W x + b` with `W` square in the feature dimension.
    Linear,
    /// Affine map followed by tanh.
    GatedLinear,
}

impl OperationKind {
    /// True for operations that carry trainable weights.
    pub fn has_weights(self) -> bool {
        matches!(self, OperationKind::Linear | OperationKind::GatedLinear)
    }

    pub fn name(self) -> &'static str {
        match self {
            OperationKind::None => "none",
            OperationKind::Skip => "skip",
            OperationKind::Linear => "linear",
            OperationKind::GatedLinear => "gated-linear",
        }
    }
}

/// Static description of a search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpaceSpec {
    pub num_intermediate_nodes: usize,
    pub feature_dim: usize,
    pub op_set: Vec<OperationKind>,
    pub include_none: bool,
}

impl SearchSpaceSpec {
    pub fn new(
        num_intermediate_nodes: usize,
        feature_dim: usize,
        op_set: Vec<OperationKind>,
        include_none: bool,
    ) -> Result<Self, SpaceError> {
        let spec = SearchSpaceSpec {
            num_intermediate_nodes,
            feature_dim,
            op_set,
            include_none,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The default operation cast: none (unless excluded), skip, linear,
    /// gated-linear.
    pub fn with_default_ops(
        num_intermediate_nodes: usize,
        feature_dim: usize,
        include_none: bool,
    ) -> Result<Self, SpaceError> {
        let mut ops = Vec::new();
        if include_none {
            ops.push(OperationKind::None);
        }
        ops.extend([
            OperationKind::Skip,
            OperationKind::Linear,
            OperationKind::GatedLinear,
        ]);
        SearchSpaceSpec::new(num_intermediate_nodes, feature_dim, ops, include_none)
    }

    pub fn validate(&self) -> Result<(), SpaceError> {
        if self.num_intermediate_nodes == 0 {
            return Err(SpaceError::InvalidSpec(
                "need at least one intermediate node".into(),
            ));
        }
        if self.feature_dim == 0 {
            return Err(SpaceError::InvalidSpec("feature_dim must be positive".into()));
        }
        if self.op_set.len() < 2 {
            return Err(SpaceError::InvalidSpec(format!(
                "op_set needs at least 2 operations, got {}",
                self.op_set.len()
            )));
        }
        if !self.include_none && self.op_set.contains(&OperationKind::None) {
            return Err(SpaceError::InvalidSpec(
                "op_set contains none but include_none is false".into(),
            ));
        }
        Ok(())
    }

    /// Number of candidate operations per edge.
    pub fn num_ops(&self) -> usize {
        self.op_set.len()
    }
}

/// A concrete space: the spec plus its edge list.
///
/// Nodes are numbered with 0 as the cell input and `1..=num_intermediate_nodes`
/// as intermediate nodes. Edges are ordered lexicographically by
/// `(to, from)`, which also topologically orders them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub spec: SearchSpaceSpec,
    pub edges: Vec<(usize, usize)>,
}

impl SearchSpace {
    /// Edge count `E`.
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Candidate operation count `M`.
    pub fn num_ops(&self) -> usize {
        self.spec.num_ops()
    }

    /// Index of the cell output node (the last intermediate node).
    pub fn output_node(&self) -> usize {
        self.spec.num_intermediate_nodes
    }

    /// Edges ending at `node`, as `(edge index, from node)` pairs.
    pub fn incoming(&self, node: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges
            .iter()
            .enumerate()
            .filter(move |(_, (_, to))| *to == node)
            .map(|(e, (from, _))| (e, *from))
    }
}

/// Builds the space from a validated spec: every intermediate node `j` gets an
/// edge from every node `i < j`.
pub fn build_space(spec: &SearchSpaceSpec) -> Result<SearchSpace, SpaceError> {
    spec.validate()?;
    let mut edges = Vec::new();
    for to in 1..=spec.num_intermediate_nodes {
        for from in 0..to {
            edges.push((from, to));
        }
    }
    Ok(SearchSpace {
        spec: spec.clone(),
        edges,
    })
}

/// The architecture parameter matrix `A`: one row of `M` reals per edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    num_edges: usize,
    num_ops: usize,
    data: Vec<f64>,
}

impl ArchParams {
    /// All-zero parameters: a uniform distribution over operations.
    pub fn zeros(num_edges: usize, num_ops: usize) -> Self {
        ArchParams {
            num_edges,
            num_ops,
            data: vec![0.0; num_edges * num_ops],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, SpaceError> {
        let num_edges = rows.len();
        let num_ops = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(num_edges * num_ops);
        for row in rows {
            if row.len() != num_ops {
                return Err(SpaceError::InvalidParams("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        let p = ArchParams {
            num_edges,
            num_ops,
            data,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SpaceError> {
        if !self.data.iter().all(|x| x.is_finite()) {
            return Err(SpaceError::InvalidParams("non-finite entry".into()));
        }
        Ok(())
    }

    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    pub fn num_ops(&self) -> usize {
        self.num_ops
    }

    pub fn row(&self, edge: usize) -> &[f64] {
        &self.data[edge * self.num_ops..(edge + 1) * self.num_ops]
    }

    pub fn row_mut(&mut self, edge: usize) -> &mut [f64] {
        &mut self.data[edge * self.num_ops..(edge + 1) * self.num_ops]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// A discrete architecture: one chosen operation index per edge.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Genotype {
    pub choices: Vec<usize>,
}

impl Genotype {
    pub fn new(choices: Vec<usize>, space: &SearchSpace) -> Result<Self, SpaceError> {
        if choices.len() != space.num_edges() {
            return Err(SpaceError::InvalidGenotype(format!(
                "expected {} choices, got {}",
                space.num_edges(),
                choices.len()
            )));
        }
        if let Some(&bad) = choices.iter().find(|&&c| c >= space.num_ops()) {
            return Err(SpaceError::InvalidGenotype(format!(
                "operation index {bad} out of range for {} ops",
                space.num_ops()
            )));
        }
        Ok(Genotype { choices })
    }

    /// Compact text key: dash-joined op indices, e.g. `1-0-3`.
    pub fn key(&self) -> String {
        self.choices
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join("-")
    }

    pub fn from_key(key: &str, space: &SearchSpace) -> Result<Self, SpaceError> {
        let choices: Vec<usize> = key
            .split('-')
            .map(|part| {
                part.parse::<usize>()
                    .map_err(|_| SpaceError::InvalidGenotype(format!("bad key segment {part:?}")))
            })
            .collect::<Result<_, _>>()?;
        Genotype::new(choices, space)
    }
}

/// Default cap on exhaustive enumeration.
pub const DEFAULT_ENUMERATION_CAP: usize = 4096;

/// All `M^E` genotypes in lexicographic order of their choice sequences.
pub fn enumerate_genotypes(
    space: &SearchSpace,
    cap: usize,
) -> Result<Vec<Genotype>, SpaceError> {
    let e = space.num_edges();
    let m = space.num_ops();
    let count = (m as u128).checked_pow(e as u32).unwrap_or(u128::MAX);
    if count > cap as u128 {
        return Err(SpaceError::EnumerationCap { count, cap });
    }
    let total = count as usize;
    let mut out = Vec::with_capacity(total);
    let mut choices = vec![0usize; e];
    for _ in 0..total {
        out.push(Genotype {
            choices: choices.clone(),
        });
        // increment least-significant-last so output is lexicographic
        for pos in (0..e).rev() {
            choices[pos] += 1;
            if choices[pos] < m {
                break;
            }
            choices[pos] = 0;
        }
    }
    Ok(out)
}

/// Argmax discretization: per edge, the operation with the largest parameter.
/// Ties break to the lowest index, and the result is invariant to any positive
/// rescaling of the rows.
pub fn discretize(params: &ArchParams, space: &SearchSpace) -> Genotype {
    debug_assert_eq!(params.num_edges(), space.num_edges());
    debug_assert_eq!(params.num_ops(), space.num_ops());
    let choices = (0..params.num_edges())
        .map(|e| argmax(params.row(e)))
        .collect();
    Genotype { choices }
}

/// First index of the maximum entry.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn space_with(nodes: usize) -> SearchSpace {
        let spec = SearchSpaceSpec::with_default_ops(nodes, 4, true).unwrap();
        build_space(&spec).unwrap()
    }

    #[test]
    fn edge_counts_are_triangular() {
        assert_eq!(space_with(1).num_edges(), 1);
        assert_eq!(space_with(2).num_edges(), 3);
        assert_eq!(space_with(3).num_edges(), 6);
    }

    #[test]
    fn edge_order_is_lexicographic_by_to_then_from() {
        let s = space_with(3);
        assert_eq!(
            s.edges,
            vec![(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)]
        );
    }

    #[test]
    fn build_space_is_deterministic() {
        let spec = SearchSpaceSpec::with_default_ops(3, 8, true).unwrap();
        assert_eq!(build_space(&spec).unwrap(), build_space(&spec).unwrap());
    }

    #[test]
    fn zero_intermediate_nodes_rejected() {
        assert!(SearchSpaceSpec::with_default_ops(0, 4, true).is_err());
    }

    #[test]
    fn none_in_op_set_requires_include_none() {
        let err = SearchSpaceSpec::new(
            1,
            4,
            vec![OperationKind::None, OperationKind::Skip],
            false,
        );
        assert!(err.is_err());
    }

    #[test]
    fn enumerate_counts() {
        let s2 = space_with(2); // E=3, M=4
        let g = enumerate_genotypes(&s2, DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(g.len(), 64);

        let s3 = space_with(3); // E=6, M=4
        let g = enumerate_genotypes(&s3, DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(g.len(), 4096);
        let uniq: std::collections::HashSet<_> = g.iter().map(|x| x.key()).collect();
        assert_eq!(uniq.len(), 4096);
    }

    #[test]
    fn enumerate_single_edge_two_ops() {
        let spec = SearchSpaceSpec::new(
            1,
            4,
            vec![OperationKind::Skip, OperationKind::Linear],
            true,
        )
        .unwrap();
        let s = build_space(&spec).unwrap();
        let g = enumerate_genotypes(&s, 16).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].choices, vec![0]);
        assert_eq!(g[1].choices, vec![1]);
    }

    #[test]
    fn enumerate_is_lexicographic() {
        let s = space_with(2);
        let g = enumerate_genotypes(&s, 64).unwrap();
        for w in g.windows(2) {
            assert!(w[0].choices < w[1].choices);
        }
    }

    #[test]
    fn enumeration_cap_enforced() {
        let s = space_with(3);
        match enumerate_genotypes(&s, 4095) {
            Err(SpaceError::EnumerationCap { count, cap }) => {
                assert_eq!(count, 4096);
                assert_eq!(cap, 4095);
            }
            other => panic!("expected cap error, got {other:?}"),
        }
    }

    #[test]
    fn discretize_examples() {
        let s = space_with(1);
        let mk = |row: Vec<f64>| ArchParams::from_rows(&[row]).unwrap();
        assert_eq!(discretize(&mk(vec![0.3, 2.0, -1.0, 0.0]), &s).choices, vec![1]);
        // tie breaks to the lowest index
        let spec2 =
            SearchSpaceSpec::new(1, 4, vec![OperationKind::Skip, OperationKind::Linear], true)
                .unwrap();
        let s2 = build_space(&spec2).unwrap();
        assert_eq!(discretize(&mk2(vec![0.7, 0.7]), &s2).choices, vec![0]);

        fn mk2(row: Vec<f64>) -> ArchParams {
            ArchParams::from_rows(&[row]).unwrap()
        }
    }

    #[test]
    fn genotype_key_round_trip() {
        let s = space_with(2);
        let g = Genotype::new(vec![1, 0, 3], &s).unwrap();
        assert_eq!(g.key(), "1-0-3");
        assert_eq!(Genotype::from_key("1-0-3", &s).unwrap(), g);
        assert!(Genotype::from_key("1-0", &s).is_err());
        assert!(Genotype::from_key("1-0-9", &s).is_err());
    }

    proptest! {
        /// Discretization is invariant to positive temperature rescaling.
        #[test]
        fn discretize_scale_invariant(
            rows in proptest::collection::vec(
                proptest::collection::vec(-5.0f64..5.0, 4), 3),
            t in 1e-3f64..10.0,
        ) {
            let s = space_with(2);
            let a = ArchParams::from_rows(&rows).unwrap();
            let scaled_rows: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| r.iter().map(|x| x / t).collect())
                .collect();
            let b = ArchParams::from_rows(&scaled_rows).unwrap();
            prop_assert_eq!(discretize(&a, &s), discretize(&b, &s));
        }
    }
}
