//! Communication graphs and doubly-stochastic mixing matrices.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{domain, DpgError, Result};

/// Residual tolerance for the doubly-stochastic checks.
pub const MIXING_TOL: f64 = 1e-12;
/// Largest network handled by the dense spectral routines.
pub const MAX_AGENTS: usize = 1024;

/// Undirected graph without self-loops. Edges are stored as `(min, max)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommGraph {
    num_agents: usize,
    edges: BTreeSet<(usize, usize)>,
    connected: bool,
}

impl CommGraph {
    pub fn new(num_agents: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if num_agents == 0 {
            return Err(domain("graph needs at least one agent"));
        }
        if num_agents > MAX_AGENTS {
            return Err(domain(format!("at most {MAX_AGENTS} agents supported")));
        }
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i >= num_agents || j >= num_agents {
                return Err(domain(format!("edge ({i}, {j}) out of range for {num_agents} agents")));
            }
            if i == j {
                return Err(domain(format!("self-loop at agent {i}")));
            }
            set.insert((i.min(j), i.max(j)));
        }
        let connected = is_connected(num_agents, &set);
        Ok(Self { num_agents, edges: set, connected })
    }

    pub fn ring(n: usize) -> Result<Self> {
        let edges: Vec<(usize, usize)> = if n < 2 { Vec::new() } else { (0..n).map(|i| (i, (i + 1) % n)).collect() };
        Self::new(n, edges)
    }

    pub fn complete(n: usize) -> Result<Self> {
        Self::new(n, (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))))
    }

    /// Agent 0 is the hub.
    pub fn star(n: usize) -> Result<Self> {
        Self::new(n, (1..n).map(|j| (0, j)))
    }

    pub fn path(n: usize) -> Result<Self> {
        Self::new(n, (1..n).map(|j| (j - 1, j)))
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    pub fn degree(&self, i: usize) -> usize {
        self.edges.iter().filter(|(a, b)| *a == i || *b == i).count()
    }

    pub fn is_connected(&self) -> bool {
        self.connected
    }
}

fn is_connected(n: usize, edges: &BTreeSet<(usize, usize)>) -> bool {
    let mut adj = vec![Vec::new(); n];
    for &(i, j) in edges {
        adj[i].push(j);
        adj[j].push(i);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Graph section of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub topology: Topology,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Ring,
    Complete,
    Star,
    Edges,
}

impl GraphSpec {
    pub fn build(&self) -> Result<CommGraph> {
        if self.topology != Topology::Edges && !self.edges.is_empty() {
            return Err(domain("`edges` is only allowed with topology \"edges\""));
        }
        match self.topology {
            Topology::Ring => CommGraph::ring(self.n),
            Topology::Complete => CommGraph::complete(self.n),
            Topology::Star => CommGraph::star(self.n),
            Topology::Edges => CommGraph::new(self.n, self.edges.iter().map(|e| (e[0], e[1]))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    w: DMatrix<f64>,
    sigma2: f64,
    sigma_n: f64,
}

impl MixingMatrix {
    /// `W = (I + M)/2` with Metropolis weights `M_ij = 1/(1 + max(deg_i, deg_j))`.
    pub fn lazy_metropolis(graph: &CommGraph) -> Result<Self> {
        if !graph.is_connected() {
            return Err(DpgError::Disconnected);
        }
        let n = graph.num_agents();
        let deg: Vec<usize> = (0..n).map(|i| graph.degree(i)).collect();
        let mut m = DMatrix::zeros(n, n);
        for (i, j) in graph.edges() {
            let w = 1.0 / (1 + deg[i].max(deg[j])) as f64;
            m[(i, j)] = w;
            m[(j, i)] = w;
        }
        for i in 0..n {
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| m[(i, j)]).sum();
            m[(i, i)] = 1.0 - off;
        }
        let w = (DMatrix::identity(n, n) + m) * 0.5;
        Self::from_matrix(w, Some(graph))
    }

    /// Validates a user-supplied matrix. Without a graph the sparsity
    /// pattern defines one, which must be connected.
    pub fn from_matrix(w: DMatrix<f64>, graph: Option<&CommGraph>) -> Result<Self> {
        let n = w.nrows();
        if n == 0 || w.ncols() != n {
            return Err(DpgError::InvalidMixing("matrix must be square and nonempty".into()));
        }
        if n > MAX_AGENTS {
            return Err(DpgError::InvalidMixing(format!("at most {MAX_AGENTS} agents supported")));
        }
        for i in 0..n {
            for j in 0..n {
                let x = w[(i, j)];
                if !x.is_finite() || x < 0.0 {
                    return Err(DpgError::InvalidMixing(format!("W[{i}][{j}] = {x}")));
                }
            }
            if w[(i, i)] <= 0.0 {
                return Err(DpgError::InvalidMixing(format!("W[{i}][{i}] must be positive")));
            }
            let row: f64 = w.row(i).sum();
            let col: f64 = w.column(i).sum();
            if (row - 1.0).abs() > MIXING_TOL || (col - 1.0).abs() > MIXING_TOL {
                return Err(DpgError::InvalidMixing(format!(
                    "row {i} sums to {row}, column {i} sums to {col}"
                )));
            }
        }
        let derived;
        let graph = match graph {
            Some(g) => {
                if g.num_agents() != n {
                    return Err(DpgError::InvalidMixing("matrix size differs from graph size".into()));
                }
                g
            }
            None => {
                let edges = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|&(i, j)| {
                    i != j && (w[(i, j)] > 0.0 || w[(j, i)] > 0.0)
                });
                derived = CommGraph::new(n, edges.collect::<Vec<_>>())?;
                &derived
            }
        };
        for i in 0..n {
            for j in 0..n {
                if i != j && (w[(i, j)] > 0.0) != graph.has_edge(i, j) {
                    return Err(DpgError::InvalidMixing(format!(
                        "W[{i}][{j}] = {} does not match the graph",
                        w[(i, j)]
                    )));
                }
            }
        }
        if !graph.is_connected() {
            return Err(DpgError::Disconnected);
        }
        let (sigma2, sigma_n) = singular_values(&w);
        Ok(Self { w, sigma2, sigma_n })
    }

    /// Row-major `n * n` entries.
    pub fn from_rows(n: usize, entries: &[f64], graph: Option<&CommGraph>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(DpgError::InvalidMixing(format!(
                "expected {} entries for a {n}x{n} matrix, got {}",
                n * n,
                entries.len()
            )));
        }
        Self::from_matrix(DMatrix::from_row_slice(n, n, entries), graph)
    }

    pub fn identity(n: usize) -> Self {
        let sigma = if n == 1 { 0.0 } else { 1.0 };
        Self { w: DMatrix::identity(n, n), sigma2: sigma, sigma_n: 1.0 }
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn num_agents(&self) -> usize {
        self.w.nrows()
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn sigma_n(&self) -> f64 {
        self.sigma_n
    }

    /// Largest absolute row or column sum deviation from 1.
    pub fn stochastic_residual(&self) -> f64 {
        let n = self.num_agents();
        (0..n)
            .map(|i| (self.w.row(i).sum() - 1.0).abs().max((self.w.column(i).sum() - 1.0).abs()))
            .fold(0.0, f64::max)
    }

    pub fn mix(&self, params: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        mix(params, self)
    }
}

/// Second-largest and smallest singular values. A single agent has no
/// second singular value; 0 is returned so that `1 - sigma2` is the full gap.
pub fn singular_values(w: &DMatrix<f64>) -> (f64, f64) {
    let n = w.nrows();
    let mut sv: Vec<f64> = if w == &w.transpose() {
        SymmetricEigen::new(w.clone()).eigenvalues.iter().map(|x| x.abs()).collect()
    } else {
        w.clone().svd(false, false).singular_values.iter().copied().collect()
    };
    sv.sort_by(|a, b| b.total_cmp(a));
    let sigma2 = if n > 1 { sv[1] } else { 0.0 };
    (sigma2, sv[n - 1])
}

/// `theta_i <- sum_j W_ij theta_j`.
pub fn mix(params: &[Vec<f64>], w: &MixingMatrix) -> Result<Vec<Vec<f64>>> {
    let n = w.num_agents();
    if params.len() != n {
        return Err(domain(format!("{} parameter vectors for {n} agents", params.len())));
    }
    let dim = params[0].len();
    if params.iter().any(|p| p.len() != dim) {
        return Err(domain("parameter vectors differ in length"));
    }
    let mut out = vec![vec![0.0; dim]; n];
    for (i, o) in out.iter_mut().enumerate() {
        for (j, p) in params.iter().enumerate() {
            let wij = w.w[(i, j)];
            if wij == 0.0 {
                continue;
            }
            for (x, y) in o.iter_mut().zip(p) {
                *x += wij * y;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_shapes() {
        let g = CommGraph::ring(3).unwrap();
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(CommGraph::ring(2).unwrap().edges().count(), 1);
        assert_eq!(CommGraph::ring(1).unwrap().edges().count(), 0);
        let g = CommGraph::ring(6).unwrap();
        assert!((0..6).all(|i| g.degree(i) == 2));
    }

    #[test]
    fn small_metropolis_weights() {
        let w = MixingMatrix::lazy_metropolis(&CommGraph::ring(1).unwrap()).unwrap();
        assert_eq!(w.w()[(0, 0)], 1.0);
        assert_eq!(w.sigma2(), 0.0);

        let w = MixingMatrix::lazy_metropolis(&CommGraph::path(2).unwrap()).unwrap();
        assert_eq!(w.w()[(0, 1)], 0.25);
        assert_eq!(w.w()[(0, 0)], 0.75);
        assert!((w.sigma2() - 0.5).abs() < 1e-15 && (w.sigma_n() - 0.5).abs() < 1e-15);

        let w = MixingMatrix::lazy_metropolis(&CommGraph::ring(4).unwrap()).unwrap();
        assert!((w.w()[(0, 1)] - 1.0 / 6.0).abs() < 1e-15);
        assert!((w.w()[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(w.w()[(0, 2)], 0.0);
    }

    #[test]
    fn singular_values_of_special_matrices() {
        let (s2, sn) = singular_values(&DMatrix::identity(3, 3));
        assert!((s2 - 1.0).abs() < 1e-15 && (sn - 1.0).abs() < 1e-15);
        let (s2, sn) = singular_values(&DMatrix::from_element(4, 4, 0.25));
        assert!(s2.abs() < 1e-15 && sn.abs() < 1e-15);
    }

    #[test]
    fn mix_two_agents() {
        let w = MixingMatrix::lazy_metropolis(&CommGraph::path(2).unwrap()).unwrap();
        let out = w.mix(&[vec![1.0], vec![0.0]]).unwrap();
        assert_eq!(out, vec![vec![0.75], vec![0.25]]);
        assert!(w.mix(&[vec![1.0], vec![0.0, 1.0]]).is_err());
        assert!(w.mix(&[vec![1.0]]).is_err());
    }

    #[test]
    fn rejects_invalid_inputs() {
        assert!(matches!(
            MixingMatrix::lazy_metropolis(&CommGraph::new(3, [(0, 1)]).unwrap()),
            Err(DpgError::Disconnected)
        ));
        assert!(CommGraph::new(2, [(1, 1)]).is_err());
        assert!(MixingMatrix::from_rows(2, &[0.5, 0.5, 0.6, 0.4], None).is_err());
        assert!(MixingMatrix::from_rows(2, &[1.0, 0.0, 0.0, 1.0], None).is_err());
        assert!(MixingMatrix::from_rows(2, &[0.0, 1.0, 1.0, 0.0], None).is_err());
        let ring = CommGraph::ring(3).unwrap();
        let third = 1.0 / 3.0;
        assert!(MixingMatrix::from_rows(3, &[third; 9], Some(&ring)).is_ok());
        let path = CommGraph::path(3).unwrap();
        assert!(MixingMatrix::from_rows(3, &[third; 9], Some(&path)).is_err());
    }

    #[test]
    fn graph_spec_parsing() {
        let spec: GraphSpec = serde_json::from_str(r#"{"topology":"edges","n":3,"edges":[[0,1],[1,2]]}"#).unwrap();
        assert_eq!(spec.build().unwrap(), CommGraph::path(3).unwrap());
        let spec: GraphSpec = serde_json::from_str(r#"{"topology":"ring","n":4}"#).unwrap();
        assert_eq!(spec.build().unwrap().edges().count(), 4);
        assert!(serde_json::from_str::<GraphSpec>(r#"{"topology":"torus","n":4}"#).is_err());
        assert!(serde_json::from_str::<GraphSpec>(r#"{"topology":"ring","n":4,"x":1}"#).is_err());
    }
}
