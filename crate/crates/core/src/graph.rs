//! Sparse graphs, symmetric normalization and latent-structure construction.

use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BackwardRule, Tape, Value};
use crate::error::{Error, Result};
use crate::Matrix;

/// Compressed sparse row graph.
///
/// Column indices are strictly increasing within a row. Structural graphs
/// (`values == None`) are undirected, symmetric and free of self-loops;
/// weighted graphs produced by [`sym_normalize`] carry their self-loops.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrGraph {
    n: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Option<Vec<f64>>,
}

impl CsrGraph {
    /// Graph with `n` nodes and no edges.
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            row_offsets: vec![0; n + 1],
            col_indices: Vec::new(),
            values: None,
        }
    }

    /// Undirected graph from an edge list. Both directions are stored,
    /// duplicates collapse and self-loops are dropped.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::param(format!("edge ({i}, {j}) out of range for {n} nodes")));
            }
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
        Ok(Self::from_adjacency(adj))
    }

    fn from_adjacency(mut adj: Vec<Vec<usize>>) -> Self {
        let n = adj.len();
        let mut row_offsets = Vec::with_capacity(n + 1);
        let mut col_indices = Vec::new();
        row_offsets.push(0);
        for row in &mut adj {
            row.sort_unstable();
            row.dedup();
            col_indices.extend_from_slice(row);
            row_offsets.push(col_indices.len());
        }
        Self {
            n,
            row_offsets,
            col_indices,
            values: None,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    /// Number of stored directed entries.
    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    /// Number of undirected edges of a structural graph.
    pub fn num_edges(&self) -> usize {
        self.nnz() / 2
    }

    /// Mean number of neighbors per node.
    pub fn average_degree(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.nnz() as f64 / self.n as f64
        }
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[i]..self.row_offsets[i + 1]]
    }

    /// Weights of row `i`, or `None` for structural graphs.
    pub fn row_weights(&self, i: usize) -> Option<&[f64]> {
        self.values
            .as_ref()
            .map(|v| &v[self.row_offsets[i]..self.row_offsets[i + 1]])
    }

    pub fn is_weighted(&self) -> bool {
        self.values.is_some()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row_offsets[i + 1] - self.row_offsets[i]
    }

    /// Undirected edges `(i, j)` with `i < j`, sorted.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        (0..self.n)
            .flat_map(|i| self.neighbors(i).iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect()
    }

    /// Iterates `(i, j, w)` over stored entries in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            let start = self.row_offsets[i];
            self.neighbors(i).iter().enumerate().map(move |(k, &j)| {
                let w = self.values.as_ref().map_or(1.0, |v| v[start + k]);
                (i, j, w)
            })
        })
    }

    pub fn is_symmetric(&self) -> bool {
        self.entries().all(|(i, j, w)| {
            let pos = self.neighbors(j).binary_search(&i);
            match (pos, self.row_weights(j)) {
                (Ok(k), Some(ws)) => ws[k] == w,
                (Ok(_), None) => true,
                (Err(_), _) => false,
            }
        })
    }

    pub fn has_self_loops(&self) -> bool {
        (0..self.n).any(|i| self.has_edge(i, i))
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Array2::zeros((self.n, self.n));
        for (i, j, w) in self.entries() {
            m[[i, j]] = w;
        }
        m
    }

    /// Debug dump: one `i<TAB>j<TAB>w` line per stored entry, sorted by `(i, j)`.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for (i, j, w) in self.entries() {
            let _ = writeln!(out, "{i}\t{j}\t{w}");
        }
        out
    }
}

/// One latent point per node, rows in node order.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    points: Matrix,
}

impl PointSet {
    pub fn new(points: Matrix) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &Matrix {
        &self.points
    }
}

/// Rule used to connect latent points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstructionRule {
    Knn,
    Cknn,
}

impl std::str::FromStr for ConstructionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "knn" => Ok(Self::Knn),
            "cknn" => Ok(Self::Cknn),
            other => Err(Error::param(format!("unknown construction rule `{other}`"))),
        }
    }
}

impl std::fmt::Display for ConstructionRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Knn => "knn",
            Self::Cknn => "cknn",
        })
    }
}

/// Euclidean distance matrix. Each pair is computed once and mirrored, so the
/// result is exactly symmetric.
pub fn pairwise_distances(p: &PointSet) -> Matrix {
    let n = p.len();
    let pts = p.points().as_standard_layout();
    let dim = pts.ncols();
    let flat = pts.as_slice().expect("standard layout");
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        let a = &flat[i * dim..(i + 1) * dim];
        for j in i + 1..n {
            let b = &flat[j * dim..(j + 1) * dim];
            let mut acc = 0.0;
            for (x, y) in a.iter().zip(b) {
                let t = x - y;
                acc += t * t;
            }
            let v = acc.sqrt();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    Array2::from_shape_vec((n, n), d).expect("sized")
}

/// Distance from every point to its k-th nearest other point.
fn kth_radii(dist: &Matrix, k: usize) -> Vec<f64> {
    let n = dist.nrows();
    let mut buf = Vec::with_capacity(n.saturating_sub(1));
    (0..n)
        .map(|i| {
            buf.clear();
            let row = &dist.as_slice().expect("standard layout")[i * n..(i + 1) * n];
            buf.extend_from_slice(&row[..i]);
            buf.extend_from_slice(&row[i + 1..]);
            let (_, kth, _) = buf.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect()
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k + 1 > n {
        return Err(Error::param(format!("k must lie in 1..={} for {n} points, got {k}", n.saturating_sub(1))));
    }
    Ok(())
}

fn build_from_rule(dist: &Matrix, keep: impl Fn(usize, usize, f64) -> bool) -> CsrGraph {
    let n = dist.nrows();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    let flat = dist.as_slice().expect("standard layout");
    for i in 0..n {
        for j in i + 1..n {
            if keep(i, j, flat[i * n + j]) {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    CsrGraph::from_adjacency(adj)
}

/// Symmetric kNN graph: `i ~ j` when `j` lies within `i`'s k-th neighbor
/// radius or `i` lies within `j`'s.
pub fn knn_build(p: &PointSet, k: usize) -> Result<CsrGraph> {
    check_k(p.len(), k)?;
    let dist = pairwise_distances(p);
    let r = kth_radii(&dist, k);
    Ok(build_from_rule(&dist, |i, j, d| d <= r[i] || d <= r[j]))
}

/// Continuous kNN graph: `i ~ j` when `d(i, j) < √(r_i · r_j)` with `r` the
/// k-th neighbor radius. The inequality is strict, so coincident points are
/// never linked and a mutual nearest pair at `k = 1` is not linked either.
pub fn cknn_build(p: &PointSet, k: usize) -> Result<CsrGraph> {
    check_k(p.len(), k)?;
    let dist = pairwise_distances(p);
    let r = kth_radii(&dist, k);
    Ok(build_from_rule(&dist, |i, j, d| d < (r[i] * r[j]).sqrt()))
}

pub fn build_latent_graph(p: &PointSet, k: usize, rule: ConstructionRule) -> Result<CsrGraph> {
    match rule {
        ConstructionRule::Knn => knn_build(p, k),
        ConstructionRule::Cknn => cknn_build(p, k),
    }
}

/// `D̆^{-1/2} (A + I) D̆^{-1/2}` with `D̆` the degree matrix of `A + I`.
pub fn sym_normalize(g: &CsrGraph) -> CsrGraph {
    let n = g.num_nodes();
    let deg: Vec<f64> = (0..n).map(|i| (g.degree(i) + 1) as f64).collect();
    let weight = |i: usize, j: usize| 1.0 / (deg[i] * deg[j]).sqrt();
    let mut row_offsets = Vec::with_capacity(n + 1);
    let mut col_indices = Vec::with_capacity(g.nnz() + n);
    let mut values = Vec::with_capacity(g.nnz() + n);
    row_offsets.push(0);
    for i in 0..n {
        let mut self_done = false;
        for &j in g.neighbors(i) {
            if !self_done && j > i {
                col_indices.push(i);
                values.push(weight(i, i));
                self_done = true;
            }
            col_indices.push(j);
            values.push(weight(i, j));
        }
        if !self_done {
            col_indices.push(i);
            values.push(weight(i, i));
        }
        row_offsets.push(col_indices.len());
    }
    CsrGraph {
        n,
        row_offsets,
        col_indices,
        values: Some(values),
    }
}

fn csr_product(g: &CsrGraph, x: &Matrix) -> Matrix {
    let mut out = Array2::zeros(x.dim());
    for (i, j, w) in g.entries() {
        let src = x.row(j);
        let mut dst = out.row_mut(i);
        dst.scaled_add(w, &src);
    }
    out
}

fn csr_transpose_product(g: &CsrGraph, y: &Matrix) -> Matrix {
    let mut out = Array2::zeros(y.dim());
    for (i, j, w) in g.entries() {
        let src = y.row(i);
        let mut dst = out.row_mut(j);
        dst.scaled_add(w, &src);
    }
    out
}

struct SpmmRule {
    graph: CsrGraph,
}

impl BackwardRule for SpmmRule {
    fn backward(&self, grad: &Matrix, _inputs: &[&Matrix], _output: &Matrix) -> Vec<Option<Matrix>> {
        vec![Some(csr_transpose_product(&self.graph, grad))]
    }
}

/// Sparse-dense product `g · x`, differentiable in `x`. Graph weights are
/// constants.
pub fn spmm(tape: &mut Tape, g: &CsrGraph, x: Value) -> Result<Value> {
    let (r, c) = tape.shape(x);
    if r != g.num_nodes() {
        return Err(Error::Shape {
            op: "spmm",
            left: (g.num_nodes(), g.num_nodes()),
            right: (r, c),
        });
    }
    let out = csr_product(g, tape.data(x));
    Ok(tape.custom(&[x], out, SpmmRule { graph: g.clone() }))
}

/// Plain (non-differentiable) sparse-dense product.
pub fn spmm_data(g: &CsrGraph, x: &Matrix) -> Matrix {
    csr_product(g, x)
}
