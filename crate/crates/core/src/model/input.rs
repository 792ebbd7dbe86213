use std::rc::Rc;

use ndarray::Array2;

use crate::autodiff::{BackwardRule, Tape, Value};
use crate::datagen::GraphBundle;
use crate::error::{Error, Result};
use crate::graph::CsrGraph;
use crate::Matrix;

/// Row-compressed constant matrix used for bag-of-words style inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows {
    rows: usize,
    cols: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseRows {
    pub fn from_dense(x: &Matrix) -> Self {
        let (rows, cols) = x.dim();
        let mut offsets = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for row in x.rows() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    indices.push(j);
                    values.push(v);
                }
            }
            offsets.push(indices.len());
        }
        Self {
            rows,
            cols,
            offsets,
            indices,
            values,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn density(&self) -> f64 {
        self.values.len() as f64 / (self.rows * self.cols).max(1) as f64
    }

    fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[i]..self.offsets[i + 1];
        self.indices[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    /// `self · w`.
    pub fn matmul(&self, w: &Matrix) -> Matrix {
        let mut out = Array2::zeros((self.rows, w.ncols()));
        for i in 0..self.rows {
            let mut dst = out.row_mut(i);
            for (k, v) in self.row(i) {
                dst.scaled_add(v, &w.row(k));
            }
        }
        out
    }

    /// `selfᵀ · g`.
    pub fn t_matmul(&self, g: &Matrix) -> Matrix {
        let mut out = Array2::zeros((self.cols, g.ncols()));
        for i in 0..self.rows {
            let src = g.row(i);
            for (k, v) in self.row(i) {
                out.row_mut(k).scaled_add(v, &src);
            }
        }
        out
    }
}

struct SparseMatmulRule {
    x: Rc<SparseRows>,
}

impl BackwardRule for SparseMatmulRule {
    fn backward(&self, grad: &Matrix, _inputs: &[&Matrix], _output: &Matrix) -> Vec<Option<Matrix>> {
        vec![Some(self.x.t_matmul(grad))]
    }
}

/// `x · w` with a constant sparse `x`, differentiable in `w`.
pub fn sparse_matmul(tape: &mut Tape, x: &Rc<SparseRows>, w: Value) -> Result<Value> {
    let ws = tape.shape(w);
    if x.cols != ws.0 {
        return Err(Error::Shape {
            op: "sparse_matmul",
            left: x.shape(),
            right: ws,
        });
    }
    let out = x.matmul(tape.data(w));
    Ok(tape.custom(&[w], out, SparseMatmulRule { x: Rc::clone(x) }))
}

/// Node features in whichever storage makes the first projection cheapest.
#[derive(Clone, Debug)]
pub enum Features {
    Dense(Rc<Matrix>),
    Sparse(Rc<SparseRows>),
}

impl Features {
    /// Picks sparse storage below 10% density.
    pub fn new(x: &Matrix) -> Self {
        let sparse = SparseRows::from_dense(x);
        if sparse.density() < 0.1 {
            Features::Sparse(Rc::new(sparse))
        } else {
            Features::Dense(Rc::new(x.clone()))
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Features::Dense(m) => m.dim(),
            Features::Sparse(s) => s.shape(),
        }
    }

    /// `x · w` on the tape.
    pub fn project(&self, tape: &mut Tape, w: Value) -> Result<Value> {
        match self {
            Features::Dense(m) => {
                let x = tape.constant(Matrix::clone(m));
                tape.matmul(x, w)
            }
            Features::Sparse(s) => sparse_matmul(tape, s, w),
        }
    }
}

/// Graph and features shared by every forward pass over one dataset.
#[derive(Clone, Debug)]
pub struct ModelInput {
    pub graph: Rc<CsrGraph>,
    pub features: Features,
}

impl ModelInput {
    pub fn new(graph: CsrGraph, features: &Matrix) -> Result<Self> {
        if graph.num_nodes() != features.nrows() {
            return Err(Error::Shape {
                op: "model_input",
                left: (graph.num_nodes(), graph.num_nodes()),
                right: features.dim(),
            });
        }
        Ok(Self {
            graph: Rc::new(graph),
            features: Features::new(features),
        })
    }

    pub fn from_bundle(b: &GraphBundle) -> Result<Self> {
        Self::new(b.graph.clone(), &b.features)
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape().1
    }
}
