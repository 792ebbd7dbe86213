//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every operation appends a node to a [`Tape`]; a [`Value`] is just an index
//! into it. Because nodes are only ever appended, creation order is already a
//! topological order and [`Tape::backward`] walks the tape once in reverse.
//!
//! Parameters live outside the tape. A training step registers them with
//! [`Tape::param`], runs the forward pass, calls [`Tape::backward`] and reads
//! the accumulated gradients back with [`Tape::grad`].
//!
//! Operations that are awkward to express as a chain of primitives (sparse
//! products, routing, fused losses) plug in through [`BackwardRule`].

mod gaussian;
mod spd;

pub use gaussian::{gaussian_pdf, gaussian_pdf_rows, logdet_gram, mahalanobis, mahalanobis_rows, LN_2PI};
pub use spd::{cholesky, SpdFactor};

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};
use crate::Matrix;

/// Default clamp used by [`Tape::l2_normalize_rows`].
pub const NORMALIZE_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Value(usize);

impl Value {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// Receives the gradient of the output, the data of every input (in the order
/// they were registered) and the output data. Returns one optional gradient
/// per input, shaped like that input.
pub trait BackwardRule {
    fn backward(&self, grad: &Matrix, inputs: &[&Matrix], output: &Matrix) -> Vec<Option<Matrix>>;
}

enum Op {
    Leaf,
    MatMul(Value, Value),
    Add(Value, Value),
    AddRow(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Scale(Value, f64),
    Relu(Value),
    Exp(Value),
    Log(Value),
    Sum(Value),
    Mean(Value),
    NormalizeRows(Value, f64),
    SoftmaxRows(Value),
    ConcatCols(Vec<Value>),
    SliceRows(Value, usize),
    SliceCols(Value, usize),
    Transpose(Value),
    Mask(Value, Matrix),
    Custom(Vec<Value>, Box<dyn BackwardRule>),
}

struct Node {
    data: Matrix,
    grad: Option<Matrix>,
    requires_grad: bool,
    op: Op,
}

/// Expression graph recorded during a forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape(m: &Matrix) -> (usize, usize) {
    m.dim()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Matrix, requires_grad: bool, op: Op) -> Value {
        self.nodes.push(Node {
            data,
            grad: None,
            requires_grad,
            op,
        });
        Value(self.nodes.len() - 1)
    }

    fn needs(&self, inputs: &[Value]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, data: Matrix) -> Value {
        self.push(data, true, Op::Leaf)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, data: Matrix) -> Value {
        self.push(data, false, Op::Leaf)
    }

    pub fn data(&self, v: Value) -> &Matrix {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Value) -> (usize, usize) {
        self.nodes[v.0].data.dim()
    }

    pub fn requires_grad(&self, v: Value) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar content of a 1×1 value.
    pub fn scalar(&self, v: Value) -> f64 {
        self.nodes[v.0].data[[0, 0]]
    }

    /// Accumulated gradient, zeros if nothing has reached `v` yet.
    pub fn grad(&self, v: Value) -> Matrix {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Array2::zeros(node.data.dim()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Registers an operation whose backward pass is supplied by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Value],
        output: Matrix,
        rule: impl BackwardRule + 'static,
    ) -> Value {
        let rg = self.needs(inputs);
        self.push(output, rg, Op::Custom(inputs.to_vec(), Box::new(rule)))
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (da, db) = (self.data(a), self.data(b));
        if da.ncols() != db.nrows() {
            return Err(Error::Shape {
                op: "matmul",
                left: shape(da),
                right: shape(db),
            });
        }
        let out = da.dot(db);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, rg, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Value, b: Value) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape("add", a, b)?;
        let out = self.data(a) + self.data(b);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    /// Adds a `1×c` row to every row of `a` (bias broadcast).
    pub fn add_row(&mut self, a: Value, row: Value) -> Result<Value> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(Error::Shape {
                op: "add_row",
                left: sa,
                right: sr,
            });
        }
        let out = self.data(a) + self.data(row);
        let rg = self.needs(&[a, row]);
        Ok(self.push(out, rg, Op::AddRow(a, row)))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape("sub", a, b)?;
        let out = self.data(a) - self.data(b);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, rg, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a) * self.data(b);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Value, factor: f64) -> Value {
        let out = self.data(a) * factor;
        let rg = self.needs(&[a]);
        self.push(out, rg, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, x: Value) -> Value {
        let out = self.data(x).mapv(|v| v.max(0.0));
        let rg = self.needs(&[x]);
        self.push(out, rg, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Value) -> Value {
        let out = self.data(x).mapv(f64::exp);
        let rg = self.needs(&[x]);
        self.push(out, rg, Op::Exp(x))
    }

    pub fn log(&mut self, x: Value) -> Value {
        let out = self.data(x).mapv(f64::ln);
        let rg = self.needs(&[x]);
        self.push(out, rg, Op::Log(x))
    }

    pub fn sum(&mut self, x: Value) -> Value {
        let out = Array2::from_elem((1, 1), self.data(x).sum());
        let rg = self.needs(&[x]);
        self.push(out, rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Value) -> Value {
        let d = self.data(x);
        let n = d.len().max(1) as f64;
        let out = Array2::from_elem((1, 1), d.sum() / n);
        let rg = self.needs(&[x]);
        self.push(out, rg, Op::Mean(x))
    }

    /// Divides each row by `max(‖row‖₂, eps)`; all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Value, eps: f64) -> Value {
        let mut out = self.data(x).clone();
        for mut row in out.rows_mut() {
            let norm = row.dot(&row).sqrt().max(eps);
            row /= norm;
        }
        let rg = self.needs(&[x]);
        self.push(out, rg, Op::NormalizeRows(x, eps))
    }

    /// Row softmax, shifted by the row maximum.
    pub fn softmax_rows(&mut self, x: Value) -> Value {
        let mut out = self.data(x).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - max).exp());
            let total = row.sum();
            row /= total;
        }
        let rg = self.needs(&[x]);
        self.push(out, rg, Op::SoftmaxRows(x))
    }

    pub fn concat_cols(&mut self, parts: &[Value]) -> Result<Value> {
        let Some(first) = parts.first() else {
            return Err(Error::param("concat_cols needs at least one input"));
        };
        let rows = self.shape(*first).0;
        for p in parts {
            if self.shape(*p).0 != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.shape(*first),
                    right: self.shape(*p),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.data(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        let rg = self.needs(parts);
        Ok(self.push(out, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&mut self, x: Value, start: usize, end: usize) -> Result<Value> {
        let (r, c) = self.shape(x);
        if start > end || end > r {
            return Err(Error::Shape {
                op: "slice_rows",
                left: (r, c),
                right: (start, end),
            });
        }
        let out = self.data(x).slice(s![start..end, ..]).to_owned();
        let rg = self.needs(&[x]);
        Ok(self.push(out, rg, Op::SliceRows(x, start)))
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Value, start: usize, end: usize) -> Result<Value> {
        let (r, c) = self.shape(x);
        if start > end || end > c {
            return Err(Error::Shape {
                op: "slice_cols",
                left: (r, c),
                right: (start, end),
            });
        }
        let out = self.data(x).slice(s![.., start..end]).to_owned();
        let rg = self.needs(&[x]);
        Ok(self.push(out, rg, Op::SliceCols(x, start)))
    }

    pub fn transpose(&mut self, x: Value) -> Value {
        let out = self.data(x).t().to_owned();
        let rg = self.needs(&[x]);
        self.push(out, rg, Op::Transpose(x))
    }

    /// Elementwise product with a fixed mask (dropout with a pre-drawn,
    /// already rescaled mask).
    pub fn apply_mask(&mut self, x: Value, mask: Matrix) -> Result<Value> {
        if self.shape(x) != mask.dim() {
            return Err(Error::Shape {
                op: "apply_mask",
                left: self.shape(x),
                right: mask.dim(),
            });
        }
        let out = self.data(x) * &mask;
        let rg = self.needs(&[x]);
        Ok(self.push(out, rg, Op::Mask(x, mask)))
    }

    /// Reverse pass from a scalar. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        let s = self.shape(loss);
        if s != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                left: s,
                right: (1, 1),
            });
        }
        let mut pending: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            for (parent, pg) in self.local_grads(i, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut pending[parent.0] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => *acc += &g,
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Matrix) -> Vec<(Value, Matrix)> {
        let node = &self.nodes[i];
        let d = |v: &Value| &self.nodes[v.0].data;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if self.nodes[a.0].requires_grad {
                    out.push((*a, g.dot(&d(b).t())));
                }
                if self.nodes[b.0].requires_grad {
                    out.push((*b, d(a).t().dot(g)));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(a, row) => vec![(*a, g.clone()), (*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)))],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, -g)],
            Op::Mul(a, b) => vec![(*a, g * d(b)), (*b, g * d(a))],
            Op::Scale(a, f) => vec![(*a, g * *f)],
            Op::Relu(x) => {
                let mut gx = g.clone();
                ndarray::Zip::from(&mut gx)
                    .and(d(x))
                    .for_each(|gv, &xv| {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                vec![(*x, gx)]
            }
            Op::Exp(x) => vec![(*x, g * &node.data)],
            Op::Log(x) => vec![(*x, g / d(x))],
            Op::Sum(x) => vec![(*x, Array2::from_elem(d(x).dim(), g[[0, 0]]))],
            Op::Mean(x) => {
                let n = d(x).len().max(1) as f64;
                vec![(*x, Array2::from_elem(d(x).dim(), g[[0, 0]] / n))]
            }
            Op::NormalizeRows(x, eps) => {
                let xd = d(x);
                let mut gx = Array2::zeros(xd.dim());
                for ((xr, yr), (gr, mut out)) in xd
                    .rows()
                    .into_iter()
                    .zip(node.data.rows())
                    .zip(g.rows().into_iter().zip(gx.rows_mut()))
                {
                    let norm = xr.dot(&xr).sqrt();
                    if norm > *eps {
                        let proj = yr.dot(&gr);
                        out.assign(&((&gr - &(&yr * proj)) / norm));
                    } else {
                        out.assign(&(&gr / *eps));
                    }
                }
                vec![(*x, gx)]
            }
            Op::SoftmaxRows(x) => {
                let y = &node.data;
                let mut gx = y * g;
                for (mut row, yr) in gx.rows_mut().into_iter().zip(y.rows()) {
                    let dot = row.sum();
                    row.zip_mut_with(&yr, |v, &p| *v -= p * dot);
                }
                vec![(*x, gx)]
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                parts
                    .iter()
                    .map(|p| {
                        let w = d(p).ncols();
                        let piece = g.slice(s![.., start..start + w]).to_owned();
                        start += w;
                        (*p, piece)
                    })
                    .collect()
            }
            Op::SliceRows(x, start) => {
                let mut gx = Array2::zeros(d(x).dim());
                gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                vec![(*x, gx)]
            }
            Op::SliceCols(x, start) => {
                let mut gx = Array2::zeros(d(x).dim());
                gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                vec![(*x, gx)]
            }
            Op::Transpose(x) => vec![(*x, g.t().to_owned())],
            Op::Mask(x, mask) => vec![(*x, g * mask)],
            Op::Custom(inputs, rule) => {
                let datas: Vec<&Matrix> = inputs.iter().map(d).collect();
                rule.backward(g, &datas, &node.data)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(gi, v)| gi.map(|gi| (*v, gi)))
                    .collect()
            }
        }
    }
}

pub mod gradcheck {
    //! Central finite differences, used as the independent oracle for every
    //! backward rule.
    use super::*;

    /// Numerical gradient of `f` at `x` with step `h`.
    pub fn finite_diff(x: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
        let mut grad = Array2::zeros(x.dim());
        let mut probe = x.clone();
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let orig = probe[[r, c]];
            probe[[r, c]] = orig + h;
            let up = f(&probe);
            probe[[r, c]] = orig - h;
            let down = f(&probe);
            probe[[r, c]] = orig;
            grad[[r, c]] = (up - down) / (2.0 * h);
        }
        grad
    }

    /// Worst relative error between reverse-mode and finite-difference
    /// gradients of the scalar built by `build`, over every input.
    ///
    /// # Panics
    ///
    /// If `build` does not return a scalar.
    pub fn check_grads(
        inputs: &[Matrix],
        build: impl Fn(&mut Tape, &[Value]) -> Value,
    ) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Value> = inputs.iter().map(|m| tape.param(m.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.backward(loss).expect("build must return a scalar");
        let mut worst: f64 = 0.0;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = tape.grad(vars[k]);
            let numeric = finite_diff(input, 1e-5, |probe| {
                let mut t = Tape::new();
                let vs: Vec<Value> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, m)| t.param(if j == k { probe.clone() } else { m.clone() }))
                    .collect();
                let out = build(&mut t, &vs);
                t.scalar(out)
            });
            // coordinates with negligible gradient are excluded
            for (a, n) in analytic.iter().zip(numeric.iter()) {
                if a.abs().max(n.abs()) > 1e-8 {
                    worst = worst.max((a - n).abs() / a.abs().max(n.abs()));
                }
            }
        }
        worst
    }

    /// Entries uniform in [-1, 1), reproducible from `seed`.
    pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::*;
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut t = Tape::new();
        let eye = t.constant(Array2::eye(2));
        let m = t.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let p = t.matmul(eye, m).unwrap();
        assert_eq!(t.data(p), t.data(m));
        let ones = t.constant(array![[1.0], [1.0]]);
        let q = t.matmul(m, ones).unwrap();
        assert_eq!(t.data(q), &array![[3.0], [7.0]]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Array2::zeros((2, 3)));
        let b = t.constant(Array2::zeros((2, 3)));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("(2, 3)"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let a = random_matrix(3, 4, seed);
            let b = random_matrix(4, 2, seed + 100);
            let err = check_grads(&[a, b], |t, v| {
                let p = t.matmul(v[0], v[1]).unwrap();
                t.sum(p)
            });
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let mut t = Tape::new();
        let x = t.param(array![[-1.0, 0.0, 2.0]]);
        let y = t.relu(x);
        assert_eq!(t.data(y), &array![[0.0, 0.0, 2.0]]);
        let l = t.sum(y);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x), array![[0.0, 0.0, 1.0]]);

        let mut t = Tape::new();
        let pos = t.constant(array![[0.5, 3.0]]);
        let y = t.relu(pos);
        assert_eq!(t.data(y), t.data(pos));
    }

    #[test]
    fn normalize_rows_cases() {
        let mut t = Tape::new();
        let x = t.constant(array![[3.0, 4.0], [0.0, 1.0], [0.0, 0.0]]);
        let y = t.l2_normalize_rows(x, NORMALIZE_EPS);
        let expect = array![[0.6, 0.8], [0.0, 1.0], [0.0, 0.0]];
        for (a, b) in t.data(y).iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_cases() {
        let mut t = Tape::new();
        let x = t.constant(array![[0.0, 0.0], [1000.0, 0.0]]);
        let y = t.softmax_rows(x);
        let d = t.data(y);
        assert_eq!(d[[0, 0]], 0.5);
        assert_eq!(d[[1, 0]], 1.0);
        assert!(d[[1, 1]] >= 0.0 && d[[1, 1]] < 1e-300);
    }

    #[test]
    fn backward_linear_disconnected_and_nonscalar() {
        let mut t = Tape::new();
        let x = t.param(random_matrix(2, 2, 1));
        let other = t.param(random_matrix(2, 2, 2));
        let l = t.sum(x);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x), Array2::<f64>::ones((2, 2)));
        assert_eq!(t.grad(other), Array2::<f64>::zeros((2, 2)));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tape::new();
        let x = t.param(array![[2.0]]);
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x), array![[8.0]]);
        t.zero_grad();
        assert_eq!(t.grad(x), array![[0.0]]);
    }

    #[test]
    fn constants_never_accumulate() {
        let mut t = Tape::new();
        let c = t.constant(array![[1.0, 2.0]]);
        let p = t.param(array![[3.0, 4.0]]);
        let y = t.mul(c, p).unwrap();
        let l = t.sum(y);
        t.backward(l).unwrap();
        assert!(!t.requires_grad(c));
        assert_eq!(t.grad(c), Array2::<f64>::zeros((1, 2)));
        assert_eq!(t.grad(p), array![[1.0, 2.0]]);
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        type Build = fn(&mut Tape, &[Value]) -> Value;
        let cases: Vec<(&str, Build)> = vec![
            ("add", |t, v| {
                let a = t.add(v[0], v[1]).unwrap();
                let a = t.mul(a, a).unwrap();
                t.sum(a)
            }),
            ("sub", |t, v| {
                let a = t.sub(v[0], v[1]).unwrap();
                let a = t.mul(a, v[0]).unwrap();
                t.mean(a)
            }),
            ("scale_exp", |t, v| {
                let a = t.scale(v[0], 0.7);
                let a = t.exp(a);
                t.sum(a)
            }),
            ("log", |t, v| {
                let a = t.mul(v[0], v[0]).unwrap();
                let one = t.constant(Array2::ones(t.data(a).dim()));
                let a = t.add(a, one).unwrap();
                let a = t.log(a);
                t.sum(a)
            }),
            ("relu", |t, v| {
                let a = t.relu(v[0]);
                let a = t.mul(a, v[1]).unwrap();
                t.sum(a)
            }),
            ("normalize", |t, v| {
                let a = t.l2_normalize_rows(v[0], NORMALIZE_EPS);
                let a = t.mul(a, v[1]).unwrap();
                t.sum(a)
            }),
            ("softmax", |t, v| {
                let a = t.softmax_rows(v[0]);
                let a = t.mul(a, v[1]).unwrap();
                t.sum(a)
            }),
            ("concat_slice", |t, v| {
                let a = t.concat_cols(&[v[0], v[1]]).unwrap();
                let b = t.slice_cols(a, 1, 5).unwrap();
                let c = t.slice_rows(b, 1, 3).unwrap();
                let c = t.mul(c, c).unwrap();
                t.sum(c)
            }),
            ("mask", |t, v| {
                let mask = Array2::from_shape_fn(t.data(v[0]).dim(), |(i, j)| ((i + j) % 2) as f64 * 2.0);
                let a = t.apply_mask(v[0], mask).unwrap();
                let a = t.mul(a, v[1]).unwrap();
                t.sum(a)
            }),
            ("transpose", |t, v| {
                let a = t.transpose(v[0]);
                let a = t.matmul(v[1], a).unwrap();
                let a = t.mul(a, a).unwrap();
                t.sum(a)
            }),
            ("add_row", |t, v| {
                let row = t.slice_rows(v[1], 0, 1).unwrap();
                let a = t.add_row(v[0], row).unwrap();
                let a = t.mul(a, a).unwrap();
                t.sum(a)
            }),
        ];
        for (name, build) in cases {
            for seed in 0..20 {
                let a = random_matrix(3, 4, seed);
                let b = random_matrix(3, 4, seed + 1000);
                let err = check_grads(&[a, b], build);
                assert!(err < 1e-4, "{name} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn composite_projection_chain_matches_finite_differences() {
        // normalize(relu(h·W + b)), the channel projection chain
        for seed in 0..20 {
            let h = random_matrix(5, 4, seed);
            let w = random_matrix(4, 3, seed + 7);
            let b = random_matrix(1, 3, seed + 13);
            let target = random_matrix(5, 3, seed + 17);
            let err = check_grads(&[h, w, b], |t, v| {
                let hw = t.matmul(v[0], v[1]).unwrap();
                let z = t.add_row(hw, v[2]).unwrap();
                let z = t.relu(z);
                let z = t.l2_normalize_rows(z, NORMALIZE_EPS);
                let tgt = t.constant(target.clone());
                let z = t.mul(z, tgt).unwrap();
                t.sum(z)
            });
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
                let mut t = Tape::new();
                let x = t.constant(Array2::from_shape_vec((3, 4), vals).unwrap());
                let y = t.softmax_rows(x);
                for row in t.data(y).rows() {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-12);
                }
            }

            #[test]
            fn normalized_rows_are_unit_or_zero(vals in proptest::collection::vec(-5.0f64..5.0, 12)) {
                let mut t = Tape::new();
                let x = t.constant(Array2::from_shape_vec((4, 3), vals).unwrap());
                let y = t.l2_normalize_rows(x, NORMALIZE_EPS);
                for row in t.data(y).rows() {
                    let n = row.dot(&row).sqrt();
                    prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-10);
                }
            }
        }
    }
}
