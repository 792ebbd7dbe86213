//! Loss terms: classification, the Mahalanobis space regularizer, the
//! determinant-based diversity regularizer and their layer-weighted sum.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{logdet_gram, mahalanobis_rows, BackwardRule, SpdFactor, Tape, Value, LN_2PI};
use crate::datagen::Labels;
use crate::error::{Error, Result};
use crate::model::ChannelStats;
use crate::Matrix;

/// Ridge inside `log det(F̂ᵀF̂ + eps·I)`.
pub const DIVERSITY_EPS: f64 = 1e-8;

/// Likelihood vectors shorter than this are replaced by a basis vector.
pub const LIKELIHOOD_FLOOR: f64 = 1e-30;

fn check_channels(tape: &Tape, z_hat: &[Value], stats: &ChannelStats) -> Result<usize> {
    if z_hat.is_empty() || z_hat.len() != stats.channels() {
        return Err(Error::param(format!(
            "{} channel inputs for {} statistics",
            z_hat.len(),
            stats.channels()
        )));
    }
    let (n, d) = tape.shape(z_hat[0]);
    for &z in z_hat {
        if tape.shape(z) != (n, d) || d != stats.dim() {
            return Err(Error::Shape {
                op: "channel_inputs",
                left: tape.shape(z),
                right: (n, stats.dim()),
            });
        }
    }
    Ok(n)
}

/// Mean over nodes and channels of `(ẑ_{i,m} − μ_m)ᵀ Σ_m⁻¹ (ẑ_{i,m} − μ_m)`.
pub fn space_loss(tape: &mut Tape, z_hat: &[Value], stats: &ChannelStats) -> Result<Value> {
    check_channels(tape, z_hat, stats)?;
    let parts = z_hat
        .iter()
        .zip(&stats.components)
        .map(|(&z, g)| mahalanobis_rows(tape, z, g.mean(), g.factor()))
        .collect::<Result<Vec<_>>>()?;
    let all = tape.concat_cols(&parts)?;
    Ok(tape.mean(all))
}

/// Gram matrix of the L2-normalized rows of `exp(log_lik)` (M×M, one row
/// per channel, one column per component). Works in log space, so shifting
/// a row by a constant leaves the result unchanged.
pub fn likelihood_gram(log_lik: &Matrix) -> Matrix {
    let f = normalized_likelihoods(log_lik).0;
    f.dot(&f.t())
}

/// Returns the normalized rows, the unnormalized shifted weights, their
/// norms, and whether each row fell under the floor.
fn normalized_likelihoods(log_lik: &Matrix) -> (Matrix, Matrix, Array1<f64>, Vec<bool>) {
    let (m, e) = log_lik.dim();
    let mut f = Array2::zeros((m, e));
    let mut w = Array2::zeros((m, e));
    let mut norms = Array1::zeros(m);
    let mut guarded = vec![false; m];
    for r in 0..m {
        let row = log_lik.row(r);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sq = 0.0;
        for c in 0..e {
            let v = if max.is_finite() { (row[c] - max).exp() } else { 0.0 };
            w[[r, c]] = v;
            sq += v * v;
        }
        let norm = sq.sqrt();
        norms[r] = norm;
        if !max.is_finite() || max + norm.ln() < LIKELIHOOD_FLOOR.ln() {
            guarded[r] = true;
            f[[r, r % e]] = 1.0;
        } else {
            for c in 0..e {
                f[[r, c]] = w[[r, c]] / norm;
            }
        }
    }
    (f, w, norms, guarded)
}

/// Per-node Gram matrix `F̂ᵀF̂` built from tape primitives: one Gaussian
/// density per (channel, component) pair, row normalization and a product.
///
/// `z_node` holds one 1×Δ value per channel. Densities are evaluated
/// directly, so this form is meant for small instances and cross-checks; the
/// training path uses [`diversity_loss`].
pub fn diversity_gram(tape: &mut Tape, z_node: &[Value], stats: &ChannelStats, floor: f64) -> Result<Value> {
    let n = check_channels(tape, z_node, stats)?;
    if n != 1 {
        return Err(Error::param("diversity_gram takes one node per call"));
    }
    let m = z_node.len();
    let mut rows = Vec::with_capacity(m);
    for (r, &z) in z_node.iter().enumerate() {
        let dens = stats
            .components
            .iter()
            .map(|g| crate::autodiff::gaussian_pdf(tape, z, g.mean(), g.factor()))
            .collect::<Result<Vec<_>>>()?;
        let lik = tape.concat_cols(&dens)?;
        let norm = tape.data(lik).iter().map(|v| v * v).sum::<f64>().sqrt();
        let row = if norm < floor {
            let mut basis = Array2::zeros((1, m));
            basis[[0, r]] = 1.0;
            tape.constant(basis)
        } else {
            tape.l2_normalize_rows(lik, floor)
        };
        rows.push(row);
    }
    // columns of F̂ are the normalized likelihood vectors
    let cols: Vec<Value> = rows.iter().map(|&r| tape.transpose(r)).collect();
    let f_hat = tape.concat_cols(&cols)?;
    let f_t = tape.transpose(f_hat);
    tape.matmul(f_t, f_hat)
}

/// `−log det(G + eps·I)` for one node's Gram matrix, composed from
/// [`diversity_gram`] and [`logdet_gram`].
pub fn diversity_node_loss(tape: &mut Tape, z_node: &[Value], stats: &ChannelStats, eps: f64) -> Result<Value> {
    let g = diversity_gram(tape, z_node, stats, LIKELIHOOD_FLOOR)?;
    let ld = logdet_gram(tape, g, eps)?;
    Ok(tape.scale(ld, -1.0))
}

struct DiversityRule {
    /// Per node, per channel: the gradient of the node loss w.r.t. ẑ.
    grads: Vec<Matrix>,
}

impl BackwardRule for DiversityRule {
    fn backward(&self, grad: &Matrix, _inputs: &[&Matrix], _output: &Matrix) -> Vec<Option<Matrix>> {
        let g = grad[[0, 0]];
        self.grads.iter().map(|m| Some(m * g)).collect()
    }
}

/// Mean over nodes of `−log det(F̂ᵀF̂ + eps·I)`, fused into one tape
/// operation. Likelihoods are handled in log space.
pub fn diversity_loss(tape: &mut Tape, z_hat: &[Value], stats: &ChannelStats, eps: f64) -> Result<Value> {
    let n = check_channels(tape, z_hat, stats)?;
    let m = z_hat.len();
    let d = stats.dim();
    let comps = &stats.components;
    let log_norm: Vec<f64> = comps
        .iter()
        .map(|g| -0.5 * d as f64 * LN_2PI - 0.5 * g.factor().log_det())
        .collect();
    let data: Vec<&Matrix> = z_hat.iter().map(|&z| tape.data(z)).collect();
    let mut grads: Vec<Matrix> = (0..m).map(|_| Array2::zeros((n, d))).collect();
    let mut total = 0.0;
    let mut log_lik = Array2::zeros((m, m));
    // solved[r][c] = Σ_c⁻¹(ẑ_{i,r} − μ_c)
    let mut solved = vec![vec![Array1::zeros(d); m]; m];
    for i in 0..n {
        for r in 0..m {
            let z = data[r].row(i);
            for (c, g) in comps.iter().enumerate() {
                let diff = &z - g.mean();
                let s = g.factor().inverse().dot(&diff);
                log_lik[[r, c]] = log_norm[c] - 0.5 * diff.dot(&s);
                solved[r][c] = s;
            }
        }
        let (f, w, norms, guarded) = normalized_likelihoods(&log_lik);
        let mut k = f.dot(&f.t());
        k.diag_mut().mapv_inplace(|v| v + eps);
        let k = (&k + &k.t()) * 0.5;
        let factor = SpdFactor::new(k).map_err(|e| Error::Numerical(format!("diversity gram at node {i}: {e}")))?;
        total -= factor.log_det();
        // d(−log det K)/dF = −2 K⁻¹ F
        let gf = factor.inverse().dot(&f) * -2.0;
        for r in 0..m {
            if guarded[r] {
                continue;
            }
            let fr = f.row(r);
            let gr = gf.row(r);
            let proj = fr.dot(&gr);
            let mut gz = grads[r].row_mut(i);
            for c in 0..m {
                // through F = w/‖w‖, then w = exp(log_lik − max)
                let gw = (gr[c] - fr[c] * proj) / norms[r];
                let glog = gw * w[[r, c]];
                if glog != 0.0 {
                    gz.scaled_add(-glog / n as f64, &solved[r][c]);
                }
            }
        }
    }
    let out = Array2::from_elem((1, 1), total / n as f64);
    Ok(tape.custom(z_hat, out, DiversityRule { grads }))
}

struct ClsRule {
    grad: Matrix,
}

impl BackwardRule for ClsRule {
    fn backward(&self, grad: &Matrix, _inputs: &[&Matrix], _output: &Matrix) -> Vec<Option<Matrix>> {
        vec![Some(&self.grad * grad[[0, 0]])]
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean classification loss over masked nodes: softmax cross-entropy for
/// single-label targets, summed sigmoid cross-entropy for multi-label ones.
pub fn cls_loss(tape: &mut Tape, logits: Value, labels: &Labels, mask: &[bool]) -> Result<Value> {
    let x = tape.data(logits);
    let (n, c) = x.dim();
    if labels.len() != n || mask.len() != n {
        return Err(Error::Shape {
            op: "cls_loss",
            left: (n, c),
            right: (labels.len(), mask.len()),
        });
    }
    let count = mask.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(Error::param("classification loss over an empty mask"));
    }
    let inv = 1.0 / count as f64;
    let mut grad = Array2::zeros((n, c));
    let mut total = 0.0;
    match labels {
        Labels::Single(y) => {
            for i in (0..n).filter(|&i| mask[i]) {
                if y[i] >= c {
                    return Err(Error::param(format!("label {} out of range for {c} logits", y[i])));
                }
                let row = x.row(i);
                let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let lse = max + sum.ln();
                total += lse - row[y[i]];
                for k in 0..c {
                    grad[[i, k]] = ((row[k] - lse).exp() - (k == y[i]) as u8 as f64) * inv;
                }
            }
        }
        Labels::Multi(y) => {
            if y.ncols() != c {
                return Err(Error::Shape {
                    op: "cls_loss",
                    left: (n, c),
                    right: y.dim(),
                });
            }
            for i in (0..n).filter(|&i| mask[i]) {
                for k in 0..c {
                    let v = x[[i, k]];
                    let t = y[[i, k]] as f64;
                    total += softplus(v) - t * v;
                    grad[[i, k]] = (sigmoid(v) - t) * inv;
                }
            }
        }
    }
    let out = Array2::from_elem((1, 1), total * inv);
    Ok(tape.custom(&[logits], out, ClsRule { grad }))
}

/// `λ^(l) = 10^(l−L)` for `l` in `1..=L`.
pub fn layer_weight(l: usize, layers: usize) -> Result<f64> {
    if l == 0 || l > layers {
        return Err(Error::param(format!("layer index {l} outside 1..={layers}")));
    }
    Ok(10f64.powi(l as i32 - layers as i32))
}

/// Plain copies of the loss parts, for logging.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub cls: f64,
    pub space: Vec<f64>,
    pub div: Vec<f64>,
}

/// Differentiable loss parts and their recorded values.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: Value,
    pub cls: Value,
    pub space: Vec<Value>,
    pub div: Vec<Value>,
    pub values: LossValues,
}

/// `cls + Σ_l λ^(l)(λ_space·space_l + λ_div·div_l)`.
pub fn total_loss(
    tape: &mut Tape,
    cls: Value,
    space: &[Value],
    div: &[Value],
    lambda_space: f64,
    lambda_div: f64,
) -> Result<LossBreakdown> {
    if space.len() != div.len() {
        return Err(Error::param(format!(
            "{} space terms but {} diversity terms",
            space.len(),
            div.len()
        )));
    }
    let layers = space.len();
    let mut total = cls;
    for l in 0..layers {
        let w = layer_weight(l + 1, layers)?;
        let s = tape.scale(space[l], w * lambda_space);
        let d = tape.scale(div[l], w * lambda_div);
        let both = tape.add(s, d)?;
        total = tape.add(total, both)?;
    }
    let values = LossValues {
        total: tape.scalar(total),
        cls: tape.scalar(cls),
        space: space.iter().map(|&v| tape.scalar(v)).collect(),
        div: div.iter().map(|&v| tape.scalar(v)).collect(),
    };
    Ok(LossBreakdown {
        total,
        cls,
        space: space.to_vec(),
        div: div.to_vec(),
        values,
    })
}
