use serde::{Deserialize, Serialize};

use crate::datagen::{LabelMode, Labels};
use crate::error::{Error, Result};
use crate::Matrix;

/// Scores over one node mask.
///
/// For multi-label targets `accuracy` is the exact-match ratio; predictions
/// are `logit > 0`, i.e. `sigmoid(logit) > 0.5`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub count: usize,
}

impl Metrics {
    /// Accuracy for single-label data, micro-F1 for multi-label data.
    pub fn primary(&self, mode: LabelMode) -> f64 {
        match mode {
            LabelMode::Single => self.accuracy,
            LabelMode::Multi => self.micro_f1,
        }
    }
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Accuracy, micro-F1 and macro-F1 of `logits` against `labels` on `mask`.
/// Classes without support contribute an F1 of 0 to the macro average.
pub fn metrics_from_logits(logits: &Matrix, labels: &Labels, mask: &[bool]) -> Result<Metrics> {
    let (n, c) = logits.dim();
    if labels.len() != n || mask.len() != n {
        return Err(Error::Shape {
            op: "evaluate",
            left: (n, c),
            right: (labels.len(), mask.len()),
        });
    }
    let nodes: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if nodes.is_empty() {
        return Err(Error::param("evaluation over an empty mask"));
    }
    let (mut tp, mut fp, mut fn_) = (vec![0usize; c], vec![0usize; c], vec![0usize; c]);
    let mut exact = 0usize;
    match labels {
        Labels::Single(y) => {
            for &i in &nodes {
                let p = argmax(logits.row(i));
                if p == y[i] {
                    tp[p] += 1;
                    exact += 1;
                } else {
                    fp[p] += 1;
                    if y[i] < c {
                        fn_[y[i]] += 1;
                    }
                }
            }
        }
        Labels::Multi(y) => {
            for &i in &nodes {
                let mut all = true;
                for k in 0..c {
                    let pred = logits[[i, k]] > 0.0;
                    let truth = y[[i, k]] == 1;
                    match (pred, truth) {
                        (true, true) => tp[k] += 1,
                        (true, false) => fp[k] += 1,
                        (false, true) => fn_[k] += 1,
                        (false, false) => {}
                    }
                    all &= pred == truth;
                }
                exact += all as usize;
            }
        }
    }
    let sum = |v: &[usize]| v.iter().sum::<usize>();
    let micro = f1(sum(&tp), sum(&fp), sum(&fn_));
    let macro_f1 = (0..c).map(|k| f1(tp[k], fp[k], fn_[k])).sum::<f64>() / c.max(1) as f64;
    Ok(Metrics {
        accuracy: exact as f64 / nodes.len() as f64,
        micro_f1: micro,
        macro_f1,
        count: nodes.len(),
    })
}
