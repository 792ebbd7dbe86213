use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{dropout, dropout_rng, init_rng, uniform, ForwardPass, LayerSource, Mode, ModelInput, NodeClassifier};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graph::{spmm, sym_normalize};
use crate::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnConfig {
    /// Hidden widths; the output layer width is the class count.
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            dropout: 0.5,
        }
    }
}

/// Plain graph convolutional network: `Â·H·W + b` per layer with
/// `Â = D̆^{-1/2}(A + I)D̆^{-1/2}`, ReLU and dropout between layers.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnModel {
    pub config: GcnConfig,
    pub input_dim: usize,
    pub num_classes: usize,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Matrix>,
}

impl GcnModel {
    pub fn new(config: GcnConfig, input_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::param(format!("dropout {} outside [0, 1)", config.dropout)));
        }
        if input_dim == 0 || num_classes == 0 || config.hidden.contains(&0) {
            return Err(Error::param("layer widths must be positive"));
        }
        let mut rng = init_rng(seed);
        let mut dims = vec![input_dim];
        dims.extend(&config.hidden);
        dims.push(num_classes);
        let weights = dims
            .windows(2)
            .map(|d| uniform(d[0], d[1], 1.0 / (d[0] as f64).sqrt(), &mut rng))
            .collect();
        let biases = dims[1..].iter().map(|&d| Array2::zeros((1, d))).collect();
        Ok(Self {
            config,
            input_dim,
            num_classes,
            weights,
            biases,
        })
    }
}

impl NodeClassifier for GcnModel {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn parameters(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("gcn{}.W", l + 1), w));
            out.push((format!("gcn{}.b", l + 1), b));
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }

    fn forward(&self, tape: &mut Tape, input: &ModelInput, mode: Mode, mask_seed: u64) -> Result<ForwardPass> {
        if input.feature_dim() != self.input_dim {
            return Err(Error::Shape {
                op: "gcn_forward",
                left: (input.num_nodes(), input.feature_dim()),
                right: (self.input_dim, self.num_classes),
            });
        }
        let a_hat = sym_normalize(&input.graph);
        let mut params = Vec::new();
        let mut h = LayerSource::Features(&input.features);
        let last = self.weights.len() - 1;
        let mut out = None;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let wv = tape.param(w.clone());
            let bv = tape.param(b.clone());
            params.push(wv);
            params.push(bv);
            // Â(HW) equals (ÂH)W and is cheaper when d_in > d_out
            let hw = h.project(tape, wv)?;
            let mixed = spmm(tape, &a_hat, hw)?;
            let y = tape.add_row(mixed, bv)?;
            if l == last {
                out = Some(y);
            } else {
                let act = tape.relu(y);
                let act = match mode {
                    Mode::Train => dropout(tape, act, self.config.dropout, &mut dropout_rng(mask_seed, l))?,
                    Mode::Eval => act,
                };
                h = LayerSource::Hidden(act);
            }
        }
        Ok(ForwardPass {
            logits: out.expect("at least one layer"),
            params,
            layers: Vec::new(),
        })
    }
}
