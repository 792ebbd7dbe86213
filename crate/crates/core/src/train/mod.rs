//! Full-batch training: Adam over the parameters, running channel statistics
//! refreshed once per epoch, best-validation checkpointing and early
//! stopping.

mod adam;
mod checkpoint;
mod metrics;
mod stats;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use metrics::{metrics_from_logits, Metrics};
pub use stats::{batch_moments, channel_blocks, ema_update_stats, reset_stats};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Value};
use crate::datagen::{GraphBundle, Split};
use crate::error::{Error, Result};
use crate::model::{AnyModel, ForwardPass, LgdModel, Mode, ModelInput, NodeClassifier};
use crate::objectives::{cls_loss, diversity_loss, space_loss, total_loss, LossValues, DIVERSITY_EPS};
use crate::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// EMA rate `U_r` for the channel statistics.
    pub update_rate: f64,
    pub lambda_space: f64,
    pub lambda_div: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            patience: 100,
            lr: 0.01,
            weight_decay: 5e-4,
            update_rate: 0.5,
            lambda_space: 0.3,
            lambda_div: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::param("epochs must be at least 1"));
        }
        if self.patience > self.epochs {
            return Err(Error::param(format!(
                "patience {} exceeds epochs {}",
                self.patience, self.epochs
            )));
        }
        if !(0.0..=1.0).contains(&self.update_rate) {
            return Err(Error::param(format!("update rate {} outside [0, 1]", self.update_rate)));
        }
        for (name, v) in [
            ("learning rate", self.lr),
            ("weight decay", self.weight_decay),
            ("lambda_space", self.lambda_space),
            ("lambda_div", self.lambda_div),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::param(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossValues,
    pub val_metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    EarlyStopped,
    Diverged { epoch: usize, reason: String },
}

/// Result of [`train_run`]. `model` holds the best-validation parameters.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: AnyModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub status: RunStatus,
}

/// Seed of the dropout masks drawn in `epoch`.
pub fn mask_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Concatenated post-aggregation units of every layer from an eval pass.
fn layer_units(tape: &Tape, f: &ForwardPass) -> Vec<Matrix> {
    f.layers.iter().map(|r| tape.data(r.z_breve).clone()).collect()
}

/// Eval-mode logits and per-layer post-aggregation units.
pub fn forward_eval(model: &AnyModel, input: &ModelInput) -> Result<(Matrix, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let f = model.forward(&mut tape, input, Mode::Eval, 0)?;
    Ok((tape.data(f.logits).clone(), layer_units(&tape, &f)))
}

fn update_stats(model: &mut LgdModel, units: &[Matrix], rate: Option<f64>) -> Result<()> {
    let channels = model.config.channels;
    for (stats, z) in model.stats.iter_mut().zip(units) {
        let blocks = channel_blocks(z, channels);
        match rate {
            Some(r) => ema_update_stats(stats, &blocks, r)?,
            None => reset_stats(stats, &blocks)?,
        }
    }
    Ok(())
}

/// Classification loss plus, for the disentangled model, the weighted
/// per-layer regularizers.
fn build_loss(
    tape: &mut Tape,
    model: &AnyModel,
    f: &ForwardPass,
    bundle: &GraphBundle,
    cfg: &TrainConfig,
) -> Result<(Value, LossValues)> {
    let cls = cls_loss(tape, f.logits, &bundle.labels, &bundle.masks.train)?;
    let (mut space, mut div) = (Vec::new(), Vec::new());
    if let AnyModel::Lgd(m) = model {
        for (rec, stats) in f.layers.iter().zip(&m.stats) {
            space.push(space_loss(tape, &rec.z_hat, stats)?);
            div.push(diversity_loss(tape, &rec.z_hat, stats, DIVERSITY_EPS)?);
        }
    }
    let b = total_loss(tape, cls, &space, &div, cfg.lambda_space, cfg.lambda_div)?;
    Ok((b.total, b.values))
}

/// Trains `model` on `bundle` and returns the best-validation snapshot.
///
/// A non-finite loss or gradient stops the run with
/// [`RunStatus::Diverged`]; the returned model is then the last snapshot that
/// improved the validation metric (or the initial model).
pub fn train_run(bundle: &GraphBundle, mut model: AnyModel, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    bundle.validate()?;
    if model.input_dim() != bundle.feature_dim() || model.num_classes() != bundle.num_classes {
        return Err(Error::Validation(format!(
            "model expects {} features and {} classes, bundle has {} and {}",
            model.input_dim(),
            model.num_classes(),
            bundle.feature_dim(),
            bundle.num_classes
        )));
    }
    if !bundle.masks.val.iter().any(|&b| b) {
        return Err(Error::Validation("validation mask is empty".into()));
    }
    let input = ModelInput::from_bundle(bundle)?;
    let mode = bundle.label_mode();
    if let AnyModel::Lgd(m) = &mut model {
        let (_, units) = forward_eval(&AnyModel::Lgd(m.clone()), &input)?;
        update_stats(m, &units, None)?;
    }
    let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
    let shapes: Vec<_> = model.parameters().into_iter().map(|(_, p)| p.dim()).collect();
    let mut adam = AdamState::new(AdamConfig::new(cfg.lr, cfg.weight_decay), shapes);

    let mut best = model.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut status = RunStatus::Completed;

    for epoch in 1..=cfg.epochs {
        let mut tape = Tape::new();
        let f = model.forward(&mut tape, &input, Mode::Train, mask_seed(cfg.seed, epoch))?;
        let (loss, losses) = build_loss(&mut tape, &model, &f, bundle, cfg)?;
        if !losses.total.is_finite() {
            status = RunStatus::Diverged {
                epoch,
                reason: format!("loss became {}", losses.total),
            };
            break;
        }
        tape.backward(loss)?;
        let grads: Vec<Matrix> = f.params.iter().map(|&p| tape.grad(p)).collect();
        drop(tape);
        match adam.step(model.parameters_mut(), &grads, &names) {
            Ok(()) => {}
            Err(Error::Numerical(reason)) => {
                status = RunStatus::Diverged { epoch, reason };
                break;
            }
            Err(e) => return Err(e),
        }

        let (logits, units) = forward_eval(&model, &input)?;
        if let AnyModel::Lgd(m) = &mut model {
            update_stats(m, &units, Some(cfg.update_rate))?;
        }
        let val = metrics_from_logits(&logits, &bundle.labels, &bundle.masks.val)?.primary(mode);
        history.push(EpochRecord {
            epoch,
            losses,
            val_metric: val,
        });
        if val > best_val {
            best_val = val;
            best_epoch = epoch;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                status = RunStatus::EarlyStopped;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
        best_val,
        status,
    })
}

/// Scores `model` on one split of `bundle`.
pub fn evaluate(model: &AnyModel, bundle: &GraphBundle, split: Split) -> Result<Metrics> {
    let input = ModelInput::from_bundle(bundle)?;
    evaluate_input(model, &input, bundle, split)
}

/// As [`evaluate`] with a prepared input.
pub fn evaluate_input(model: &AnyModel, input: &ModelInput, bundle: &GraphBundle, split: Split) -> Result<Metrics> {
    if model.input_dim() != bundle.feature_dim() || model.num_classes() != bundle.num_classes {
        return Err(Error::Validation(format!(
            "model expects {} features and {} classes, bundle has {} and {}",
            model.input_dim(),
            model.num_classes(),
            bundle.feature_dim(),
            bundle.num_classes
        )));
    }
    let (logits, _) = forward_eval(model, input)?;
    metrics_from_logits(&logits, &bundle.labels, &bundle.mask(split))
}

/// History as CSV: `epoch,loss_total,loss_cls,loss_space_l1..L,loss_div_l1..L,val_metric`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let layers = history.first().map_or(0, |r| r.losses.space.len());
    let mut out = String::from("epoch,loss_total,loss_cls");
    for l in 1..=layers {
        let _ = write!(out, ",loss_space_l{l}");
    }
    for l in 1..=layers {
        let _ = write!(out, ",loss_div_l{l}");
    }
    out.push_str(",val_metric\n");
    for r in history {
        let _ = write!(out, "{},{},{}", r.epoch, r.losses.total, r.losses.cls);
        for v in r.losses.space.iter().chain(&r.losses.div) {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{}", r.val_metric);
    }
    out
}

#[cfg(test)]
mod tests;
