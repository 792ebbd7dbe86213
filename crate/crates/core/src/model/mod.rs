//! The disentangled layer stack and a plain GCN baseline.
//!
//! Parameters live outside the tape as plain matrices. Every forward pass
//! registers them on a fresh [`Tape`] and returns the matching [`Value`]s in
//! the order of [`NodeClassifier::parameters`], so an optimizer can read the
//! gradients back positionally.

mod gcn;
mod input;
mod routing;

pub use gcn::{GcnConfig, GcnModel};
pub use input::{sparse_matmul, Features, ModelInput, SparseRows};
pub use routing::{neighborhood_routing, route, route_tempered, RoutingTrace};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{SpdFactor, Tape, Value, NORMALIZE_EPS};
use crate::error::{Error, Result};
use crate::graph::{build_latent_graph, spmm, sym_normalize, ConstructionRule, CsrGraph, PointSet};
use crate::Matrix;

/// Ridge added to every covariance before factoring.
pub const STATS_RIDGE: f64 = 1e-4;

/// Stream offset for parameter initialization; dropout uses streams `1..=L`.
const INIT_STREAM: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of channels `M`.
    pub channels: usize,
    /// Routing iterations `T`.
    pub iterations: usize,
    pub layers: usize,
    /// Layer width; every channel gets `d_out / M` units.
    pub d_out: usize,
    pub dropout: f64,
    pub rule: ConstructionRule,
    pub k: usize,
    /// Whether the latent-structure aggregation runs after routing.
    pub latent_agg: bool,
    /// Divides the routing softmax logits; 1 means unscaled.
    #[serde(default = "unit_temperature")]
    pub routing_temperature: f64,
}

fn unit_temperature() -> f64 {
    1.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            iterations: 7,
            layers: 2,
            d_out: 64,
            dropout: 0.5,
            rule: ConstructionRule::Cknn,
            k: 4,
            latent_agg: true,
            routing_temperature: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn channel_width(&self) -> usize {
        self.d_out / self.channels.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || !self.d_out.is_multiple_of(self.channels) {
            return Err(Error::param(format!(
                "channel count {} must divide d_out = {}",
                self.channels, self.d_out
            )));
        }
        if self.channel_width() < 2 {
            return Err(Error::param("each channel needs at least 2 units"));
        }
        if self.iterations == 0 {
            return Err(Error::param("routing iterations must be at least 1"));
        }
        if self.layers == 0 {
            return Err(Error::param("at least one layer is required"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::param(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.k == 0 {
            return Err(Error::param("k must be at least 1"));
        }
        if !(self.routing_temperature.is_finite() && self.routing_temperature > 0.0) {
            return Err(Error::param(format!(
                "routing temperature must be positive, got {}",
                self.routing_temperature
            )));
        }
        Ok(())
    }
}

/// One Gaussian component of a channel's latent distribution.
#[derive(Clone, Debug)]
pub struct Gaussian {
    mean: Array1<f64>,
    cov: Matrix,
    factor: SpdFactor,
}

impl Gaussian {
    /// Factors `cov + STATS_RIDGE·I`; `cov` is stored without the ridge.
    pub fn new(mean: Array1<f64>, cov: Matrix) -> Result<Self> {
        if cov.dim() != (mean.len(), mean.len()) {
            return Err(Error::Shape {
                op: "gaussian",
                left: cov.dim(),
                right: (mean.len(), mean.len()),
            });
        }
        let factor = SpdFactor::with_ridge(&cov, STATS_RIDGE)?;
        Ok(Self { mean, cov, factor })
    }

    /// Zero mean, identity covariance.
    pub fn standard(dim: usize) -> Self {
        Self::new(Array1::zeros(dim), Array2::eye(dim)).expect("identity is SPD")
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &Matrix {
        &self.cov
    }

    pub fn factor(&self) -> &SpdFactor {
        &self.factor
    }
}

/// Per-channel Gaussian components of one layer.
#[derive(Clone, Debug)]
pub struct ChannelStats {
    pub components: Vec<Gaussian>,
}

impl ChannelStats {
    pub fn standard(channels: usize, dim: usize) -> Self {
        Self {
            components: (0..channels).map(|_| Gaussian::standard(dim)).collect(),
        }
    }

    pub fn channels(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |g| g.mean.len())
    }
}

/// Per-channel projection weights of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// `d_in × Δ` per channel.
    pub weights: Vec<Matrix>,
    /// `1 × Δ` per channel.
    pub biases: Vec<Matrix>,
}

impl LayerParams {
    /// Uniform fan-in scaled weights, zero biases.
    pub fn init(d_in: usize, channels: usize, width: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self {
            weights: (0..channels).map(|_| uniform(d_in, width, bound, rng)).collect(),
            biases: (0..channels).map(|_| Array2::zeros((1, width))).collect(),
        }
    }
}

pub(crate) fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Matrix {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..=bound))
}

pub(crate) fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    rng
}

/// Inverted dropout with one mask per call. Identity when `p == 0`.
pub fn dropout(tape: &mut Tape, x: Value, p: f64, rng: &mut impl Rng) -> Result<Value> {
    if p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let mask = Array2::from_shape_simple_fn(tape.shape(x), || if rng.gen::<f64>() < p { 0.0 } else { keep });
    tape.apply_mask(x, mask)
}

pub(crate) fn dropout_rng(mask_seed: u64, layer: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    rng.set_stream(layer as u64 + 1);
    rng
}

/// Input of a layer: the raw node features or the previous layer's output.
#[derive(Clone, Copy)]
pub enum LayerSource<'a> {
    Features(&'a Features),
    Hidden(Value),
}

impl LayerSource<'_> {
    pub fn project(&self, tape: &mut Tape, w: Value) -> Result<Value> {
        match self {
            LayerSource::Features(f) => f.project(tape, w),
            LayerSource::Hidden(h) => tape.matmul(*h, w),
        }
    }
}

/// `z_m = normalize(relu(h·W_m + b_m))` for every channel.
pub fn channel_project(tape: &mut Tape, weights: &[Value], biases: &[Value], h: LayerSource<'_>) -> Result<Vec<Value>> {
    if weights.len() != biases.len() {
        return Err(Error::param("one bias per channel weight is required"));
    }
    weights
        .iter()
        .zip(biases)
        .map(|(&w, &b)| {
            let lin = h.project(tape, w)?;
            let lin = tape.add_row(lin, b)?;
            let act = tape.relu(lin);
            Ok(tape.l2_normalize_rows(act, NORMALIZE_EPS))
        })
        .collect()
}

/// Rebuilds a latent graph inside every channel and averages over it with
/// the symmetric normalization. The graphs are constants for the gradient.
pub fn latent_aggregate(tape: &mut Tape, z_hat: &[Value], rule: ConstructionRule, k: usize) -> Result<Vec<Value>> {
    z_hat
        .iter()
        .map(|&z| {
            let g = latent_graph(tape.data(z), rule, k)?;
            spmm(tape, &g, z)
        })
        .collect()
}

/// Normalized latent graph of one channel.
pub fn latent_graph(z: &Matrix, rule: ConstructionRule, k: usize) -> Result<CsrGraph> {
    let g = build_latent_graph(&PointSet::new(z.clone()), k, rule)?;
    Ok(sym_normalize(&g))
}

/// Values produced by one disentangled layer.
#[derive(Clone, Debug)]
pub struct LayerRecord {
    /// Routing output per channel, N×Δ each. Regularizers read these.
    pub z_hat: Vec<Value>,
    /// Concatenated post-aggregation units before dropout. Statistics read this.
    pub z_breve: Value,
    /// Layer output after dropout.
    pub output: Value,
}

/// Runs one layer given its parameter values on the tape.
#[allow(clippy::too_many_arguments)]
pub fn layer_forward(
    tape: &mut Tape,
    weights: &[Value],
    biases: &[Value],
    cfg: &ModelConfig,
    input: &ModelInput,
    h: LayerSource<'_>,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<LayerRecord> {
    let z = channel_project(tape, weights, biases, h)?;
    let joined = tape.concat_cols(&z)?;
    let (routed, _) = neighborhood_routing(
        tape,
        joined,
        &input.graph,
        cfg.channels,
        cfg.iterations,
        cfg.routing_temperature,
    )?;
    let delta = cfg.channel_width();
    let z_hat = (0..cfg.channels)
        .map(|m| tape.slice_cols(routed, m * delta, (m + 1) * delta))
        .collect::<Result<Vec<_>>>()?;
    let z_breve = if cfg.latent_agg {
        let agg = latent_aggregate(tape, &z_hat, cfg.rule, cfg.k)?;
        tape.concat_cols(&agg)?
    } else {
        routed
    };
    let output = match mode {
        Mode::Train => dropout(tape, z_breve, cfg.dropout, rng)?,
        Mode::Eval => z_breve,
    };
    Ok(LayerRecord { z_hat, z_breve, output })
}

/// Result of a full forward pass.
pub struct ForwardPass {
    pub logits: Value,
    /// Same order as [`NodeClassifier::parameters`].
    pub params: Vec<Value>,
    /// Empty for models without disentangled layers.
    pub layers: Vec<LayerRecord>,
}

/// Common interface of the trainable models.
pub trait NodeClassifier {
    fn num_classes(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// Named parameters in a fixed order.
    fn parameters(&self) -> Vec<(String, &Matrix)>;
    /// Same order as [`Self::parameters`].
    fn parameters_mut(&mut self) -> Vec<&mut Matrix>;
    fn forward(&self, tape: &mut Tape, input: &ModelInput, mode: Mode, mask_seed: u64) -> Result<ForwardPass>;
}

/// The disentangled network with a linear classifier head.
#[derive(Clone, Debug)]
pub struct LgdModel {
    pub config: ModelConfig,
    pub input_dim: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerParams>,
    /// `d_out × C`.
    pub head_w: Matrix,
    /// `1 × C`.
    pub head_b: Matrix,
    /// One entry per layer.
    pub stats: Vec<ChannelStats>,
}

impl LgdModel {
    pub fn new(config: ModelConfig, input_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::param("input dimension and class count must be positive"));
        }
        let mut rng = init_rng(seed);
        let delta = config.channel_width();
        let layers = (0..config.layers)
            .map(|l| {
                let d_in = if l == 0 { input_dim } else { config.d_out };
                LayerParams::init(d_in, config.channels, delta, &mut rng)
            })
            .collect();
        let head_w = uniform(config.d_out, num_classes, 1.0 / (config.d_out as f64).sqrt(), &mut rng);
        let stats = (0..config.layers)
            .map(|_| ChannelStats::standard(config.channels, delta))
            .collect();
        Ok(Self {
            input_dim,
            num_classes,
            layers,
            head_w,
            head_b: Array2::zeros((1, num_classes)),
            stats,
            config,
        })
    }
}

impl NodeClassifier for LgdModel {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn parameters(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (m, w) in layer.weights.iter().enumerate() {
                out.push((format!("layer{}.W{}", l + 1, m + 1), w));
            }
            for (m, b) in layer.biases.iter().enumerate() {
                out.push((format!("layer{}.b{}", l + 1, m + 1), b));
            }
        }
        out.push(("head.W".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.extend(layer.weights.iter_mut());
            out.extend(layer.biases.iter_mut());
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    fn forward(&self, tape: &mut Tape, input: &ModelInput, mode: Mode, mask_seed: u64) -> Result<ForwardPass> {
        if input.feature_dim() != self.input_dim {
            return Err(Error::Shape {
                op: "model_forward",
                left: (input.num_nodes(), input.feature_dim()),
                right: (self.input_dim, self.config.d_out),
            });
        }
        let mut params = Vec::new();
        let mut records = Vec::with_capacity(self.layers.len());
        let mut h = LayerSource::Features(&input.features);
        for (l, layer) in self.layers.iter().enumerate() {
            let w: Vec<Value> = layer.weights.iter().map(|m| tape.param(m.clone())).collect();
            let b: Vec<Value> = layer.biases.iter().map(|m| tape.param(m.clone())).collect();
            params.extend(&w);
            params.extend(&b);
            let mut rng = dropout_rng(mask_seed, l);
            let rec = layer_forward(tape, &w, &b, &self.config, input, h, mode, &mut rng)?;
            h = LayerSource::Hidden(rec.output);
            records.push(rec);
        }
        let LayerSource::Hidden(last) = h else {
            unreachable!("at least one layer")
        };
        let hw = tape.param(self.head_w.clone());
        let hb = tape.param(self.head_b.clone());
        params.push(hw);
        params.push(hb);
        let lin = tape.matmul(last, hw)?;
        let logits = tape.add_row(lin, hb)?;
        Ok(ForwardPass {
            logits,
            params,
            layers: records,
        })
    }
}

/// Either trainable model, so checkpoints and the CLI can treat them alike.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Lgd(LgdModel),
    Gcn(GcnModel),
}

impl AnyModel {
    pub fn kind(&self) -> &'static str {
        match self {
            AnyModel::Lgd(_) => "lgd",
            AnyModel::Gcn(_) => "gcn",
        }
    }

    pub fn as_lgd(&self) -> Option<&LgdModel> {
        match self {
            AnyModel::Lgd(m) => Some(m),
            AnyModel::Gcn(_) => None,
        }
    }

    pub fn as_lgd_mut(&mut self) -> Option<&mut LgdModel> {
        match self {
            AnyModel::Lgd(m) => Some(m),
            AnyModel::Gcn(_) => None,
        }
    }
}

impl NodeClassifier for AnyModel {
    fn num_classes(&self) -> usize {
        match self {
            AnyModel::Lgd(m) => m.num_classes(),
            AnyModel::Gcn(m) => m.num_classes(),
        }
    }

    fn input_dim(&self) -> usize {
        match self {
            AnyModel::Lgd(m) => m.input_dim(),
            AnyModel::Gcn(m) => m.input_dim(),
        }
    }

    fn parameters(&self) -> Vec<(String, &Matrix)> {
        match self {
            AnyModel::Lgd(m) => m.parameters(),
            AnyModel::Gcn(m) => m.parameters(),
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            AnyModel::Lgd(m) => m.parameters_mut(),
            AnyModel::Gcn(m) => m.parameters_mut(),
        }
    }

    fn forward(&self, tape: &mut Tape, input: &ModelInput, mode: Mode, mask_seed: u64) -> Result<ForwardPass> {
        match self {
            AnyModel::Lgd(m) => m.forward(tape, input, mode, mask_seed),
            AnyModel::Gcn(m) => m.forward(tape, input, mode, mask_seed),
        }
    }
}
