//! `lgd`: generate synthetic graphs, train and evaluate models, export
//! embeddings and feature correlations.
//!
//! Exit codes: 0 on success, 2 for usage or validation errors, 3 for
//! numerical failures (including a diverged training run).

mod manifest;
mod presets;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use lgd_core::analysis::{correlation_csv, export_embeddings, feature_correlation, layer_units, Stage};
use lgd_core::datagen::{bundle_read, bundle_write, densify_series, synth_generate, GraphBundle, Split, SynthSpec};
use lgd_core::graph::ConstructionRule;
use lgd_core::model::{AnyModel, GcnModel, LgdModel, ModelInput};
use lgd_core::train::{evaluate_input, history_csv, load_checkpoint, save_checkpoint, train_run, Metrics, RunStatus};
use lgd_core::Error as CoreError;

use manifest::{DatasetInfo, ModelSpec, RunManifest};
use presets::Preset;

/// Version of the JSON lines printed on stdout.
const SCHEMA: u32 = 1;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(CoreError::Numerical(_)) | CliError::Diverged { .. } => 3,
            _ => 2,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "lgd", version, about = "Local and global disentangled graph convolutional networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-factor graph bundle.
    Synth(SynthArgs),
    /// Train a model and write checkpoint, history and manifest.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Write per-channel and per-node embedding TSVs.
    Export(ExportArgs),
    /// Write the feature correlation matrix of one layer as CSV.
    Correlate(CorrelateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of latent factors `m`.
    #[arg(long)]
    factors: usize,
    /// Intra-class edge probability; required unless `--factors` has a reference value.
    #[arg(long)]
    p: Option<f64>,
    /// Inter-class edge probability.
    #[arg(long, default_value_t = lgd_core::datagen::DEFAULT_Q)]
    q: f64,
    #[arg(long, default_value_t = 1000)]
    nodes: usize,
    #[arg(long, default_value_t = 16)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Search `p` so that the average degree is within 5% of this value.
    #[arg(long)]
    target_degree: Option<f64>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    Lgd,
    Gcn,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = ModelKind::Lgd)]
    model: ModelKind,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Directory receiving `model.ckpt`, `history.csv`, `manifest.json` and `metrics.json`.
    #[arg(long, default_value = "lgd-run")]
    out: PathBuf,
    /// Seed for initialization and dropout; `LGD_SEED` overrides it.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Number of channels `M`.
    #[arg(long = "M", alias = "channels")]
    channels: Option<usize>,
    /// Routing iterations `T`.
    #[arg(long = "T", alias = "iterations")]
    iterations: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_out: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    rule: Option<ConstructionRule>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Divisor of the routing softmax logits.
    #[arg(long)]
    routing_temperature: Option<f64>,
    /// Disable the latent-structure aggregation.
    #[arg(long)]
    no_lgagg: bool,
    /// Hidden widths of the GCN baseline, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,

    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// EMA rate of the channel statistics.
    #[arg(long)]
    update_rate: Option<f64>,
    #[arg(long)]
    lambda_space: Option<f64>,
    #[arg(long)]
    lambda_div: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// 1-based layer index; defaults to the last layer.
    #[arg(long)]
    layer: Option<usize>,
    /// `post_routing` or `post_aggregation`.
    #[arg(long, default_value = "post_aggregation")]
    stage: Stage,
    /// Channel TSV path; the per-node TSV is written next to it as `<stem>.nodes.tsv`.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct CorrelateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value = "post_aggregation")]
    stage: Stage,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(short, long)]
    output: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Export(a) => cmd_export(a),
        Command::Correlate(a) => cmd_correlate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("plain data serializes"));
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CoreError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

#[derive(Serialize)]
struct SynthReport<'a> {
    schema: u32,
    output: &'a Path,
    factors: usize,
    nodes: usize,
    p: f64,
    q: f64,
    seed: u64,
    edges: usize,
    average_degree: f64,
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    let p = match (a.p, lgd_core::datagen::table_p_for_factors(a.factors)) {
        (Some(p), _) | (None, Some(p)) => p,
        (None, None) => {
            return Err(CliError::Usage(format!(
                "no reference p for {} factors; pass --p explicitly",
                a.factors
            )))
        }
    };
    let mut spec = SynthSpec {
        nodes: a.nodes,
        classes: a.classes,
        q: a.q,
        ..SynthSpec::new(a.factors, p, a.seed)
    };
    if let Some(target) = a.target_degree {
        spec = densify_series(&spec, &[target])?.remove(0);
    }
    let bundle = synth_generate(&spec)?;
    bundle_write(&bundle, &a.output)?;
    print_json(&SynthReport {
        schema: SCHEMA,
        output: &a.output,
        factors: spec.factors,
        nodes: spec.nodes,
        p: spec.p,
        q: spec.q,
        seed: spec.seed,
        edges: bundle.graph.num_edges(),
        average_degree: bundle.graph.average_degree(),
    });
    Ok(())
}

/// Seed from `LGD_SEED` if set, else the flag.
fn resolve_seed(flag: u64) -> CliResult<u64> {
    match std::env::var("LGD_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("LGD_SEED must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(flag),
    }
}

fn load_bundle(path: &Path) -> CliResult<GraphBundle> {
    Ok(bundle_read(path)?)
}

#[derive(Serialize)]
struct TrainReport<'a> {
    schema: u32,
    model: &'a str,
    dataset: &'a str,
    seed: u64,
    status: &'a str,
    epochs_run: usize,
    best_epoch: usize,
    val_metric: f64,
    val_accuracy: f64,
    val_micro_f1: f64,
    val_macro_f1: f64,
    test_accuracy: f64,
    test_micro_f1: f64,
    test_macro_f1: f64,
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let seed = resolve_seed(a.seed)?;
    let bundle = load_bundle(&a.data)?;
    let defaults = a.preset.map_or_else(presets::base, presets::values);

    let mut train_cfg = match a.model {
        ModelKind::Lgd => defaults.lgd_train.clone(),
        ModelKind::Gcn => defaults.gcn_train.clone(),
    };
    train_cfg.seed = seed;
    macro_rules! set {
        ($target:expr, $flag:expr) => {
            if let Some(v) = $flag {
                $target = v;
            }
        };
    }
    set!(train_cfg.epochs, a.epochs);
    set!(train_cfg.patience, a.patience);
    set!(train_cfg.lr, a.lr);
    set!(train_cfg.weight_decay, a.weight_decay);
    set!(train_cfg.update_rate, a.update_rate);
    set!(train_cfg.lambda_space, a.lambda_space);
    set!(train_cfg.lambda_div, a.lambda_div);

    let (model, spec) = match a.model {
        ModelKind::Lgd => {
            let mut cfg = defaults.lgd.clone();
            set!(cfg.channels, a.channels);
            set!(cfg.iterations, a.iterations);
            set!(cfg.layers, a.layers);
            set!(cfg.d_out, a.d_out);
            set!(cfg.k, a.k);
            set!(cfg.rule, a.rule);
            set!(cfg.dropout, a.dropout);
            set!(cfg.routing_temperature, a.routing_temperature);
            if a.no_lgagg {
                cfg.latent_agg = false;
            }
            let m = LgdModel::new(cfg.clone(), bundle.feature_dim(), bundle.num_classes, seed)?;
            (AnyModel::Lgd(m), ModelSpec::Lgd(cfg))
        }
        ModelKind::Gcn => {
            let mut cfg = defaults.gcn.clone();
            set!(cfg.hidden, a.hidden);
            set!(cfg.dropout, a.dropout);
            let m = GcnModel::new(cfg.clone(), bundle.feature_dim(), bundle.num_classes, seed)?;
            (AnyModel::Gcn(m), ModelSpec::Gcn(cfg))
        }
    };
    train_cfg.validate()?;

    std::fs::create_dir_all(&a.out).map_err(|e| CoreError::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let bytes = std::fs::read(&a.data).map_err(|e| CoreError::Io {
        path: a.data.clone(),
        source: e,
    })?;
    let manifest = RunManifest {
        schema: SCHEMA,
        preset: a.preset.map(|p| p.to_string()),
        seed,
        model: spec,
        train: train_cfg.clone(),
        dataset: DatasetInfo::new(&bundle, &a.data, &bytes),
    };
    write_text(&a.out.join("manifest.json"), &manifest.to_json())?;

    let started = Instant::now();
    let outcome = train_run(&bundle, model, &train_cfg)?;
    let elapsed = started.elapsed().as_secs_f64();
    write_text(&a.out.join("history.csv"), &history_csv(&outcome.history))?;
    save_checkpoint(&outcome.model, a.out.join("model.ckpt"))?;

    let input = ModelInput::from_bundle(&bundle)?;
    let val = evaluate_input(&outcome.model, &input, &bundle, Split::Val)?;
    let test = evaluate_input(&outcome.model, &input, &bundle, Split::Test)?;
    let status = match &outcome.status {
        RunStatus::Completed => "completed",
        RunStatus::EarlyStopped => "early_stopped",
        RunStatus::Diverged { .. } => "diverged",
    };
    let report = TrainReport {
        schema: SCHEMA,
        model: outcome.model.kind(),
        dataset: &bundle.name,
        seed,
        status,
        epochs_run: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        val_metric: val.primary(bundle.label_mode()),
        val_accuracy: val.accuracy,
        val_micro_f1: val.micro_f1,
        val_macro_f1: val.macro_f1,
        test_accuracy: test.accuracy,
        test_micro_f1: test.micro_f1,
        test_macro_f1: test.macro_f1,
    };
    let line = serde_json::to_string(&report).expect("plain data serializes");
    write_text(&a.out.join("metrics.json"), &format!("{line}\n"))?;
    println!("{line}");
    eprintln!(
        "{} epochs in {elapsed:.1}s, best epoch {}",
        outcome.history.len(),
        outcome.best_epoch
    );
    match outcome.status {
        RunStatus::Diverged { epoch, reason } => Err(CliError::Diverged { epoch, reason }),
        _ => Ok(()),
    }
}

#[derive(Serialize)]
struct EvalReport {
    schema: u32,
    split: Split,
    #[serde(flatten)]
    metrics: Metrics,
}

fn load_pair(checkpoint: &Path, data: &Path) -> CliResult<(AnyModel, GraphBundle)> {
    Ok((load_checkpoint(checkpoint)?, load_bundle(data)?))
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let (model, bundle) = load_pair(&a.checkpoint, &a.data)?;
    let input = ModelInput::from_bundle(&bundle)?;
    let metrics = evaluate_input(&model, &input, &bundle, a.split)?;
    print_json(&EvalReport {
        schema: SCHEMA,
        split: a.split,
        metrics,
    });
    Ok(())
}

fn resolve_layer(model: &AnyModel, layer: Option<usize>) -> CliResult<usize> {
    let Some(lgd) = model.as_lgd() else {
        return Err(CliError::Usage("this command needs a disentangled (lgd) checkpoint".into()));
    };
    Ok(layer.unwrap_or(lgd.config.layers))
}

#[derive(Serialize)]
struct ExportReport<'a> {
    schema: u32,
    layer: usize,
    stage: String,
    channels: &'a Path,
    nodes: &'a Path,
    rows: usize,
}

fn cmd_export(a: ExportArgs) -> CliResult<()> {
    let (model, bundle) = load_pair(&a.checkpoint, &a.data)?;
    let layer = resolve_layer(&model, a.layer)?;
    let [channels, nodes] = export_embeddings(&model, &bundle, layer, a.stage, &a.output)?;
    let m = model.as_lgd().map_or(0, |m| m.config.channels);
    print_json(&ExportReport {
        schema: SCHEMA,
        layer,
        stage: a.stage.to_string(),
        channels: &channels,
        nodes: &nodes,
        rows: bundle.num_nodes() * m,
    });
    Ok(())
}

#[derive(Serialize)]
struct CorrelateReport<'a> {
    schema: u32,
    layer: usize,
    split: Split,
    features: usize,
    nodes: usize,
    output: &'a Path,
}

fn cmd_correlate(a: CorrelateArgs) -> CliResult<()> {
    let (model, bundle) = load_pair(&a.checkpoint, &a.data)?;
    let layer = resolve_layer(&model, a.layer)?;
    if model.as_lgd().map(|m| m.input_dim) != Some(bundle.feature_dim()) {
        return Err(CliError::Core(CoreError::Validation(format!(
            "checkpoint expects {} features, bundle has {}",
            model.as_lgd().map_or(0, |m| m.input_dim),
            bundle.feature_dim()
        ))));
    }
    let input = ModelInput::from_bundle(&bundle)?;
    let blocks = layer_units(&model, &input, layer, a.stage)?;
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let embeddings = ndarray::concatenate(ndarray::Axis(1), &views).map_err(|e| CoreError::Validation(e.to_string()))?;
    let mask = bundle.mask(a.split);
    let corr = feature_correlation(&embeddings, &mask)?;
    write_text(&a.output, &correlation_csv(&corr))?;
    print_json(&CorrelateReport {
        schema: SCHEMA,
        layer,
        split: a.split,
        features: corr.ncols(),
        nodes: mask.iter().filter(|&&b| b).count(),
        output: &a.output,
    });
    Ok(())
}
