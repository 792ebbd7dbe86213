//! Feature correlations and tab-separated embedding exports.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::autodiff::Tape;
use crate::datagen::{GraphBundle, Labels};
use crate::error::{Error, Result};
use crate::model::{AnyModel, Mode, ModelInput, NodeClassifier};
use crate::Matrix;

/// Where in a layer the exported units are read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Routing output, unit-norm per channel.
    PostRouting,
    /// After latent-structure aggregation (equal to routing output when the
    /// aggregation is disabled).
    PostAggregation,
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "post_routing" => Ok(Self::PostRouting),
            "post_aggregation" => Ok(Self::PostAggregation),
            other => Err(Error::param(format!(
                "unknown stage `{other}` (expected post_routing or post_aggregation)"
            ))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PostRouting => "post_routing",
            Self::PostAggregation => "post_aggregation",
        })
    }
}

/// Pearson correlation between the columns of `embeddings` over the nodes in
/// `mask`. A constant column has correlation 0 with everything, itself
/// included.
pub fn feature_correlation(embeddings: &Matrix, mask: &[bool]) -> Result<Matrix> {
    let (n, d) = embeddings.dim();
    if mask.len() != n {
        return Err(Error::Shape {
            op: "feature_correlation",
            left: (n, d),
            right: (mask.len(), 1),
        });
    }
    let rows: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if rows.len() < 2 {
        return Err(Error::param(format!(
            "correlation needs at least 2 nodes, mask selects {}",
            rows.len()
        )));
    }
    let mut centered = Matrix::zeros((rows.len(), d));
    let mut constant = vec![false; d];
    for j in 0..d {
        let col: Vec<f64> = rows.iter().map(|&i| embeddings[[i, j]]).collect();
        constant[j] = col.iter().all(|&v| v == col[0]);
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        for (r, v) in col.iter().enumerate() {
            centered[[r, j]] = v - mean;
        }
    }
    let gram = centered.t().dot(&centered);
    let mut out = Matrix::zeros((d, d));
    for a in 0..d {
        if constant[a] {
            continue;
        }
        out[[a, a]] = 1.0;
        for b in a + 1..d {
            if constant[b] {
                continue;
            }
            let r = (gram[[a, b]] / (gram[[a, a]] * gram[[b, b]]).sqrt()).clamp(-1.0, 1.0);
            out[[a, b]] = r;
            out[[b, a]] = r;
        }
    }
    Ok(out)
}

/// Correlation matrix as CSV with an `f1..fd` header row.
pub fn correlation_csv(corr: &Matrix) -> String {
    let mut out = String::new();
    let header: Vec<String> = (1..=corr.ncols()).map(|j| format!("f{j}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in corr.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Per-channel units (N×Δ each) of 1-based `layer` from an eval pass.
pub fn layer_units(model: &AnyModel, input: &ModelInput, layer: usize, stage: Stage) -> Result<Vec<Matrix>> {
    let Some(lgd) = model.as_lgd() else {
        return Err(Error::Validation("channel exports need a disentangled model".into()));
    };
    let layers = lgd.config.layers;
    if layer == 0 || layer > layers {
        return Err(Error::param(format!("layer must lie in 1..={layers}, got {layer}")));
    }
    let mut tape = Tape::new();
    let f = model.forward(&mut tape, input, Mode::Eval, 0)?;
    let rec = &f.layers[layer - 1];
    Ok(match stage {
        Stage::PostRouting => rec.z_hat.iter().map(|&v| tape.data(v).clone()).collect(),
        Stage::PostAggregation => crate::train::channel_blocks(tape.data(rec.z_breve), lgd.config.channels),
    })
}

fn push_row(out: &mut String, lead: &[String], values: impl Iterator<Item = f64>) {
    out.push_str(&lead.join("\t"));
    for v in values {
        let _ = write!(out, "\t{v}");
    }
    out.push('\n');
}

/// `node<TAB>channel<TAB>f1..fΔ`, one row per node and channel (channels are
/// 1-based).
pub fn channel_tsv(blocks: &[Matrix]) -> String {
    let delta = blocks.first().map_or(0, |b| b.ncols());
    let n = blocks.first().map_or(0, |b| b.nrows());
    let mut out = String::from("node\tchannel");
    for j in 1..=delta {
        let _ = write!(out, "\tf{j}");
    }
    out.push('\n');
    for i in 0..n {
        for (m, b) in blocks.iter().enumerate() {
            push_row(&mut out, &[i.to_string(), (m + 1).to_string()], b.row(i).iter().copied());
        }
    }
    out
}

/// Label column text: the class index, or the `;`-joined active classes of a
/// multi-label node.
fn label_text(labels: &Labels, i: usize) -> String {
    match labels {
        Labels::Single(y) => y[i].to_string(),
        Labels::Multi(y) => {
            let active: Vec<String> = (0..y.ncols()).filter(|&k| y[[i, k]] == 1).map(|k| k.to_string()).collect();
            active.join(";")
        }
    }
}

/// `node<TAB>label<TAB>f1..f(M·Δ)`, one row per node with all channels
/// concatenated.
pub fn node_tsv(blocks: &[Matrix], labels: &Labels) -> String {
    let width: usize = blocks.iter().map(|b| b.ncols()).sum();
    let n = blocks.first().map_or(0, |b| b.nrows());
    let mut out = String::from("node\tlabel");
    for j in 1..=width {
        let _ = write!(out, "\tf{j}");
    }
    out.push('\n');
    for i in 0..n {
        let values = blocks.iter().flat_map(|b| b.row(i).to_vec());
        push_row(&mut out, &[i.to_string(), label_text(labels, i)], values);
    }
    out
}

/// Sibling of `path` that receives the concatenated per-node export:
/// `emb.tsv` becomes `emb.nodes.tsv`.
pub fn node_export_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "embeddings".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.nodes.tsv"))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the channel export to `path` and the per-node export next to it
/// (see [`node_export_path`]). Returns both paths.
pub fn export_embeddings(
    model: &AnyModel,
    bundle: &GraphBundle,
    layer: usize,
    stage: Stage,
    path: &Path,
) -> Result<[PathBuf; 2]> {
    if model.input_dim() != bundle.feature_dim() || model.num_classes() != bundle.num_classes {
        return Err(Error::Validation(format!(
            "model expects {} features and {} classes, bundle has {} and {}",
            model.input_dim(),
            model.num_classes(),
            bundle.feature_dim(),
            bundle.num_classes
        )));
    }
    let input = ModelInput::from_bundle(bundle)?;
    let blocks = layer_units(model, &input, layer, stage)?;
    let nodes = node_export_path(path);
    write_file(path, &channel_tsv(&blocks))?;
    write_file(&nodes, &node_tsv(&blocks, &bundle.labels))?;
    Ok([path.to_path_buf(), nodes])
}
