//! Datasets: the in-memory bundle, synthetic factor graphs, the text bundle
//! format and train/validation/test splits.

mod bundle;
mod split;
mod synth;

pub use bundle::{bundle_read, bundle_write, parse_bundle, render_bundle};
pub use split::{split_fraction, split_random, split_standard, RandomSplit};
pub use synth::{densify_series, realized_degree, synth_generate, table_p_for_factors, SynthSpec, DEFAULT_Q};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CsrGraph;
use crate::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Single,
    Multi,
}

impl std::fmt::Display for LabelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LabelMode::Single => "single",
            LabelMode::Multi => "multi",
        })
    }
}

/// Node targets: one class per node, or a binary N×C indicator matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Single(Vec<usize>),
    Multi(Array2<u8>),
}

impl Labels {
    pub fn mode(&self) -> LabelMode {
        match self {
            Labels::Single(_) => LabelMode::Single,
            Labels::Multi(_) => LabelMode::Multi,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Labels::Single(v) => v.len(),
            Labels::Multi(m) => m.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Disjoint node masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Masks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl Masks {
    pub fn empty(n: usize) -> Self {
        Self {
            train: vec![false; n],
            val: vec![false; n],
            test: vec![false; n],
        }
    }

    /// Builds masks from index lists.
    pub fn from_indices(n: usize, train: &[usize], val: &[usize], test: &[usize]) -> Self {
        let mut m = Self::empty(n);
        for &i in train {
            m.train[i] = true;
        }
        for &i in val {
            m.val[i] = true;
        }
        for &i in test {
            m.test[i] = true;
        }
        m
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        let c = |m: &[bool]| m.iter().filter(|&&b| b).count();
        (c(&self.train), c(&self.val), c(&self.test))
    }
}

/// Which node subset to score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(Error::param(format!("unknown split `{other}`"))),
        }
    }
}

/// Immutable dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBundle {
    pub name: String,
    pub graph: CsrGraph,
    pub features: Matrix,
    pub labels: Labels,
    pub num_classes: usize,
    pub masks: Masks,
}

impl GraphBundle {
    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn label_mode(&self) -> LabelMode {
        self.labels.mode()
    }

    pub fn mask(&self, split: Split) -> Vec<bool> {
        match split {
            Split::Train => self.masks.train.clone(),
            Split::Val => self.masks.val.clone(),
            Split::Test => self.masks.test.clone(),
            Split::All => vec![true; self.num_nodes()],
        }
    }

    /// Checks every structural invariant of the bundle.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        if self.name.is_empty() || self.name.chars().any(char::is_whitespace) {
            return Err(Error::Validation(format!("bundle name `{}` must be non-empty without whitespace", self.name)));
        }
        if self.features.nrows() != n {
            return Err(Error::Validation(format!(
                "feature rows {} differ from node count {n}",
                self.features.nrows()
            )));
        }
        if self.labels.len() != n {
            return Err(Error::Validation(format!("label rows {} differ from node count {n}", self.labels.len())));
        }
        match &self.labels {
            Labels::Single(v) => {
                if let Some((i, c)) = v.iter().enumerate().find(|(_, &c)| c >= self.num_classes) {
                    return Err(Error::Validation(format!("node {i} has label {c} ≥ C = {}", self.num_classes)));
                }
            }
            Labels::Multi(m) => {
                if m.ncols() != self.num_classes {
                    return Err(Error::Validation(format!(
                        "multi-label width {} differs from C = {}",
                        m.ncols(),
                        self.num_classes
                    )));
                }
                if m.iter().any(|&v| v > 1) {
                    return Err(Error::Validation("multi-label entries must be 0 or 1".into()));
                }
            }
        }
        let Masks { train, val, test } = &self.masks;
        if train.len() != n || val.len() != n || test.len() != n {
            return Err(Error::Validation("mask length differs from node count".into()));
        }
        for i in 0..n {
            let hits = train[i] as u8 + val[i] as u8 + test[i] as u8;
            if hits > 1 {
                return Err(Error::Validation(format!("node {i} appears in more than one split")));
            }
        }
        if !train.iter().any(|&b| b) {
            return Err(Error::Validation("train mask is empty".into()));
        }
        if self.graph.has_self_loops() || !self.graph.is_symmetric() || self.graph.is_weighted() {
            return Err(Error::Validation("graph must be undirected, unweighted and loop-free".into()));
        }
        Ok(())
    }
}
