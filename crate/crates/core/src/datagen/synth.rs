//! Synthetic graphs with `m` latent factors.
//!
//! Each factor contributes an independent planted-partition graph over the
//! same nodes: 16 classes, edge probability `p` inside a class and `q`
//! across classes. The factor graphs are merged by OR-ing their adjacency
//! matrices, node features are the rows of the merged adjacency and every
//! node is labelled with the union of its per-factor classes.
//!
//! Randomness comes from ChaCha8. Factor `f` draws from stream `f + 1` of a
//! generator seeded with `seed`, so each factor graph is reproducible on its
//! own and independent of how many factors are generated.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{split_fraction, GraphBundle, Labels, Masks};
use crate::error::{Error, Result};
use crate::graph::CsrGraph;

/// `(factors, p)` pairs used for the reference synthetic graphs; `q = 3e-5`.
const TABLE_P: [(usize, f64); 5] = [(4, 0.164), (6, 0.110), (8, 0.082), (10, 0.065), (12, 0.055)];

pub const DEFAULT_Q: f64 = 3e-5;

/// Reference intra-class probability for a factor count, if tabulated.
pub fn table_p_for_factors(factors: usize) -> Option<f64> {
    TABLE_P.iter().find(|(f, _)| *f == factors).map(|(_, p)| *p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub factors: usize,
    pub nodes: usize,
    pub classes: usize,
    pub p: f64,
    pub q: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(factors: usize, p: f64, seed: u64) -> Self {
        Self {
            factors,
            nodes: 1000,
            classes: 16,
            p,
            q: DEFAULT_Q,
            seed,
        }
    }

    /// Spec with the tabulated `p` for `factors`.
    pub fn from_table(factors: usize, seed: u64) -> Result<Self> {
        let p = table_p_for_factors(factors)
            .ok_or_else(|| Error::param(format!("no reference p for {factors} factors; pass p explicitly")))?;
        Ok(Self::new(factors, p, seed))
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors == 0 || self.nodes < 2 || self.classes == 0 {
            return Err(Error::param("factors, classes must be ≥ 1 and nodes ≥ 2"));
        }
        if !(0.0..=1.0).contains(&self.q) || !(self.q..=1.0).contains(&self.p) {
            return Err(Error::param(format!("need 0 ≤ q ≤ p ≤ 1, got p = {}, q = {}", self.p, self.q)));
        }
        Ok(())
    }
}

/// Balanced class assignment in random order: class sizes differ by at most
/// one (the first `nodes % classes` classes get the extra node).
fn assign_classes(rng: &mut ChaCha8Rng, nodes: usize, classes: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..nodes).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

struct FactorGraphs {
    merged: CsrGraph,
    classes: Vec<Vec<usize>>,
    #[cfg(test)]
    per_factor: Vec<Vec<(usize, usize)>>,
}

fn generate(spec: &SynthSpec) -> Result<FactorGraphs> {
    spec.validate()?;
    let n = spec.nodes;
    let mut all_edges = Vec::new();
    let mut classes = Vec::with_capacity(spec.factors);
    #[cfg(test)]
    let mut per_factor = Vec::with_capacity(spec.factors);
    for f in 0..spec.factors {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(f as u64 + 1);
        let cls = assign_classes(&mut rng, n, spec.classes);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let u: f64 = rng.gen();
                let prob = if cls[i] == cls[j] { spec.p } else { spec.q };
                if u < prob {
                    edges.push((i, j));
                }
            }
        }
        #[cfg(test)]
        per_factor.push(edges.clone());
        all_edges.extend(edges);
        classes.push(cls);
    }
    Ok(FactorGraphs {
        merged: CsrGraph::from_edges(n, all_edges)?,
        classes,
        #[cfg(test)]
        per_factor,
    })
}

/// Average degree of the merged graph for `spec`, without building features.
pub fn realized_degree(spec: &SynthSpec) -> Result<f64> {
    Ok(generate(spec)?.merged.average_degree())
}

/// Generates a multi-label bundle. Masks follow a 0.6/0.2/0.2 node split
/// seeded with `spec.seed`.
pub fn synth_generate(spec: &SynthSpec) -> Result<GraphBundle> {
    let FactorGraphs { merged, classes, .. } = generate(spec)?;
    let n = spec.nodes;
    let mut features = Array2::zeros((n, n));
    for (i, j, _) in merged.entries() {
        features[[i, j]] = 1.0;
    }
    let mut labels = Array2::<u8>::zeros((n, spec.classes));
    for cls in &classes {
        for (i, &c) in cls.iter().enumerate() {
            labels[[i, c]] = 1;
        }
    }
    let bundle = GraphBundle {
        name: format!("synth-m{}-s{}", spec.factors, spec.seed),
        graph: merged,
        features,
        labels: Labels::Multi(labels),
        num_classes: spec.classes,
        masks: Masks::empty(n),
    };
    split_fraction(&bundle, (0.6, 0.2, 0.2), spec.seed)
}

/// For each target average degree, binary-searches `p` (with the base seed
/// fixed) until the realized degree lies within ±5 % of the target.
pub fn densify_series(base: &SynthSpec, targets: &[f64]) -> Result<Vec<SynthSpec>> {
    base.validate()?;
    let max_degree = (base.nodes - 1) as f64;
    let mut out = Vec::with_capacity(targets.len());
    for &target in targets {
        if !(target.is_finite() && target > 0.0) || target > max_degree {
            return Err(Error::param(format!("target degree {target} unreachable with {} nodes", base.nodes)));
        }
        let probe = |p: f64| realized_degree(&SynthSpec { p, ..base.clone() });
        let within = |d: f64| (d - target).abs() <= 0.05 * target;

        let base_degree = probe(base.p)?;
        if within(base_degree) && (base_degree - target).abs() < 1e-9 {
            out.push(base.clone());
            continue;
        }
        let (mut lo, mut hi) = (base.q, 1.0);
        if probe(hi)? < target * 0.95 {
            return Err(Error::param(format!("target degree {target} unreachable even with p = 1")));
        }
        let mut best: Option<(f64, f64)> = None;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let d = probe(mid)?;
            if best.is_none_or(|(_, bd)| (d - target).abs() < (bd - target).abs()) {
                best = Some((mid, d));
            }
            if (d - target).abs() < 1e-9 {
                break;
            }
            if d < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (p, d) = best.expect("at least one probe");
        if !within(d) {
            return Err(Error::param(format!("could not reach degree {target} within 5% (closest {d:.3})")));
        }
        out.push(SynthSpec { p, ..base.clone() });
    }
    Ok(out)
}
