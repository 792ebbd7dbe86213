use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{GraphBundle, Labels, Masks};
use crate::error::{Error, Result};

/// Sizes for the per-class random split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RandomSplit {
    pub per_class: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for RandomSplit {
    fn default() -> Self {
        Self {
            per_class: 20,
            val: 500,
            test: 1000,
        }
    }
}

/// Stream 0 of the seed is reserved for splits; factor graphs use 1..=F.
fn split_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

/// Keeps the masks stored in the bundle.
pub fn split_standard(bundle: GraphBundle) -> Result<GraphBundle> {
    bundle.validate()?;
    Ok(bundle)
}

/// Samples `per_class` train nodes from every class, then val and test
/// uniformly from the remaining nodes.
pub fn split_random(bundle: &GraphBundle, seed: u64, sizes: RandomSplit) -> Result<GraphBundle> {
    let Labels::Single(labels) = &bundle.labels else {
        return Err(Error::param("random per-class split needs single-label targets"));
    };
    let n = bundle.num_nodes();
    let mut rng = split_rng(seed);
    let mut by_class = vec![Vec::new(); bundle.num_classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }
    let mut train = Vec::with_capacity(sizes.per_class * bundle.num_classes);
    for (c, nodes) in by_class.iter_mut().enumerate() {
        if nodes.len() < sizes.per_class {
            return Err(Error::param(format!(
                "class {c} has {} nodes, {} required",
                nodes.len(),
                sizes.per_class
            )));
        }
        nodes.shuffle(&mut rng);
        train.extend_from_slice(&nodes[..sizes.per_class]);
    }
    let mut is_train = vec![false; n];
    for &i in &train {
        is_train[i] = true;
    }
    let mut rest: Vec<usize> = (0..n).filter(|&i| !is_train[i]).collect();
    if rest.len() < sizes.val + sizes.test {
        return Err(Error::param(format!(
            "{} nodes left after train, {} required for val and test",
            rest.len(),
            sizes.val + sizes.test
        )));
    }
    rest.shuffle(&mut rng);
    let val = &rest[..sizes.val];
    let test = &rest[sizes.val..sizes.val + sizes.test];
    let mut out = bundle.clone();
    out.masks = Masks::from_indices(n, &train, val, test);
    Ok(out)
}

/// Uniform node-level partition; val and test sizes are floored, train
/// takes the remainder.
pub fn split_fraction(bundle: &GraphBundle, fractions: (f64, f64, f64), seed: u64) -> Result<GraphBundle> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::param(format!(
            "split fractions ({ft}, {fv}, {fs}) must lie in [0, 1] and sum to 1"
        )));
    }
    let n = bundle.num_nodes();
    let n_val = ((n as f64) * fv + 1e-9).floor() as usize;
    let n_test = ((n as f64) * fs + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut split_rng(seed));
    let (val, rest) = order.split_at(n_val);
    let (test, train) = rest.split_at(n_test);
    let mut out = bundle.clone();
    out.masks = Masks::from_indices(n, train, val, test);
    Ok(out)
}
