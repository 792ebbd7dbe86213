use ndarray::{s, Array1, Axis};

use crate::error::{Error, Result};
use crate::model::{ChannelStats, Gaussian};
use crate::Matrix;

/// Mean and covariance (around that mean) of the rows of `z`.
pub fn batch_moments(z: &Matrix) -> (Array1<f64>, Matrix) {
    let n = z.nrows().max(1) as f64;
    let mean = z.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(z.ncols()));
    let centered = z - &mean;
    let cov = centered.t().dot(&centered) / n;
    let cov = (&cov + &cov.t()) * 0.5;
    (mean, cov)
}

/// Splits concatenated channel data into M blocks.
pub fn channel_blocks(z: &Matrix, channels: usize) -> Vec<Matrix> {
    let delta = z.ncols() / channels;
    (0..channels)
        .map(|m| z.slice(s![.., m * delta..(m + 1) * delta]).to_owned())
        .collect()
}

/// Replaces every component with the batch mean and covariance.
pub fn reset_stats(stats: &mut ChannelStats, z: &[Matrix]) -> Result<()> {
    check(stats, z)?;
    for (g, zm) in stats.components.iter_mut().zip(z) {
        let (mean, cov) = batch_moments(zm);
        *g = Gaussian::new(mean, cov)?;
    }
    Ok(())
}

fn check(stats: &ChannelStats, z: &[Matrix]) -> Result<()> {
    if z.len() != stats.channels() {
        return Err(Error::param(format!(
            "{} channel blocks for {} components",
            z.len(),
            stats.channels()
        )));
    }
    for zm in z {
        if zm.ncols() != stats.dim() {
            return Err(Error::Shape {
                op: "ema_update_stats",
                left: zm.dim(),
                right: (zm.nrows(), stats.dim()),
            });
        }
    }
    Ok(())
}

/// Moves every component towards the batch statistics of `z` by `rate`.
///
/// The batch covariance is taken around the component's current mean, before
/// that mean is updated.
pub fn ema_update_stats(stats: &mut ChannelStats, z: &[Matrix], rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::param(format!("update rate {rate} outside [0, 1]")));
    }
    check(stats, z)?;
    for (g, zm) in stats.components.iter_mut().zip(z) {
        let n = zm.nrows().max(1) as f64;
        let batch_mean = zm.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(zm.ncols()));
        let centered = zm - g.mean();
        let batch_cov = centered.t().dot(&centered) / n;
        let mean = g.mean() * (1.0 - rate) + &batch_mean * rate;
        let cov = g.cov() * (1.0 - rate) + &batch_cov * rate;
        let cov = (&cov + &cov.t()) * 0.5;
        *g = Gaussian::new(mean, cov)?;
    }
    Ok(())
}
