//! Scalar evaluation: classification accuracy and the global-statistics SSIM
//! used to score reconstructions.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stabilizers and dynamic range for [`ssim`].
#[derive(Clone, Copy, Debug)]
pub struct SsimParams {
    pub c1: f64,
    pub c2: f64,
    pub dynamic_range: f64,
}

impl SsimParams {
    /// Conventional constants C1 = (0.01 L)^2, C2 = (0.03 L)^2.
    pub fn for_range(l: f64) -> Self {
        SsimParams {
            c1: (0.01 * l).powi(2),
            c2: (0.03 * l).powi(2),
            dynamic_range: l,
        }
    }
}

impl Default for SsimParams {
    /// Defaults for images in [0, 1].
    fn default() -> Self {
        SsimParams::for_range(1.0)
    }
}

/// Fraction of positions where prediction equals label.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::shape(
            "accuracy",
            format!("equal nonempty lengths, {} labels", labels.len()),
            format!("{} predictions", predictions.len()),
        ));
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Global-statistics SSIM: one comparison over whole-image means, variances,
/// and covariance (population statistics, no sliding window). Rank-3 tensors
/// are treated as `[C, H, W]` and scored per channel, then averaged; any
/// other rank is treated as a single channel.
pub fn ssim(x1: &Tensor, x2: &Tensor, p: &SsimParams) -> Result<f64> {
    if x1.shape() != x2.shape() {
        return Err(Error::shape(
            "ssim",
            format!("{:?}", x1.shape()),
            format!("{:?}", x2.shape()),
        ));
    }
    if !x1.is_finite() || !x2.is_finite() {
        return Err(Error::Model("ssim requires finite images".into()));
    }
    if x1.rank() == 3 {
        let channels = x1.shape()[0];
        let per = x1.len() / channels;
        let mut acc = 0.0;
        for c in 0..channels {
            acc += ssim_channel(
                &x1.data()[c * per..(c + 1) * per],
                &x2.data()[c * per..(c + 1) * per],
                p,
            );
        }
        Ok(acc / channels as f64)
    } else {
        Ok(ssim_channel(x1.data(), x2.data(), p))
    }
}

fn ssim_channel(a: &[f64], b: &[f64], p: &SsimParams) -> f64 {
    let n = a.len() as f64;
    let mu1 = a.iter().sum::<f64>() / n;
    let mu2 = b.iter().sum::<f64>() / n;
    let mut var1 = 0.0;
    let mut var2 = 0.0;
    let mut cov = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        var1 += (x - mu1).powi(2);
        var2 += (y - mu2).powi(2);
        cov += (x - mu1) * (y - mu2);
    }
    // Population statistics: divide by n, not n - 1.
    var1 /= n;
    var2 /= n;
    cov /= n;
    ((2.0 * mu1 * mu2 + p.c1) * (2.0 * cov + p.c2))
        / ((mu1 * mu1 + mu2 * mu2 + p.c1) * (var1 + var2 + p.c2))
}

fn sorted_finite(values: &[f64], what: &str) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Config(format!("{what} of an empty sample")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!(
            "{what} of a sample with non-finite values"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted)
}

/// Median of a sample; the privacy decision rule compares this against 0.5.
pub fn median(values: &[f64]) -> Result<f64> {
    let sorted = sorted_finite(values, "median")?;
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

/// (min, first quartile, median, third quartile, max) of a sample, with the
/// quartiles by linear interpolation.
pub fn quartiles(values: &[f64]) -> Result<[f64; 5]> {
    let sorted = sorted_finite(values, "quartiles")?;
    let q = |frac: f64| -> f64 {
        let pos = frac * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let t = pos - lo as f64;
        sorted[lo] * (1.0 - t) + sorted[hi] * t
    };
    Ok([
        sorted[0],
        q(0.25),
        q(0.5),
        q(0.75),
        sorted[sorted.len() - 1],
    ])
}
