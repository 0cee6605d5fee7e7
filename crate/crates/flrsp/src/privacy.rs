//! Baseline defenses compared against random parameter selection: Gaussian
//! differential-privacy noise on shared updates, and the fixed-position
//! method that freezes the ViT positional embedding.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::params::ParamSet;
use crate::seed;

/// Gaussian mechanism parameters. `sensitivity` scales the noise as written:
/// noise is drawn from N(0, S_f^2 sigma^2) with no prior clipping of the
/// update to S_f.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct DpConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub sensitivity: f64,
    pub seed: u64,
}

/// Minimal compliant noise multiplier: sigma = sqrt(2 ln(1.25/delta)) / epsilon.
pub fn dp_sigma(epsilon: f64, delta: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!(
            "dp epsilon must be positive, got {epsilon}"
        )));
    }
    if !(delta > 0.0 && delta < 1.25) {
        return Err(Error::Config(format!(
            "dp delta must lie in (0, 1.25) so ln(1.25/delta) is positive, got {delta}"
        )));
    }
    Ok((2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

/// Add i.i.d. N(0, S_f^2 sigma^2) noise to every scalar of the update, on the
/// stream named by `indices` (e.g. client and round) under the config seed.
pub fn dp_noise_stream(update: &ParamSet, cfg: &DpConfig, indices: &[u64]) -> Result<ParamSet> {
    let sigma = dp_sigma(cfg.epsilon, cfg.delta)?;
    if !(cfg.sensitivity >= 0.0) {
        return Err(Error::Config(format!(
            "dp sensitivity must be nonnegative, got {}",
            cfg.sensitivity
        )));
    }
    let std = cfg.sensitivity * sigma;
    if std == 0.0 {
        return Ok(update.clone());
    }
    let normal = Normal::new(0.0, std).expect("positive finite std");
    let mut rng = seed::rng(cfg.seed, "dp", indices);
    let mut out = update.clone();
    for (_, t) in out.iter_mut() {
        for v in t.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(out)
}

/// [`dp_noise_stream`] on the config's base stream.
pub fn dp_noise(update: &ParamSet, cfg: &DpConfig) -> Result<ParamSet> {
    dp_noise_stream(update, cfg, &[])
}

/// Zero every update entry belonging to the positional embedding; all other
/// entries pass through bit-identical. Only defined for ViT models.
pub fn fixed_position_filter(update: &ParamSet, model: &ModelSpec) -> Result<ParamSet> {
    if model.as_vit().is_none() {
        return Err(Error::Model(
            "fixed-position filter applies only to ViT models".into(),
        ));
    }
    let mut out = update.clone();
    let e_pos = out
        .get_mut("E_pos")
        .ok_or_else(|| Error::Model("update has no E_pos tensor".into()))?;
    for v in e_pos.data_mut() {
        *v = 0.0;
    }
    Ok(out)
}

/// Draw a `[0,1)` uniform; exposed for tests that need the same stream
/// discipline as the noise path.
pub fn uniform_draw(rng: &mut impl Rng) -> f64 {
    rng.random::<f64>()
}
