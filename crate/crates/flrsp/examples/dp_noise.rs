//! The Gaussian-mechanism baseline: calibrating noise to (epsilon, delta)
//! and watching it degrade gradient inversion.
//!
//! First prints the noise multiplier sigma = sqrt(2 ln(1.25/delta))/epsilon
//! for the privacy budgets used throughout, checks the empirical standard
//! deviation of a noised update against sensitivity * sigma, then mounts
//! the optimization attack against noised single-image gradients: smaller
//! epsilon means more noise and worse reconstructions.
//!
//!     cargo run --release -p flrsp --example dp_noise [images] [iterations]

use flrsp::attacks::{optimization_attack, AttackConfig, InterceptedRound};
use flrsp::data::synthetic_blobs;
use flrsp::fl::Defense;
use flrsp::metrics::{median, ssim, SsimParams};
use flrsp::models::{desk_attack_mlp, Model, ModelSpec};
use flrsp::privacy::{dp_noise_stream, dp_sigma, DpConfig};
use flrsp::Result;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let images: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(15);
    let iterations: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(2000);

    let delta = 0.5;
    println!("noise multiplier, delta = {delta}:");
    for epsilon in [1.0, 2.0, 4.0] {
        println!(
            "  epsilon {epsilon}: sigma = {:.4}",
            dp_sigma(epsilon, delta)?
        );
    }

    let seed = 42;
    let spec = ModelSpec::Mlp(desk_attack_mlp(4));
    let model = Model::build(&spec, seed)?;
    let global = model.init_params();
    let data = synthetic_blobs(4, images, 8, 8, 0.1, seed)?;

    // Desk-scale sensitivity: about a twelfth of this fixture's gradient
    // RMS, so the noise perturbs rather than buries the signal.
    let sensitivity = 0.0025;
    let (_, g0) = model.loss_and_grads(&global, data.image(0), data.label(0))?;
    let rms = (g0.scalars().map(|v| v * v).sum::<f64>() / g0.num_scalars() as f64).sqrt();
    println!("\ngradient RMS {rms:.6}, sensitivity {sensitivity}");

    let cfg1 = DpConfig {
        epsilon: 1.0,
        delta,
        sensitivity,
        seed,
    };
    let noised = dp_noise_stream(&g0, &cfg1, &[0, 0])?;
    let diffs: Vec<f64> = noised
        .scalars()
        .zip(g0.scalars())
        .map(|(a, b)| a - b)
        .collect();
    let std = (diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64).sqrt();
    println!(
        "empirical noise std {std:.6} vs sensitivity*sigma {:.6} (epsilon 1)",
        sensitivity * dp_sigma(1.0, delta)?
    );

    println!("\noptimization attack vs noised gradients ({images} images, {iterations} iters):");
    for epsilon in [1.0, 2.0, 4.0] {
        let mut scores = Vec::with_capacity(images);
        for (i, (x, label)) in data.samples().enumerate() {
            let (_, grads) = model.loss_and_grads(&global, x, label)?;
            let dp = DpConfig {
                epsilon,
                delta,
                sensitivity,
                seed,
            };
            let update = dp_noise_stream(&grads, &dp, &[0, i as u64])?;
            let intercepted = InterceptedRound {
                global: global.clone(),
                update,
                label,
                defense: Defense::Dp {
                    epsilon,
                    delta,
                    sensitivity,
                },
            };
            let attack = AttackConfig {
                iterations,
                attempts: 4,
                seed: seed ^ i as u64,
                ..AttackConfig::default()
            };
            let rec = optimization_attack(&intercepted, &model, &attack)?;
            let recon = rec.image.reshaped(x.shape().to_vec())?;
            scores.push(ssim(x, &recon, &SsimParams::default())?);
        }
        println!("  epsilon {epsilon}: median ssim {:.4}", median(&scores)?);
    }
    println!("\n(tighter budgets mean more noise and less leakage)");
    Ok(())
}
