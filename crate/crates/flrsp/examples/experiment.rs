//! A full experiment cell through the harness: train, intercept, attack,
//! and report into a reproducible run directory.
//!
//! Configures one FedSGD run with random parameter selection, mounts the
//! optimization attack against the final round, and writes every artifact
//! a run produces: config.json, metrics.csv, the intercepted fixtures,
//! attacks.json, summary.json, reconstruction images, and plot files.
//! Rerunning into a second directory yields byte-identical reports.
//!
//!     cargo run --release -p flrsp --example experiment [out_dir]

use flrsp::attacks::AttackConfig;
use flrsp::fl::Defense;
use flrsp::harness::{run_experiment, AttackChoice, ExperimentConfig};
use flrsp::models::{desk_attack_mlp, ModelSpec};
use flrsp::Result;

fn main() -> Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "runs/demo".to_string());

    let mut cfg = ExperimentConfig::baseline(ModelSpec::Mlp(desk_attack_mlp(4)));
    cfg.epochs = 1; // attack the first round, where inversion is easiest
    cfg.defense = Defense::Flrsp { r: 0.5 };
    cfg.attack = AttackChoice::Optimization {
        config: AttackConfig {
            iterations: 400,
            attempts: 2,
            ..AttackConfig::default()
        },
    };
    cfg.attack_images = 5;

    println!(
        "running {} -> {out}",
        match &cfg.defense {
            Defense::Flrsp { r } => format!("flrsp R={r} + optimization attack"),
            other => other.name().to_string(),
        }
    );
    let artifacts = run_experiment(&cfg, &out)?;
    let report = artifacts.attack.expect("attack configured");
    println!(
        "final accuracy {:.4}; attack median ssim {:.4} over {} images",
        artifacts.history.final_accuracy(),
        report.median_ssim,
        report.images.len()
    );
    for img in &report.images {
        println!(
            "  image {:>2} label {}  ssim {:.4}  {}",
            img.image_index, img.label, img.ssim, img.reconstruction
        );
    }
    println!("\nartifacts in {}:", artifacts.dir.display());
    let mut names: Vec<String> = std::fs::read_dir(&artifacts.dir)?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect();
    names.sort();
    for name in names {
        println!("  {name}");
    }
    Ok(())
}
