//! Experiment orchestration: configuration, run directories, the
//! train-then-attack protocol, sweeps, and the update-ratio analysis.
//!
//! A run directory is reproducible byte-for-byte from the config copied
//! into it: every random choice flows from the config's named seeds, and
//! every writer in [`crate::report`] is deterministic.

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use serde::{Deserialize, Serialize};

use crate::attacks::{
    april_reconstruct, cosine_similarity, optimization_attack, AttackConfig, InterceptedRound,
    Reconstruction,
};
use crate::data::{load_dataset, partition_datasets, Dataset, DatasetSpec, PartitionScheme};
use crate::error::{Error, Result};
use crate::fl::{
    frozen_weights_ratio, mask_update, run_training, sample_mask, simulate_update_counts,
    update_ratio, Aggregation, Defense, RoundHistory, TrainConfig,
};
use crate::metrics::{median, ssim, SsimParams};
use crate::models::{Model, ModelSpec};
use crate::params::ParamSet;
use crate::privacy::{dp_noise_stream, fixed_position_filter, DpConfig};
use crate::report::{
    quartile_row, svg_box_plot, svg_line_plot, write_attacks_json, write_image, write_metrics_csv,
    write_quartiles_csv, write_series_csv, write_summary_json, AttackReport, CellSummary,
    ImageReport, Summary,
};

// ── configuration ─────────────────────────────────────────────────────────

/// The three independent randomness roots of an experiment: `root` drives
/// training (init, batches, masks, DP noise), `data` drives dataset
/// generation and partitioning, `attack` drives attacker initializations.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Seeds {
    pub root: u64,
    pub data: u64,
    pub attack: u64,
}

impl Default for Seeds {
    fn default() -> Seeds {
        Seeds {
            root: 42,
            data: 42,
            attack: 42,
        }
    }
}

/// Which attack, if any, runs against the intercepted rounds.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackChoice {
    #[default]
    None,
    /// Closed-form ViT reconstruction.
    April,
    /// Adversarial gradient matching. The embedded config's `seed` field is
    /// ignored; per-image seeds derive from the experiment's attack seed.
    Optimization {
        #[serde(default)]
        config: AttackConfig,
    },
}

impl AttackChoice {
    pub fn name(&self) -> &'static str {
        match self {
            AttackChoice::None => "none",
            AttackChoice::April => "april",
            AttackChoice::Optimization { .. } => "optimization",
        }
    }
}

fn default_partition() -> PartitionScheme {
    PartitionScheme::Iid
}

fn default_defense() -> Defense {
    Defense::None
}

fn default_attack_images() -> usize {
    15
}

fn default_true() -> bool {
    true
}

/// Everything one experiment cell needs. Reference defaults come from
/// [`ExperimentConfig::baseline`]; JSON configs may omit the defaulted fields.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    pub aggregation: Aggregation,
    #[serde(default = "default_defense")]
    pub defense: Defense,
    #[serde(default)]
    pub attack: AttackChoice,
    #[serde(default = "default_partition")]
    pub partition: PartitionScheme,
    pub clients: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub seeds: Seeds,
    /// How many training images the attack targets.
    #[serde(default = "default_attack_images")]
    pub attack_images: usize,
    /// Round whose incoming global parameters the attacker intercepts.
    /// Defaults to the first round of the final epoch (one round per epoch
    /// at desk scale, so: the last round).
    #[serde(default)]
    pub intercept_round: Option<usize>,
    /// Emit SVG plots alongside the plot-data CSVs.
    #[serde(default = "default_true")]
    pub plots: bool,
}

impl ExperimentConfig {
    /// Reference defaults for desk-scale runs: five clients, batch 32, a
    /// small synthetic dataset, FedSGD, no defense, no attack.
    pub fn baseline(model: ModelSpec) -> ExperimentConfig {
        ExperimentConfig {
            model,
            dataset: DatasetSpec::Synthetic {
                classes: 4,
                count: 200,
                height: 8,
                width: 8,
                noise: 0.1,
            },
            aggregation: Aggregation::FedSgd,
            defense: Defense::None,
            attack: AttackChoice::None,
            partition: PartitionScheme::Iid,
            clients: 5,
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.1,
            seeds: Seeds::default(),
            attack_images: default_attack_images(),
            intercept_round: None,
            plots: true,
        }
    }

    /// The round whose incoming parameters are intercepted.
    pub fn intercept_round(&self) -> usize {
        self.intercept_round
            .unwrap_or(self.epochs.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("clients must be at least 1".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if let Defense::Flrsp { r } = self.defense {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!(
                    "zero probability R must lie in [0,1], got {r}"
                )));
            }
        }
        if matches!(self.defense, Defense::FixedPosition) && self.model.as_vit().is_none() {
            return Err(Error::Config(
                "fixed-position defense requires a ViT model".into(),
            ));
        }
        if matches!(self.attack, AttackChoice::April) && self.model.as_vit().is_none() {
            return Err(Error::Config(
                "the april attack requires a ViT model".into(),
            ));
        }
        if !matches!(self.attack, AttackChoice::None) {
            if self.attack_images == 0 {
                return Err(Error::Config("attack_images must be at least 1".into()));
            }
            if self.intercept_round() >= self.epochs {
                return Err(Error::Config(format!(
                    "intercept round {} is outside the {} training rounds",
                    self.intercept_round(),
                    self.epochs
                )));
            }
        }
        Ok(())
    }
}

/// Read and validate a JSON experiment config.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

// ── run_experiment ────────────────────────────────────────────────────────

/// Everything a finished run produced, alongside the artifacts on disk.
#[derive(Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub history: RoundHistory,
    pub attack: Option<AttackReport>,
}

/// Train, intercept, attack, report.
///
/// Writes into `out`: `config.json` (the exact config, for reproduction),
/// `metrics.csv` (per-round accuracy/loss), `fixtures/` (the intercepted
/// global parameters, per-image defended updates, and metadata), and — when
/// an attack is configured — `attacks.json`, `summary.json`, per-image
/// PGM/PPM reconstructions, quartile tables, and plot files.
///
/// Interception model: at the configured round, the attacker sees the
/// incoming global parameters and one client's defended single-image update
/// (clients train with batch size one in intercepted rounds, the setting
/// under which gradient inversion is studied). Each of the `attack_images`
/// targets is treated as its own intercepted round, so mask and noise draws
/// are independent across images exactly as they would be across rounds.
pub fn run_experiment(cfg: &ExperimentConfig, out: impl AsRef<Path>) -> Result<RunArtifacts> {
    cfg.validate()?;
    let out = out.as_ref();
    fs::create_dir_all(out)?;
    let mut config_text = serde_json::to_string_pretty(cfg)?;
    config_text.push('\n');
    fs::write(out.join("config.json"), config_text)?;

    let data = load_dataset(&cfg.dataset, cfg.seeds.data)?;
    let shards = partition_datasets(&data, cfg.clients, &cfg.partition, cfg.seeds.data)?;
    let attacking = !matches!(cfg.attack, AttackChoice::None);
    let train_cfg = TrainConfig {
        model: cfg.model.clone(),
        aggregation: cfg.aggregation,
        defense: cfg.defense.clone(),
        clients: cfg.clients,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        seed: cfg.seeds.root,
        snapshot_every: if attacking { Some(1) } else { None },
    };
    let history = run_training(&train_cfg, &shards, &data)?;
    write_metrics_csv(out.join("metrics.csv"), &history)?;

    let accuracy_series: Vec<f64> = history.records.iter().map(|r| r.accuracy).collect();
    if cfg.plots {
        write_series_csv(
            out.join("plot_accuracy.csv"),
            "round",
            &[(cfg.defense.name().to_string(), accuracy_series.clone())],
        )?;
        let points: Vec<(f64, f64)> = accuracy_series
            .iter()
            .enumerate()
            .map(|(i, &a)| (i as f64, a))
            .collect();
        let svg = svg_line_plot(
            "accuracy by round",
            "round",
            "accuracy",
            &[(cfg.defense.name().to_string(), points)],
        )?;
        fs::write(out.join("accuracy.svg"), svg)?;
    }

    if !attacking {
        return Ok(RunArtifacts {
            dir: out.to_path_buf(),
            history,
            attack: None,
        });
    }

    let fixtures = out.join("fixtures");
    fs::create_dir_all(&fixtures)?;
    let global = params_entering_round(&history, cfg.intercept_round())?;
    global.save(fixtures.join("global.bin"))?;

    let report = attack_phase(cfg, &data, &global, out, &fixtures)?;
    let summary = Summary {
        cells: vec![CellSummary {
            cell: cell_label(cfg),
            attack: report.attack.clone(),
            defense: cfg.defense.clone(),
            median_ssim: report.median_ssim,
            private: report.median_ssim < 0.5,
            final_accuracy: history.final_accuracy(),
        }],
    };
    write_summary_json(out.join("summary.json"), &summary)?;
    Ok(RunArtifacts {
        dir: out.to_path_buf(),
        history,
        attack: Some(report),
    })
}

/// Global parameters entering the given round: the initial parameters for
/// round 0, otherwise the snapshot taken after the previous round.
fn params_entering_round(history: &RoundHistory, round: usize) -> Result<ParamSet> {
    if round == 0 {
        return Ok(history.init_params.clone());
    }
    history
        .snapshots
        .iter()
        .find(|(r, _)| *r == round - 1)
        .map(|(_, p)| p.clone())
        .ok_or_else(|| {
            Error::Config(format!(
                "no parameter snapshot before round {round}; rerun training"
            ))
        })
}

/// Human-readable cell label: defense plus its shared-noise knob.
fn cell_label(cfg: &ExperimentConfig) -> String {
    match &cfg.defense {
        Defense::Flrsp { r } => format!("flrsp R={r}"),
        Defense::Dp { epsilon, .. } => format!("dp eps={epsilon}"),
        other => other.name().to_string(),
    }
}

/// Run the configured attack against every target image, writing fixtures,
/// reconstructions, the attack report, and the SSIM quartile artifacts.
fn attack_phase(
    cfg: &ExperimentConfig,
    data: &Dataset,
    global: &ParamSet,
    out: &Path,
    fixtures: &Path,
) -> Result<AttackReport> {
    if cfg.attack_images > data.len() {
        return Err(Error::Config(format!(
            "attack_images {} exceeds dataset size {}",
            cfg.attack_images,
            data.len()
        )));
    }
    let model = Model::build(&cfg.model, cfg.seeds.root)?;
    let image_shape = data.image_shape().to_vec();
    let base_round = cfg.intercept_round();

    let mut images = Vec::with_capacity(cfg.attack_images);
    let mut scores = Vec::with_capacity(cfg.attack_images);
    for (i, (x, label)) in data.samples().take(cfg.attack_images).enumerate() {
        let (_, grads) = model.loss_and_grads(global, x, label)?;
        let round = base_round + i;
        let update = match &cfg.defense {
            Defense::None => grads,
            Defense::Flrsp { r } => {
                let mask = sample_mask(*r, &grads, 0, round, cfg.seeds.root)?;
                mask_update(&grads, &mask)?
            }
            Defense::Dp {
                epsilon,
                delta,
                sensitivity,
            } => {
                let dp = DpConfig {
                    epsilon: *epsilon,
                    delta: *delta,
                    sensitivity: *sensitivity,
                    seed: cfg.seeds.root,
                };
                dp_noise_stream(&grads, &dp, &[0, round as u64])?
            }
            Defense::FixedPosition => fixed_position_filter(&grads, &cfg.model)?,
        };
        update.save(fixtures.join(format!("update_{i:02}.bin")))?;
        let meta = serde_json::json!({
            "image_index": i,
            "label": label,
            "round": round,
            "defense": cfg.defense,
            "attack": cfg.attack.name(),
        });
        fs::write(
            fixtures.join(format!("meta_{i:02}.json")),
            format!("{}\n", serde_json::to_string_pretty(&meta)?),
        )?;

        let intercepted = InterceptedRound {
            global: global.clone(),
            update,
            label,
            defense: cfg.defense.clone(),
        };
        let rec = run_attack(cfg, &model, &intercepted, i)?;
        let reconstruction = rec.image.reshaped(image_shape.clone())?;
        let score = ssim(x, &reconstruction, &SsimParams::default())?;
        let recon_file = write_image(out, &format!("recon_{i:02}"), &reconstruction)?;
        write_image(out, &format!("truth_{i:02}"), x)?;
        scores.push(score);
        images.push(ImageReport {
            image_index: i,
            label,
            ssim: score,
            cosine: rec.cosine,
            iterations: rec.iterations,
            degenerate: rec.degenerate,
            reconstruction: recon_file,
        });
    }

    let report = AttackReport {
        attack: cfg.attack.name().to_string(),
        defense: cfg.defense.clone(),
        median_ssim: median(&scores)?,
        ssim_quartiles: crate::metrics::quartiles(&scores)?,
        images,
    };
    write_attacks_json(out.join("attacks.json"), &report)?;
    let quartile_rows = vec![quartile_row(cell_label(cfg), &scores)?];
    write_quartiles_csv(out.join("plot_ssim_quartiles.csv"), &quartile_rows)?;
    if cfg.plots {
        let svg = svg_box_plot("reconstruction SSIM", "ssim", &quartile_rows)?;
        fs::write(out.join("ssim_box.svg"), svg)?;
    }
    Ok(report)
}

/// Dispatch one intercepted round to the configured attack.
fn run_attack(
    cfg: &ExperimentConfig,
    model: &Model,
    intercepted: &InterceptedRound,
    image_index: usize,
) -> Result<Reconstruction> {
    match &cfg.attack {
        AttackChoice::None => Err(Error::Config("no attack configured".into())),
        AttackChoice::April => {
            let vit = cfg
                .model
                .as_vit()
                .ok_or_else(|| Error::Config("the april attack requires a ViT model".into()))?;
            april_reconstruct(intercepted, vit)
        }
        AttackChoice::Optimization { config } => {
            let per_image = AttackConfig {
                seed: cfg.seeds.attack ^ image_index as u64,
                ..*config
            };
            optimization_attack(intercepted, model, &per_image)
        }
    }
}

// ── sweeps ────────────────────────────────────────────────────────────────

/// Run several cells concurrently, each into `out_root/<name>`, and write a
/// combined `summary.json` at the root (cells in input order). Cell runs
/// are fully independent; a failure in any cell fails the sweep.
pub fn run_sweep(
    cells: &[(String, ExperimentConfig)],
    out_root: impl AsRef<Path>,
) -> Result<Summary> {
    let out_root = out_root.as_ref();
    fs::create_dir_all(out_root)?;
    {
        let mut names: Vec<&str> = cells.iter().map(|(n, _)| n.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != cells.len() {
            return Err(Error::Config("sweep cell names must be unique".into()));
        }
    }
    let artifacts: Vec<RunArtifacts> = thread::scope(|scope| {
        let handles: Vec<_> = cells
            .iter()
            .map(|(name, cfg)| {
                let dir = out_root.join(name);
                scope.spawn(move || run_experiment(cfg, dir))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .map_err(|_| Error::Config("sweep worker panicked".into()))?
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let cells_summary: Vec<CellSummary> = cells
        .iter()
        .zip(&artifacts)
        .map(|((name, cfg), art)| {
            let (median_ssim, private) = match &art.attack {
                Some(report) => (report.median_ssim, report.median_ssim < 0.5),
                None => (f64::NAN, false),
            };
            CellSummary {
                cell: name.clone(),
                attack: cfg.attack.name().to_string(),
                defense: cfg.defense.clone(),
                median_ssim,
                private,
                final_accuracy: art.history.final_accuracy(),
            }
        })
        .collect();
    // NaN medians (cells without attacks) serialize poorly; only include
    // attacked cells in the privacy summary, all cells in the table.
    let summary = Summary {
        cells: cells_summary
            .into_iter()
            .map(|mut c| {
                if c.median_ssim.is_nan() {
                    c.median_ssim = -1.0;
                }
                c
            })
            .collect(),
    };
    write_summary_json(out_root.join("summary.json"), &summary)?;
    Ok(summary)
}

// ── update-ratio analysis ─────────────────────────────────────────────────

/// One row of the update-count comparison: how often a parameter is updated
/// exactly `f` times in `m` rounds, under each sharing scheme.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct UpdateRatioRow {
    pub f: usize,
    pub flrsp: f64,
    pub frozen: f64,
    pub standard: f64,
    /// Monte-Carlo fraction of simulated parameters updated `f` times
    /// under FLRSP masking.
    pub monte_carlo: f64,
}

/// G(f) for FLRSP, frozen-weights FL, and standard FL side by side, plus a
/// seeded Monte-Carlo check of the FLRSP column.
pub fn analyze_update_ratio(
    m: usize,
    n: usize,
    r: f64,
    trials: usize,
    seed: u64,
) -> Result<Vec<UpdateRatioRow>> {
    if m == 0 || n == 0 || trials == 0 {
        return Err(Error::Config(
            "update-ratio analysis needs m, n, trials ≥ 1".into(),
        ));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Config(format!(
            "zero probability R must lie in [0,1], got {r}"
        )));
    }
    let histogram = simulate_update_counts(m, n, r, trials, seed)?;
    Ok((0..=m)
        .map(|f| UpdateRatioRow {
            f,
            flrsp: update_ratio(m, n, r, f),
            frozen: frozen_weights_ratio(m, n, r, f),
            standard: f64::from(f == m),
            monte_carlo: histogram[f] as f64 / trials as f64,
        })
        .collect())
}

/// Fixed-width text table of the update-ratio rows.
pub fn format_update_ratio_table(rows: &[UpdateRatioRow]) -> String {
    let mut out =
        String::from("  f      G(f) flrsp    G(f) frozen  G(f) standard    monte carlo\n");
    for row in rows {
        out.push_str(&format!(
            "{:>3}   {:>12.6} {:>14.6} {:>14.6} {:>14.6}\n",
            row.f, row.flrsp, row.frozen, row.standard, row.monte_carlo
        ));
    }
    out
}

/// CSV form of the update-ratio rows: `f,flrsp,frozen,standard,monte_carlo`.
pub fn write_update_ratio_csv(path: impl AsRef<Path>, rows: &[UpdateRatioRow]) -> Result<()> {
    let mut out = String::from("f,flrsp,frozen,standard,monte_carlo\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.f, row.flrsp, row.frozen, row.standard, row.monte_carlo
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

// ── attack cosine diagnostics ─────────────────────────────────────────────

/// Cosine similarity between the defended update the attacker saw and the
/// gradient of the reconstruction — the attacker's own objective value,
/// recomputed outside the attack for reporting.
pub fn reconstruction_cosine(
    model: &Model,
    intercepted: &InterceptedRound,
    reconstruction: &Reconstruction,
) -> Result<f64> {
    let (_, grads) = model.loss_and_grads(
        &intercepted.global,
        &reconstruction.image,
        intercepted.label,
    )?;
    cosine_similarity(&grads, &intercepted.update)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::MlpSpec;

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::baseline(ModelSpec::Mlp(MlpSpec {
            input_dim: 16,
            hidden_dims: vec![5],
            num_classes: 2,
            input_bias: true,
        }));
        cfg.dataset = DatasetSpec::Synthetic {
            classes: 2,
            count: 24,
            height: 4,
            width: 4,
            noise: 0.05,
        };
        cfg.clients = 2;
        cfg.epochs = 2;
        cfg.batch_size = 4;
        cfg.plots = false;
        cfg
    }

    fn tempdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "flrsp-harness-{tag}-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_nanos()
        ));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn config_roundtrip_with_defaults() {
        let text = r#"{
            "model": {"kind": "mlp", "input_dim": 16, "hidden_dims": [5], "num_classes": 2, "input_bias": true},
            "dataset": {"kind": "synthetic", "classes": 2, "count": 24, "height": 4, "width": 4},
            "aggregation": "fed_sgd",
            "clients": 2,
            "epochs": 2,
            "batch_size": 4,
            "learning_rate": 0.1
        }"#;
        let cfg: ExperimentConfig = serde_json::from_str(text).unwrap();
        assert_eq!(cfg.defense, Defense::None);
        assert_eq!(cfg.attack, AttackChoice::None);
        assert_eq!(cfg.partition, PartitionScheme::Iid);
        assert_eq!(cfg.seeds, Seeds::default());
        assert_eq!(cfg.attack_images, 15);
        assert_eq!(cfg.intercept_round(), 1);
        assert!(cfg.plots);
        let back: ExperimentConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validation_rejects_bad_combinations() {
        let mut cfg = tiny_config();
        cfg.clients = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_config();
        cfg.defense = Defense::Flrsp { r: 1.5 };
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_config();
        cfg.attack = AttackChoice::April;
        assert!(
            cfg.validate().is_err(),
            "april against an MLP must be rejected"
        );

        let mut cfg = tiny_config();
        cfg.attack = AttackChoice::Optimization {
            config: AttackConfig::default(),
        };
        cfg.intercept_round = Some(9);
        assert!(
            cfg.validate().is_err(),
            "intercept round beyond training must be rejected"
        );
    }

    #[test]
    fn train_only_run_gates_attack_artifacts() {
        let dir = tempdir("gate");
        let cfg = tiny_config();
        let artifacts = run_experiment(&cfg, &dir).unwrap();
        assert!(artifacts.attack.is_none());
        assert!(dir.join("metrics.csv").exists());
        assert!(dir.join("config.json").exists());
        assert!(!dir.join("attacks.json").exists());
        assert!(!dir.join("summary.json").exists());
        assert!(!dir.join("recon_00.pgm").exists());
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn attack_run_reports_and_reruns_identically() {
        let mut cfg = tiny_config();
        cfg.defense = Defense::Flrsp { r: 0.5 };
        cfg.attack = AttackChoice::Optimization {
            config: AttackConfig {
                iterations: 20,
                attempts: 1,
                ..AttackConfig::default()
            },
        };
        cfg.attack_images = 2;
        cfg.intercept_round = Some(0);

        let dir1 = tempdir("rerun-a");
        let dir2 = tempdir("rerun-b");
        let art1 = run_experiment(&cfg, &dir1).unwrap();
        let art2 = run_experiment(&cfg, &dir2).unwrap();
        let report = art1.attack.unwrap();
        assert_eq!(report.images.len(), 2);
        assert!(dir1.join("summary.json").exists());
        assert!(dir1.join("fixtures/global.bin").exists());
        assert!(dir1.join("fixtures/update_01.bin").exists());
        assert!(dir1.join("recon_01.pgm").exists());
        assert!(dir1.join("truth_00.pgm").exists());

        for file in [
            "metrics.csv",
            "attacks.json",
            "summary.json",
            "plot_ssim_quartiles.csv",
        ] {
            let b1 = fs::read(dir1.join(file)).unwrap();
            let b2 = fs::read(dir2.join(file)).unwrap();
            assert_eq!(b1, b2, "{file} differs between identical runs");
        }
        drop(art2);
        fs::remove_dir_all(dir1).unwrap();
        fs::remove_dir_all(dir2).unwrap();
    }

    #[test]
    fn sweep_runs_cells_and_summarizes() {
        let mut atk = tiny_config();
        atk.defense = Defense::Flrsp { r: 0.8 };
        atk.attack = AttackChoice::Optimization {
            config: AttackConfig {
                iterations: 10,
                attempts: 1,
                ..AttackConfig::default()
            },
        };
        atk.attack_images = 1;
        atk.intercept_round = Some(0);
        let plain = tiny_config();

        let root = tempdir("sweep");
        let summary = run_sweep(
            &[("flrsp".to_string(), atk), ("baseline".to_string(), plain)],
            &root,
        )
        .unwrap();
        assert_eq!(summary.cells.len(), 2);
        assert_eq!(summary.cells[0].cell, "flrsp");
        assert_eq!(
            summary.cells[1].median_ssim, -1.0,
            "no-attack cell sentinel"
        );
        assert!(root.join("summary.json").exists());
        assert!(root.join("flrsp/attacks.json").exists());
        assert!(root.join("baseline/metrics.csv").exists());
        fs::remove_dir_all(root).unwrap();
    }

    #[test]
    fn sweep_rejects_duplicate_names() {
        let cfg = tiny_config();
        let root = tempdir("dup");
        let err = run_sweep(
            &[("a".to_string(), cfg.clone()), ("a".to_string(), cfg)],
            &root,
        );
        assert!(err.is_err());
        fs::remove_dir_all(root).unwrap();
    }

    #[test]
    fn update_ratio_table_shape_and_mass() {
        let rows = analyze_update_ratio(10, 5, 0.2, 2000, 7).unwrap();
        assert_eq!(rows.len(), 11);
        let mass: f64 = rows.iter().map(|r| r.flrsp).sum();
        assert!((mass - 1.0).abs() < 1e-12);
        let mc_mass: f64 = rows.iter().map(|r| r.monte_carlo).sum();
        assert!((mc_mass - 1.0).abs() < 1e-12);
        assert_eq!(rows[10].standard, 1.0);
        assert_eq!(rows[0].standard, 0.0);
        // Headline comparison: FLRSP barely differs from standard FL.
        let expected = (1.0 - 0.2f64.powi(5)).powi(10);
        assert!((rows[10].flrsp - expected).abs() < 1e-12);
        assert!(rows[10].flrsp > 0.9968 && rows[10].flrsp < 0.9969);
        let table = format_update_ratio_table(&rows);
        assert!(table.lines().count() == 12);
    }

    #[test]
    fn intercept_round_snapshot_lookup() {
        let mut cfg = tiny_config();
        cfg.epochs = 3;
        cfg.defense = Defense::Flrsp { r: 0.2 };
        cfg.attack = AttackChoice::Optimization {
            config: AttackConfig {
                iterations: 5,
                attempts: 1,
                ..AttackConfig::default()
            },
        };
        cfg.attack_images = 1;
        cfg.intercept_round = None; // defaults to final round (2)
        assert_eq!(cfg.intercept_round(), 2);
        let dir = tempdir("snap");
        let artifacts = run_experiment(&cfg, &dir).unwrap();
        // The fixture global must equal the snapshot after round 1, not the
        // final parameters.
        let global = ParamSet::load(dir.join("fixtures/global.bin")).unwrap();
        let snap = &artifacts
            .history
            .snapshots
            .iter()
            .find(|(r, _)| *r == 1)
            .unwrap()
            .1;
        assert_eq!(global.max_abs_diff(snap), 0.0);
        assert!(global.max_abs_diff(&artifacts.history.final_params) > 0.0);
        fs::remove_dir_all(dir).unwrap();
    }
}
