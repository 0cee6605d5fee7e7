//! Thin command-line front end over the library. Each subcommand maps to
//! one harness entry point; all heavy lifting lives in `flrsp` itself.
//!
//! Exit codes: 0 success, 2 configuration or file-format problems,
//! 3 numerical failures during training or attack, 1 anything else.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use flrsp::attacks::AttackConfig;
use flrsp::error::Error;
use flrsp::fl::Defense;
use flrsp::harness::{
    analyze_update_ratio, format_update_ratio_table, load_config, run_experiment,
    write_update_ratio_csv, AttackChoice,
};
use flrsp::report::{svg_box_plot, svg_line_plot};

#[derive(Parser)]
#[command(
    name = "flrsp",
    about = "Federated learning with randomly selected parameter sharing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackFlag {
    April,
    Opt,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config into an output directory.
    Train {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output run directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Override the training seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-run an existing run directory with an attack enabled.
    Attack {
        /// Run directory containing config.json from a previous train.
        #[arg(long)]
        run: PathBuf,
        /// Which attack to mount.
        #[arg(long, value_enum)]
        attack: AttackFlag,
        /// Number of target images (optimization and april).
        #[arg(long)]
        images: Option<usize>,
        /// Optimizer iterations per attempt (optimization only).
        #[arg(long)]
        iterations: Option<usize>,
        /// Independent restarts, best final objective wins (optimization only).
        #[arg(long)]
        attempts: Option<usize>,
    },
    /// Print the update-count comparison G(f) for FLRSP, frozen weights,
    /// and standard FL, with a Monte-Carlo check.
    Analyze {
        /// Pull rounds/clients/R from this run directory's config.json.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Total rounds M.
        #[arg(long, default_value_t = 10)]
        m: usize,
        /// Clients per round N.
        #[arg(long, default_value_t = 5)]
        n: usize,
        /// Zero probability R.
        #[arg(long, default_value_t = 0.2)]
        r: f64,
        /// Monte-Carlo trials.
        #[arg(long, default_value_t = 10000)]
        trials: usize,
        /// Monte-Carlo seed.
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Regenerate the SVG plots of a run directory from its CSV plot data.
    Plot {
        /// Run directory with plot_accuracy.csv / plot_ssim_quartiles.csv.
        #[arg(long)]
        run: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) | Error::Json(_) | Error::Format { .. } => ExitCode::from(2),
                Error::Numerical { .. } => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn dispatch(command: Command) -> Result<(), Error> {
    match command {
        Command::Train { config, out, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.seeds.root = seed;
            }
            let artifacts = run_experiment(&cfg, &out)?;
            println!(
                "trained {} rounds, final accuracy {:.4}, wrote {}",
                artifacts.history.records.len(),
                artifacts.history.final_accuracy(),
                artifacts.dir.display()
            );
            if let Some(report) = artifacts.attack {
                println!(
                    "attack {} vs {}: median ssim {:.4}",
                    report.attack,
                    report.defense.name(),
                    report.median_ssim
                );
            }
            Ok(())
        }
        Command::Attack {
            run,
            attack,
            images,
            iterations,
            attempts,
        } => {
            let mut cfg = load_config(run.join("config.json"))?;
            cfg.attack = match attack {
                AttackFlag::April => AttackChoice::April,
                AttackFlag::Opt => {
                    let mut config = AttackConfig::default();
                    if let Some(iterations) = iterations {
                        config.iterations = iterations;
                    }
                    if let Some(attempts) = attempts {
                        config.attempts = attempts;
                    }
                    AttackChoice::Optimization { config }
                }
            };
            if let Some(images) = images {
                cfg.attack_images = images;
            }
            let artifacts = run_experiment(&cfg, &run)?;
            let report = artifacts
                .attack
                .expect("attack was configured, a report must exist");
            println!(
                "attack {} vs {}: median ssim {:.4} over {} images ({} degenerate)",
                report.attack,
                report.defense.name(),
                report.median_ssim,
                report.images.len(),
                report.images.iter().filter(|i| i.degenerate).count()
            );
            Ok(())
        }
        Command::Analyze {
            run,
            mut m,
            mut n,
            mut r,
            trials,
            seed,
        } => {
            let out_csv = run.as_ref().map(|d| d.join("update_ratio.csv"));
            if let Some(dir) = run {
                let cfg = load_config(dir.join("config.json"))?;
                m = cfg.epochs;
                n = cfg.clients;
                if let Defense::Flrsp { r: cfg_r } = cfg.defense {
                    r = cfg_r;
                }
            }
            let rows = analyze_update_ratio(m, n, r, trials, seed)?;
            println!("update counts over M={m} rounds, N={n} clients, R={r}:");
            print!("{}", format_update_ratio_table(&rows));
            if let Some(path) = out_csv {
                write_update_ratio_csv(&path, &rows)?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Plot { run } => {
            let mut wrote = Vec::new();
            let accuracy = run.join("plot_accuracy.csv");
            if accuracy.exists() {
                let series = read_series_csv(&accuracy)?;
                let svg = svg_line_plot("accuracy by round", "round", "accuracy", &series)?;
                fs::write(run.join("accuracy.svg"), svg)?;
                wrote.push("accuracy.svg");
            }
            let quartiles = run.join("plot_ssim_quartiles.csv");
            if quartiles.exists() {
                let rows = read_quartiles_csv(&quartiles)?;
                let svg = svg_box_plot("reconstruction SSIM", "ssim", &rows)?;
                fs::write(run.join("ssim_box.svg"), svg)?;
                wrote.push("ssim_box.svg");
            }
            if wrote.is_empty() {
                return Err(Error::Config(format!(
                    "no plot data found in {}",
                    run.display()
                )));
            }
            println!("wrote {} in {}", wrote.join(", "), run.display());
            Ok(())
        }
    }
}

/// Read back a plot-series CSV (`x,label1,label2,...`) into labeled
/// (x, y) point lists.
fn read_series_csv(path: &PathBuf) -> Result<Vec<(String, Vec<(f64, f64)>)>, Error> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config(format!("{}: empty plot data", path.display())))?;
    let labels: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
    if labels.is_empty() {
        return Err(Error::Config(format!(
            "{}: no series columns",
            path.display()
        )));
    }
    let mut series: Vec<(String, Vec<(f64, f64)>)> =
        labels.into_iter().map(|l| (l, Vec::new())).collect();
    for line in lines.filter(|l| !l.is_empty()) {
        let mut fields = line.split(',');
        let x: f64 = parse_field(fields.next(), path)?;
        for slot in series.iter_mut() {
            let y: f64 = parse_field(fields.next(), path)?;
            slot.1.push((x, y));
        }
    }
    Ok(series)
}

/// Read back a quartile CSV (`cell,min,q1,median,q3,max`).
fn read_quartiles_csv(path: &PathBuf) -> Result<Vec<(String, [f64; 5])>, Error> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let mut fields = line.split(',');
        let label = fields
            .next()
            .ok_or_else(|| Error::Config(format!("{}: missing cell label", path.display())))?
            .to_string();
        let mut q = [0.0; 5];
        for slot in q.iter_mut() {
            *slot = parse_field(fields.next(), path)?;
        }
        rows.push((label, q));
    }
    Ok(rows)
}

fn parse_field(field: Option<&str>, path: &PathBuf) -> Result<f64, Error> {
    field
        .ok_or_else(|| Error::Config(format!("{}: short row in plot data", path.display())))?
        .parse::<f64>()
        .map_err(|e| Error::Config(format!("{}: bad number in plot data: {e}", path.display())))
}
