//! FedSGD training with and without random parameter selection.
//!
//! Trains the same MLP twice on an IID five-client split of a synthetic
//! blob dataset: once with full sharing, once with each client withholding
//! half of its gradient coordinates per round. Prints the accuracy curves,
//! the rounds each arm needs to reach 90% test accuracy, and how the
//! measured slowdown compares to the effective-learning-rate model
//! eta' = eta * (1 - R^N).
//!
//!     cargo run --release -p flrsp --example train_fedsgd [epochs]

use flrsp::data::{load_dataset, partition_datasets, DatasetSpec, PartitionScheme};
use flrsp::fl::{effective_lr, run_training, Aggregation, Defense, TrainConfig};
use flrsp::models::{desk_mlp, ModelSpec};
use flrsp::Result;

fn main() -> Result<()> {
    let epochs: usize = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(30);

    let seed = 42;
    let clients = 5;
    let r = 0.5;
    let train_spec = DatasetSpec::Synthetic {
        classes: 4,
        count: 200,
        height: 8,
        width: 8,
        noise: 0.1,
    };
    let train = load_dataset(&train_spec, seed)?;
    let test_spec = DatasetSpec::Synthetic {
        classes: 4,
        count: 100,
        height: 8,
        width: 8,
        noise: 0.1,
    };
    let test = load_dataset(&test_spec, 4242)?;
    let shards = partition_datasets(&train, clients, &PartitionScheme::Iid, seed)?;

    let base = TrainConfig {
        model: ModelSpec::Mlp(desk_mlp(4)),
        aggregation: Aggregation::FedSgd,
        defense: Defense::None,
        clients,
        epochs,
        batch_size: 32,
        learning_rate: 0.1,
        seed,
        snapshot_every: None,
    };

    println!(
        "FedSGD, {clients} clients, batch 32, lr {}",
        base.learning_rate
    );
    let mut cells = Vec::new();
    for defense in [Defense::None, Defense::Flrsp { r }] {
        let cfg = TrainConfig {
            defense: defense.clone(),
            ..base.clone()
        };
        let history = run_training(&cfg, &shards, &test)?;
        let reach = history.rounds_to_accuracy(0.9);
        println!(
            "\n  defense {:<12} final accuracy {:.4}  reaches 0.9 at round {}",
            defense.name(),
            history.final_accuracy(),
            reach.map_or("never".into(), |k| (k + 1).to_string()),
        );
        for rec in history.records.iter().step_by((epochs / 10).max(1)) {
            println!(
                "    round {:>3}  accuracy {:.4}  masked {:.2}",
                rec.round, rec.accuracy, rec.masked_fraction
            );
        }
        cells.push((defense, reach));
    }

    let eta_eff = effective_lr(base.learning_rate, r, clients);
    println!(
        "\neffective learning rate under masking: {eta_eff:.6} vs raw {} \
         (ratio {:.5}; with N={clients} clients, R={r} barely slows the global step)",
        base.learning_rate,
        eta_eff / base.learning_rate
    );
    if let (Some(k0), Some(k1)) = (cells[0].1, cells[1].1) {
        println!(
            "measured rounds-to-0.9 ratio: {:.2} (masked {} vs standard {})",
            (k1 + 1) as f64 / (k0 + 1) as f64,
            k1 + 1,
            k0 + 1
        );
    }
    Ok(())
}
