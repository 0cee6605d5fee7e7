//! FedAvg training with and without random parameter selection.
//!
//! Under FedAvg each client trains locally for an epoch and shares its new
//! parameters; withheld coordinates fall back to the previous global value
//! at the server. Random selection therefore perturbs which clients
//! contribute to each coordinate's average rather than shrinking a gradient
//! step, and accuracy is nearly unaffected even at high masking rates.
//!
//!     cargo run --release -p flrsp --example train_fedavg [epochs]

use flrsp::data::{load_dataset, partition_datasets, DatasetSpec, PartitionScheme};
use flrsp::fl::{run_training, Aggregation, Defense, TrainConfig};
use flrsp::models::{desk_mlp, ModelSpec};
use flrsp::Result;

fn main() -> Result<()> {
    let epochs: usize = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(15);

    let seed = 42;
    let clients = 5;
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

    println!("FedAvg, {clients} clients, batch 32, one local epoch per round");
    for defense in [
        Defense::None,
        Defense::Flrsp { r: 0.5 },
        Defense::Flrsp { r: 0.8 },
    ] {
        let cfg = TrainConfig {
            model: ModelSpec::Mlp(desk_mlp(4)),
            aggregation: Aggregation::FedAvg,
            defense: defense.clone(),
            clients,
            epochs,
            batch_size: 32,
            learning_rate: 0.1,
            seed,
            snapshot_every: None,
        };
        let history = run_training(&cfg, &shards, &test)?;
        let label = match &defense {
            Defense::Flrsp { r } => format!("flrsp R={r}"),
            other => other.name().to_string(),
        };
        println!(
            "\n  defense {:<12} final accuracy {:.4}  reaches 0.9 at round {}",
            label,
            history.final_accuracy(),
            history
                .rounds_to_accuracy(0.9)
                .map_or("never".into(), |k| (k + 1).to_string()),
        );
        for rec in history.records.iter().step_by((epochs / 5).max(1)) {
            println!(
                "    round {:>3}  accuracy {:.4}  masked {:.2}",
                rec.round, rec.accuracy, rec.masked_fraction
            );
        }
    }
    Ok(())
}
