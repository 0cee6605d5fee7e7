//! Client data partitioning: IID versus Dirichlet label skew.
//!
//! Splits one dataset across five clients three ways and prints each
//! client's per-class sample counts. IID gives every client the same label
//! mix; Dirichlet with small alpha concentrates each class on a few
//! clients; large alpha converges back to IID proportions.
//!
//!     cargo run --release -p flrsp --example dirichlet_partition [alpha]

use flrsp::data::{load_dataset, partition_datasets, DatasetSpec, PartitionScheme};
use flrsp::Result;

fn main() -> Result<()> {
    let alpha: f64 = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(0.1);

    let seed = 42;
    let classes = 4;
    let spec = DatasetSpec::Synthetic {
        classes,
        count: 200,
        height: 8,
        width: 8,
        noise: 0.1,
    };
    let data = load_dataset(&spec, seed)?;

    let schemes = [
        ("iid".to_string(), PartitionScheme::Iid),
        (
            format!("dirichlet alpha={alpha}"),
            PartitionScheme::Dirichlet { alpha },
        ),
        (
            "dirichlet alpha=1000".to_string(),
            PartitionScheme::Dirichlet { alpha: 1000.0 },
        ),
    ];

    for (name, scheme) in schemes {
        let shards = partition_datasets(&data, 5, &scheme, seed)?;
        println!("\n{name}: per-client class counts");
        println!(
            "  client   {}  total",
            (0..classes).map(|c| format!("c{c:<4}")).collect::<String>()
        );
        for (i, shard) in shards.iter().enumerate() {
            let mut counts = vec![0usize; classes];
            for (_, label) in shard.samples() {
                counts[label] += 1;
            }
            let row: String = counts.iter().map(|c| format!("{c:<5}")).collect();
            println!("  {i:>6}   {row}  {}", shard.len());
        }
        let sizes: Vec<usize> = shards.iter().map(|s| s.len()).collect();
        let total: usize = sizes.iter().sum();
        println!(
            "  shard sizes {sizes:?} (sum {total}, dataset {})",
            data.len()
        );
    }
    Ok(())
}
