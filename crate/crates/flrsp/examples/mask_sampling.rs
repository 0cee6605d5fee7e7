//! The random-selection mechanism itself: seeded masks and the
//! mask-normalized aggregation rule.
//!
//! Shows that (1) each client/round mask zeroes roughly a fraction R of
//! coordinates, (2) masks are deterministic per (client, round, seed) but
//! independent across both, and (3) the server average divides each
//! coordinate by the number of clients that actually shared it, so a
//! coordinate shared by anyone moves by the mean of the shared values and a
//! coordinate shared by no one keeps its old value bit for bit.
//!
//!     cargo run --release -p flrsp --example mask_sampling

use flrsp::fl::{aggregate_fedsgd, mask_update, sample_mask, ClientUpdate, Defense};
use flrsp::params::ParamSet;
use flrsp::tensor::Tensor;
use flrsp::Result;

fn main() -> Result<()> {
    let seed = 42;
    let r = 0.3;
    let mut proto = ParamSet::new();
    proto.push("w", Tensor::zeros(&[100, 100]))?;

    println!("mask statistics, R = {r} (10,000 coordinates each):");
    for client in 0..3 {
        for round in 0..2 {
            let mask = sample_mask(r, &proto, client, round, seed)?;
            println!(
                "  client {client} round {round}: zero fraction {:.4}",
                mask.zero_fraction()
            );
        }
    }

    let m1 = sample_mask(r, &proto, 0, 0, seed)?;
    let m2 = sample_mask(r, &proto, 0, 0, seed)?;
    let m3 = sample_mask(r, &proto, 1, 0, seed)?;
    println!(
        "\nsame (client, round, seed) redraw identical: {}",
        m1.bits.max_abs_diff(&m2.bits) == 0.0
    );
    let overlap = m1
        .bits
        .scalars()
        .zip(m3.bits.scalars())
        .filter(|(a, b)| *a == 0.0 && *b == 0.0)
        .count() as f64
        / m1.bits.num_scalars() as f64;
    println!(
        "different clients zero the same coordinate at rate {overlap:.4} \
         (independent draws predict R^2 = {:.4})",
        r * r
    );

    // Worked aggregation: three clients, one coordinate, gradient 1.0 each,
    // learning rate 1.0. Masks (1,1,0) leave two contributors, so the step
    // is the mean of the two shared values, not the three-client mean.
    let w = param_scalar(2.0)?;
    let grads = param_scalar(1.0)?;
    let mut updates = Vec::new();
    for (client, keep) in [(0usize, 1.0), (1, 1.0), (2, 0.0)] {
        let mut mask = sample_mask(0.0, &grads, client, 0, seed)?;
        mask.bits.set("w", Tensor::new(vec![1], vec![keep])?)?;
        updates.push(ClientUpdate {
            client,
            payload: mask_update(&grads, &mask)?,
            mask,
        });
    }
    let next = aggregate_fedsgd(&w, &updates, 1.0)?;
    println!(
        "\nworked FedSGD step: w=2.0, grads (1,1,masked), eta=1 -> {}",
        next.tensor("w")?.data()[0]
    );
    println!("(division by the two contributors, not by all three clients)");

    // A coordinate no one shares is bit-identical to the previous value.
    let all_masked: Vec<ClientUpdate> = (0..3)
        .map(|client| -> Result<ClientUpdate> {
            let mask = sample_mask(1.0, &grads, client, 0, seed)?;
            Ok(ClientUpdate {
                client,
                payload: mask_update(&grads, &mask)?,
                mask,
            })
        })
        .collect::<Result<_>>()?;
    let unchanged = aggregate_fedsgd(&w, &all_masked, 1.0)?;
    println!(
        "all clients withhold -> value preserved exactly: {}",
        unchanged.tensor("w")?.data()[0].to_bits() == 2.0f64.to_bits()
    );
    println!(
        "\ndefense name in configs: {:?}",
        Defense::Flrsp { r }.name()
    );
    Ok(())
}

fn param_scalar(v: f64) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    p.push("w", Tensor::new(vec![1], vec![v])?)?;
    Ok(p)
}
