//! How often a parameter actually gets updated under random selection.
//!
//! With N clients each withholding a coordinate with probability R, a
//! coordinate misses a round only when all N clients withhold it — so over
//! M rounds the update count is Binomial(M, 1 - R^N). This table compares
//! that distribution against frozen-position sharing (a position is either
//! always or never updated) and standard FL (always M updates), with a
//! seeded Monte-Carlo run of the actual mask sampler as a check.
//!
//!     cargo run --release -p flrsp --example update_ratio [m] [n] [r] [trials]

use flrsp::harness::{analyze_update_ratio, format_update_ratio_table};
use flrsp::Result;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let m: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(10);
    let n: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(5);
    let r: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0.2);
    let trials: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(20000);

    println!("update-count distribution G(f): M={m} rounds, N={n} clients, R={r}");
    let rows = analyze_update_ratio(m, n, r, trials, 42)?;
    print!("{}", format_update_ratio_table(&rows));

    let all = rows.last().expect("table has m+1 rows");
    println!(
        "\na coordinate sees every one of the {m} updates with probability {:.5} \
         under random selection (standard FL: always).",
        all.flrsp
    );
    println!(
        "frozen positions are all-or-nothing: G(0)={:.3}, G({m})={:.3}.",
        rows[0].frozen, all.frozen
    );
    Ok(())
}
