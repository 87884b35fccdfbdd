//! Random walk over the whole system with every oracle enabled.
//!
//! `cargo run --release --example fuzz -- [ops] [seed]`

use vmenclave::harness::fuzz::fuzz;

fn main() {
    let mut args = std::env::args().skip(1);
    let ops = args.next().and_then(|a| a.parse().ok()).unwrap_or(10_000);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(42);
    let started = std::time::Instant::now();
    let report = fuzz(ops, seed);
    println!("{} ops with seed {seed} in {:.2?}", report.ops_run, started.elapsed());
    println!("{:#?}", report.stats);
    match report.failure {
        None => println!("pass"),
        Some(f) => println!("FAIL at op {}: {} ({}: {})", f.op, f.action, f.violation.oracle, f.violation.detail),
    }
}
