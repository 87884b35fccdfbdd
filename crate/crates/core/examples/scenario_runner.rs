//! Runs a scenario script (the bundled wallet one by default) and prints
//! the report and the first few trace records.

use vmenclave::harness::scenario::{run_scenario, Scenario};

fn main() {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/wallet.scn").to_string());
    let scenario = Scenario::load(&path).unwrap_or_else(|e| panic!("{path}: {e}"));
    let report = run_scenario(&scenario, None);
    println!("{report}\n");
    for e in report.trace.iter().take(8) {
        println!("{}", e.to_json());
    }
    println!("... {} records", report.trace.len());
}
