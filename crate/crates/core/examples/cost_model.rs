//! Ledger-unit micro-benchmarks: create, invoke and destroy across enclave
//! sizes, with the breakdown of one cycle at each size.

use vmenclave::harness::bench::bench;

fn main() {
    let sizes: Vec<u32> = match std::env::args().nth(1) {
        Some(list) => list.split(',').map(|s| s.trim().parse().expect("page count")).collect(),
        None => vec![16, 64, 256, 1024],
    };
    let report = bench(&sizes);
    println!("{report}\n");
    for r in &report.rows {
        println!("{} pages", r.pages);
        println!("  create  {:?}", r.create_ledger);
        println!("  invoke  {:?}", r.invoke_ledger);
        println!("  destroy {:?}", r.destroy_ledger);
    }
}
