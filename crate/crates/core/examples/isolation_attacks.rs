//! The fixed adversary playbook, then the same playbook against a
//! hypervisor that forgets to zero pages it hands back.

use vmenclave::harness::attack::{attack_suite, attack_suite_with, AttackConfig};
use vmenclave::hypervisor::Mutations;

fn main() {
    let report = attack_suite();
    println!("{report}\n");

    let broken = attack_suite_with(AttackConfig { mutations: Mutations { skip_zeroize: true }, ..AttackConfig::default() });
    println!("with zeroization disabled:\n{broken}");
    assert!(report.all_contained() && !broken.all_contained());
}
