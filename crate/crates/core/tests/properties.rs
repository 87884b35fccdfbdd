//! Invariants checked over generated inputs, through the public API only.

use std::collections::BTreeMap;

use proptest::prelude::*;

use vmenclave::channel::ChannelStatus;
use vmenclave::harness::campaigns::{failure_injection_campaign, lifo_campaign, round_trip_campaign};
use vmenclave::harness::fuzz::{fuzz_with, FuzzConfig};
use vmenclave::harness::sim::{SimConfig, Simulation};
use vmenclave::harness::trace::TraceEvent;
use vmenclave::hypervisor::HvEvent;
use vmenclave::machine::{FrameNo, MachineConfig, PAGE_SIZE};
use vmenclave::stage2::{Access, FaultKind, IpaPage};
use vmenclave::ta_runtime::builtin_image;

fn traced_fuzz(ops: u64, seed: u64) -> Vec<TraceEvent> {
    let report = fuzz_with(FuzzConfig { keep_trace: true, ..FuzzConfig::new(ops, seed) });
    assert!(report.pass(), "{report}");
    report.trace
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn ledger_never_decreases_and_steps_are_dense(seed in any::<u64>()) {
        let trace = traced_fuzz(300, seed);
        for (i, pair) in trace.windows(2).enumerate() {
            prop_assert!(pair[1].ledger.dominates(&pair[0].ledger), "ledger went back at record {i}");
            prop_assert_eq!(pair[1].step, pair[0].step + 1);
        }
    }

    #[test]
    fn every_hypercall_and_switch_is_traced(seed in any::<u64>()) {
        let trace = traced_fuzz(300, seed);
        let last = trace.last().expect("fuzz always traces something").ledger;
        let count = |kind: &str| trace.iter().filter(|e| e.event.kind() == kind).count() as u64;
        prop_assert_eq!(count("hypercall"), last.hypercalls);
        prop_assert_eq!(count("context_switch"), last.ctx_switches);
    }

    #[test]
    fn channel_status_follows_the_protocol(seed in any::<u64>()) {
        let trace = traced_fuzz(400, seed);
        let mut last: BTreeMap<FrameNo, ChannelStatus> = BTreeMap::new();
        let mut steps = 0;
        for e in &trace {
            let HvEvent::Channel { frame: Some(frame), status, .. } = &e.event else { continue };
            let next = ChannelStatus::from_u32(*status).expect("known status");
            // Idle only comes from (re)initialising a fresh channel
            if next != ChannelStatus::Idle {
                let prev = last.get(frame).copied();
                prop_assert!(
                    prev.is_some_and(|p| p.may_become(next)),
                    "step {}: {:?} -> {:?} on {}", e.step, prev, next, frame
                );
                steps += 1;
            }
            last.insert(*frame, next);
        }
        prop_assert!(steps > 0);
    }

    #[test]
    fn translation_preserves_the_page_offset(pages in 2u32..24, probes in prop::collection::vec((any::<u64>(), 0u64..4096), 1..40)) {
        let mut sim = Simulation::new(SimConfig::with_machine(256, 1));
        let fd = sim.create(&builtin_image("echo", pages, 1)).unwrap();
        let vm = sim.vm_of(fd).unwrap();
        let table = &sim.hv.vm(vm).unwrap().stage2;
        let mapped: Vec<IpaPage> = table.entries().map(|(p, _)| p).collect();
        for (pick, offset) in probes {
            let page = mapped[(pick % mapped.len() as u64) as usize];
            let ipa = page.base() + offset;
            let first = table.translate(ipa, Access::Read);
            // pure: the same question gets the same answer
            prop_assert_eq!(first, table.translate(ipa, Access::Read));
            let pa = first.unwrap();
            prop_assert_eq!(pa % PAGE_SIZE as u64, offset);
            prop_assert_eq!(pa - offset, table.get(page).unwrap().frame.base());
        }
    }

    #[test]
    fn primary_never_reaches_private_pages(pages in 2u32..32, picks in prop::collection::vec((any::<u64>(), 0usize..4096, any::<bool>()), 1..32)) {
        let mut sim = Simulation::new(SimConfig::with_machine(256, 1));
        let fd = sim.create(&builtin_image("echo", pages, 1)).unwrap();
        let private = sim.os.enclave(fd).unwrap().handle.private_pages.clone();
        for (pick, offset, write) in picks {
            let page = private[(pick % private.len() as u64) as usize];
            let ipa = page.base() + offset as u64;
            let fault = if write {
                sim.primary_write(ipa, &[0xee]).unwrap_err()
            } else {
                sim.primary_read(ipa, 1).unwrap_err()
            };
            prop_assert_eq!(fault.kind, FaultKind::Unmapped);
            prop_assert_eq!(fault.ipa, ipa);
        }
        prop_assert!(sim.violations().is_empty(), "{:?}", sim.violations());
    }

    #[test]
    fn channel_is_the_same_memory_on_both_sides(pages in 2u32..16, chan in 1u32..4) {
        let mut sim = Simulation::new(SimConfig::with_machine(256, 1));
        let fd = sim.create(&builtin_image("echo", pages, chan)).unwrap();
        let handle = sim.os.enclave(fd).unwrap().handle.clone();
        let primary = &sim.hv.primary().stage2;
        let enclave = &sim.hv.vm(handle.vm).unwrap().stage2;
        let base = handle.enclave_channel_base();
        prop_assert_eq!(handle.channel_pages.len(), chan as usize);
        for (i, p) in handle.channel_pages.iter().enumerate() {
            let theirs = IpaPage(base.0 + i as u64);
            for access in [Access::Read, Access::Write] {
                prop_assert_eq!(primary.translate(p.base(), access).unwrap(), enclave.translate(theirs.base(), access).unwrap());
            }
            // nobody executes out of the channel
            prop_assert!(enclave.translate(theirs.base(), Access::Execute).is_err());
        }
        for p in &handle.private_pages {
            prop_assert!(primary.get(*p).is_none());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn short_lifo_campaigns_agree_with_the_model(seed in any::<u64>()) {
        let r = lifo_campaign(60, seed);
        prop_assert!(r.pass(), "{:?}", r.first_failures);
    }

    #[test]
    fn short_round_trip_campaigns_restore_the_primary(seed in any::<u64>()) {
        let r = round_trip_campaign(8, seed);
        prop_assert!(r.pass(), "{:?}", r.first_failures);
    }

    #[test]
    fn short_injection_campaigns_change_nothing(seed in any::<u64>()) {
        let r = failure_injection_campaign(22, seed);
        prop_assert!(r.pass(), "{:?}", r.first_failures);
    }
}

#[test]
fn machine_size_bounds_the_reachable_frames() {
    let sim = Simulation::new(SimConfig { machine: MachineConfig { frames: 64, pcpus: 1 }, ..SimConfig::default() });
    let primary = &sim.hv.primary().stage2;
    assert!(primary.frames().all(|f| sim.hv.machine().contains(f)));
    assert!(primary.translate(64 * PAGE_SIZE as u64, Access::Read).is_err());
}
