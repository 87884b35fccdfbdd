//! Long randomized property campaigns, each against its own reference:
//!
//! * [`lifo_campaign`]: stacking operations vs [`StackModel`], plus the
//!   HEAD/TAIL link check after every operation
//! * [`round_trip_campaign`]: the primary's stage-2 table before create vs
//!   after destroy, for random donation shapes
//! * [`failure_injection_campaign`]: failing creates leave every stage-2
//!   table and the allocator exactly as they were

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::guest_os::{DriverError, FD_TABLE_CAPACITY, FIRST_FD};
use crate::harness::image::EnclaveImage;
use crate::harness::oracle::{self, StackModel};
use crate::harness::sim::{SimConfig, Simulation};
use crate::hypervisor::{
    EnclaveHandle, HvError, HvcOutcome, Hypercall, Hypervisor, HypervisorConfig, ImageMeta, IrqOutcome, VcpuId,
    PRIMARY_VM,
};
use crate::machine::{MachineConfig, PcpuId, PAGE_SIZE};
use crate::stage2::{IpaPage, Perms};
use crate::ta_runtime::{builtin_image, code_blob};

/// Mismatches kept in a report; the count is always exact.
const KEEP: usize = 10;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CampaignReport {
    pub cases: usize,
    /// Individual checks made across all cases.
    pub checks: usize,
    pub failed: usize,
    pub first_failures: Vec<String>,
    /// What the campaign actually exercised, so a vacuous pass shows.
    pub coverage: BTreeMap<&'static str, usize>,
}

impl CampaignReport {
    pub fn pass(&self) -> bool {
        self.cases > 0 && self.failed == 0
    }

    fn count(&mut self, what: &'static str, n: usize) {
        *self.coverage.entry(what).or_default() += n;
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.failed += 1;
            if self.first_failures.len() < KEEP {
                self.first_failures.push(what());
            }
        }
    }
}

fn create_raw(hv: &mut Hypervisor, pcpu: PcpuId, donated: Vec<IpaPage>, meta: ImageMeta) -> Result<EnclaveHandle, HvError> {
    let caller = hv.primary_vcpu(pcpu).expect("primary vcpu");
    match hv.dispatch(caller, Hypercall::CreateEnclave { donated, meta })? {
        HvcOutcome::Created(h) => Ok(h),
        other => panic!("create answered {other:?}"),
    }
}

pub fn lifo_campaign(sequences: usize, seed: u64) -> CampaignReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pcpus = 3;
    let mut hv = Hypervisor::new(HypervisorConfig {
        machine: MachineConfig { frames: 128, pcpus },
        ..HypervisorConfig::default()
    });
    let mut next_page = 8;
    let mut handles = Vec::new();
    for i in 0..9 {
        let donated = (next_page..next_page + 3).map(IpaPage).collect();
        next_page += 3;
        let pcpu = PcpuId(i % pcpus as u32);
        handles.push(create_raw(&mut hv, pcpu, donated, ImageMeta { mem_pages: 2, channel_pages: 1 }).unwrap());
    }
    let roots: Vec<VcpuId> = (0..pcpus as u32).map(|p| hv.primary_vcpu(PcpuId(p)).unwrap()).collect();
    let all: Vec<VcpuId> = roots.iter().copied().chain(handles.iter().map(|h| h.vcpu)).collect();
    let pinned = |hv: &Hypervisor, v: VcpuId| hv.vcpu(v).unwrap().pcpu;

    let mut model = StackModel::new(&hv);
    let mut report = CampaignReport::default();
    for seq in 0..sequences {
        let len = rng.random_range(1..=24);
        for op in 0..len {
            let pcpu = PcpuId(rng.random_range(0..pcpus as u32));
            let root = roots[pcpu.0 as usize];
            let top = model.top(pcpu);
            let (what, ok, expected) = match rng.random_range(0..100) {
                0..=29 => {
                    // invoke hypercall, usually from whoever is running
                    let stack = model.stack(pcpu).to_vec();
                    let caller = if rng.random_bool(0.9) { top } else { *stack.choose(&mut rng).unwrap() };
                    let h = handles.choose(&mut rng).unwrap();
                    let ok = hv.dispatch(caller, Hypercall::InvokeEnclave { handle: h.handle }).is_ok();
                    let expected = caller == root && model.push(pcpu, caller, h.vcpu, h.pcpu);
                    (format!("{caller} invokes {}", h.handle), ok, expected)
                }
                30..=54 => {
                    let child = *all.choose(&mut rng).unwrap();
                    let ok = hv.schedule_child(top, child).is_ok();
                    let expected = model.push(pcpu, top, child, pinned(&hv, child));
                    (format!("{top} schedules {child}"), ok, expected)
                }
                55..=74 => {
                    let ok = if rng.random_bool(0.5) {
                        hv.dispatch(top, Hypercall::EnclaveExit).is_ok()
                    } else {
                        hv.yield_to_parent(top).is_ok()
                    };
                    (format!("{top} exits"), ok, model.pop(pcpu, top))
                }
                _ => {
                    let target = *all.choose(&mut rng).unwrap();
                    let r = hv.deliver_interrupt(pcpu, target);
                    if pinned(&hv, target) != pcpu {
                        (format!("irq for {target} on {pcpu}"), r.is_ok(), false)
                    } else {
                        let popped = model.interrupt(pcpu, target);
                        let matches = match r {
                            Ok(IrqOutcome::Unwound { popped: got }) => {
                                report.count("unwinds", 1);
                                got == popped
                            }
                            Ok(IrqOutcome::Pending) => popped.is_empty(),
                            Err(_) => false,
                        };
                        hv.take_pending_irqs(target);
                        (format!("irq for {target} on {pcpu}"), true, matches)
                    }
                }
            };
            report.check(ok == expected, || format!("seq {seq} op {op}: {what}: hypervisor {ok}, model {expected}"));
            report.count(if ok { "accepted" } else { "refused" }, 1);
            let depth = model.stack(pcpu).len();
            if depth > report.coverage.get("max_depth").copied().unwrap_or(0) {
                report.coverage.insert("max_depth", depth);
            }
            let diff = model.compare(&hv);
            report.check(diff.is_empty(), || format!("seq {seq} op {op}: {what}: {diff:?}"));
            let links = oracle::stack_links(&hv);
            report.check(links.is_empty(), || format!("seq {seq} op {op}: {what}: {links:?}"));
        }
        // back to the roots before the next sequence
        for (p, root) in roots.iter().enumerate() {
            let pcpu = PcpuId(p as u32);
            hv.deliver_interrupt(pcpu, *root).unwrap();
            hv.take_pending_irqs(*root);
            model.interrupt(pcpu, *root);
        }
        hv.drain_events();
        report.cases += 1;
    }
    report
}

pub fn round_trip_campaign(shapes: usize, seed: u64) -> CampaignReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = 512u64;
    let mut hv = Hypervisor::new(HypervisorConfig {
        machine: MachineConfig { frames: frames as usize, pcpus: 2 },
        ..HypervisorConfig::default()
    });
    let mut report = CampaignReport::default();
    let identity_rwx = |hv: &Hypervisor| {
        let t = &hv.primary().stage2;
        t.len() == frames as usize
            && (0..frames).all(|i| t.get(IpaPage(i)).is_some_and(|m| m.frame.0 == i && m.perms == Perms::RWX))
    };
    report.check(identity_rwx(&hv), || "primary does not start identity-mapped".into());

    for shape in 0..shapes {
        // any pages in any order; extra pages beyond the image become private
        let n = rng.random_range(2..=48);
        let mut pool: Vec<u64> = (0..frames).collect();
        pool.shuffle(&mut rng);
        let donated: Vec<IpaPage> = pool[..n].iter().copied().map(IpaPage).collect();
        let channel = rng.random_range(1..=(n - 1).min(4)) as u32;
        let slack = rng.random_range(0..=(n as u32 - channel - 1).min(2));
        let meta = ImageMeta { mem_pages: n as u32 - channel - slack, channel_pages: channel };
        let pcpu = PcpuId(rng.random_range(0..2));
        for p in &donated {
            hv.vm_write(PRIMARY_VM, p.base(), &rng.random::<[u8; 32]>()).unwrap();
        }
        let before = hv.primary().stage2.snapshot();

        let h = match create_raw(&mut hv, pcpu, donated.clone(), meta) {
            Ok(h) => h,
            Err(e) => {
                report.check(false, || format!("shape {shape}: create of {n} pages failed: {e}"));
                continue;
            }
        };
        report.check(hv.primary().stage2.snapshot() != before, || format!("shape {shape}: create changed nothing"));
        for page in 0..n as u64 {
            let at = page * PAGE_SIZE as u64 + rng.random_range(0..PAGE_SIZE as u64 - 16);
            hv.vm_write(h.vm, at, &rng.random::<[u8; 16]>()).unwrap();
        }
        if rng.random_bool(0.5) {
            let root = hv.primary_vcpu(pcpu).unwrap();
            hv.dispatch(root, Hypercall::InvokeEnclave { handle: h.handle }).unwrap();
            hv.dispatch(h.vcpu, Hypercall::EnclaveExit).unwrap();
        }
        let root = hv.primary_vcpu(pcpu).unwrap();
        hv.dispatch(root, Hypercall::DestroyEnclave { handle: h.handle }).unwrap();

        let after = hv.primary().stage2.snapshot();
        report.count("pages", n);
        report.check(after == before, || format!("shape {shape}: {n} pages ({meta:?}) did not round trip"));
        report.check(identity_rwx(&hv), || format!("shape {shape}: primary no longer identity-mapped"));
        let dirty = oracle::nonzero_bytes(&hv, &donated);
        report.check(dirty == 0, || format!("shape {shape}: {dirty} nonzero bytes came back"));
        hv.drain_events();
        report.cases += 1;
    }
    report
}

/// Ways a create can be made to fail.
pub const FAILURE_KINDS: [&str; 11] = [
    "bad_meta",
    "too_small",
    "duplicate_page",
    "out_of_range",
    "donated_elsewhere",
    "shared_channel",
    "vm_table_full",
    "not_primary",
    "driver_no_memory",
    "driver_fd_table_full",
    "driver_vm_table_full",
];

/// Cycles through [`FAILURE_KINDS`]; coverage counts cases per kind.
pub fn failure_injection_campaign(cases: usize, seed: u64) -> CampaignReport {
    let mut report = CampaignReport::default();
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (case as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let kind = FAILURE_KINDS[case % FAILURE_KINDS.len()];
        report.count(kind, 1);
        let max_vms = if kind.ends_with("vm_table_full") { rng.random_range(2..5) } else { 64 };
        let mut sim = Simulation::new(SimConfig {
            machine: MachineConfig { frames: 192, pcpus: 2 },
            max_vms,
            keep_trace: false,
            ..SimConfig::default()
        });
        // some history first
        let mut open = Vec::new();
        let history = if kind.ends_with("vm_table_full") { max_vms + 2 } else { rng.random_range(1..5) };
        for _ in 0..history {
            sim.set_cpu(PcpuId(rng.random_range(0..2)));
            let img = builtin_image("counter", rng.random_range(1..6), rng.random_range(1..3));
            if let Ok(fd) = sim.create(&img) {
                open.push(fd);
            }
        }
        if rng.random_bool(0.3) && open.len() > 1 && !kind.ends_with("vm_table_full") {
            if let Some(fd) = open.pop() {
                sim.destroy(fd).unwrap();
            }
        }
        if kind == "driver_fd_table_full" {
            while sim.open_fds().len() < FD_TABLE_CAPACITY - FIRST_FD as usize {
                sim.create(&builtin_image("echo", 1, 1)).expect("room for small enclaves");
            }
        }

        let free: Vec<IpaPage> = sim.os.allocator().free_pages().iter().copied().collect();
        let owned: Vec<IpaPage> = open
            .iter()
            .flat_map(|fd| sim.os.enclave(*fd).unwrap().handle.private_pages.clone())
            .collect();
        let shared: Vec<IpaPage> = open
            .iter()
            .flat_map(|fd| sim.os.enclave(*fd).unwrap().handle.channel_pages.clone())
            .collect();
        let pick = |rng: &mut ChaCha8Rng, n: usize| -> Vec<IpaPage> { free.choose_multiple(rng, n).copied().collect() };
        let ok_meta = ImageMeta { mem_pages: 2, channel_pages: 1 };

        let tables = oracle::stage2_snapshot(&sim.hv);
        let alloc = sim.os.allocator().clone();
        let fds_before = sim.open_fds();
        let raw = |sim: &mut Simulation, donated: Vec<IpaPage>, meta| sim.inject_bad_create(donated, meta).err().map(|e| e.to_string());
        let err: Option<String> = match kind {
            "bad_meta" => {
                let meta = if case % 2 == 0 { ImageMeta { mem_pages: 0, channel_pages: 1 } } else { ImageMeta { mem_pages: 2, channel_pages: 0 } };
                raw(&mut sim, pick(&mut rng, 3), meta)
            }
            "too_small" => raw(&mut sim, pick(&mut rng, 2), ok_meta),
            "duplicate_page" => {
                let mut d = pick(&mut rng, 3);
                let again = d[rng.random_range(0..3)];
                d.insert(rng.random_range(0..=3), again);
                raw(&mut sim, d, ok_meta)
            }
            "out_of_range" => {
                let mut d = pick(&mut rng, 2);
                d.push(IpaPage(192 + rng.random_range(0..1000)));
                raw(&mut sim, d, ok_meta)
            }
            "donated_elsewhere" => {
                let mut d = pick(&mut rng, 2);
                d.push(*owned.choose(&mut rng).expect("history leaves an enclave"));
                raw(&mut sim, d, ok_meta)
            }
            "shared_channel" => {
                let mut d = pick(&mut rng, 2);
                d.push(*shared.choose(&mut rng).expect("history leaves an enclave"));
                raw(&mut sim, d, ok_meta)
            }
            "vm_table_full" => raw(&mut sim, pick(&mut rng, 3), ok_meta),
            "not_primary" => {
                let fd = *open.choose(&mut rng).expect("history leaves an enclave");
                let caller = sim.os.enclave(fd).unwrap().handle.vcpu;
                let r = sim.hv.dispatch(caller, Hypercall::CreateEnclave { donated: pick(&mut rng, 3), meta: ok_meta });
                sim.observe();
                r.err().map(|e| e.to_string())
            }
            "driver_no_memory" => {
                let img = EnclaveImage::new(free.len() as u32, 1, 1, code_blob("echo")).unwrap();
                sim.create(&img).err().map(|e| e.to_string())
            }
            _ => {
                let r = sim.create(&builtin_image("echo", 1, 1));
                let expected = if kind == "driver_fd_table_full" {
                    matches!(r, Err(DriverError::TooManyFds))
                } else {
                    matches!(r, Err(DriverError::Hypervisor(HvError::Exhausted)))
                };
                report.check(expected || r.is_ok(), || format!("case {case} ({kind}): unexpected {r:?}"));
                r.err().map(|e| e.to_string())
            }
        };
        report.check(err.is_some(), || format!("case {case} ({kind}): create succeeded"));
        report.check(oracle::stage2_snapshot(&sim.hv) == tables, || format!("case {case} ({kind}): stage-2 changed"));
        report.check(*sim.os.allocator() == alloc, || format!("case {case} ({kind}): allocator changed"));
        report.check(sim.open_fds() == fds_before, || format!("case {case} ({kind}): fd table changed"));
        report.check(sim.violations().is_empty(), || format!("case {case} ({kind}): {:?}", sim.violations()));
        report.cases += 1;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lifo_small() {
        let r = lifo_campaign(300, 1);
        assert!(r.pass(), "{r:#?}");
        assert!(r.checks > 3 * 300);
        assert!(r.coverage["max_depth"] >= 4 && r.coverage["unwinds"] > 10, "{:?}", r.coverage);
        assert!(r.coverage["accepted"] > 300, "{:?}", r.coverage);
    }

    #[test]
    fn round_trip_small() {
        let r = round_trip_campaign(20, 2);
        assert!(r.pass(), "{r:#?}");
    }

    #[test]
    fn injection_covers_every_kind() {
        let r = failure_injection_campaign(2 * FAILURE_KINDS.len(), 3);
        assert!(r.pass(), "{r:#?}");
        assert_eq!(r.coverage.len(), FAILURE_KINDS.len());
        assert!(r.coverage.values().all(|&n| n == 2));
    }

    #[test]
    fn report_counts_every_failure_but_keeps_a_few() {
        let mut r = CampaignReport::default();
        for i in 0..25 {
            r.check(i % 2 == 0, || format!("{i}"));
        }
        assert_eq!((r.checks, r.failed, r.first_failures.len()), (25, 12, KEEP));
    }
}
