//! Independent checks run against simulator state. Each returns a list of
//! human-readable problems; empty means the property holds.

use std::collections::{BTreeMap, BTreeSet};

use memchr::memmem;
use serde::Serialize;

use crate::guest_os::GuestOs;
use crate::hypervisor::{Hypervisor, VcpuId, VmState, PRIMARY_VM};
use crate::machine::{FrameNo, PcpuId, PAGE_SIZE};
use crate::stage2::{IpaPage, Mapping, Stage2Table};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub step: u64,
    pub oracle: &'static str,
    pub detail: String,
}

/// Every frame is reachable from exactly one live VM, except channel frames,
/// which are reachable from the primary and exactly one enclave. Destroyed
/// VMs map nothing.
pub fn frame_exclusivity(hv: &Hypervisor) -> Vec<String> {
    let mut problems = Vec::new();
    let mut owners: BTreeMap<FrameNo, Vec<_>> = BTreeMap::new();
    for vm in hv.vms() {
        if vm.state == VmState::Destroyed {
            if !vm.stage2.is_empty() {
                problems.push(format!("destroyed {} still maps {} pages", vm.id, vm.stage2.len()));
            }
            continue;
        }
        for f in vm.stage2.frames() {
            owners.entry(f).or_default().push(vm.id);
        }
    }
    for i in 0..hv.machine().frame_count() as u64 {
        let frame = FrameNo(i);
        let who = owners.get(&frame).map(Vec::as_slice).unwrap_or(&[]);
        let shared = hv.channel_frames().contains(&frame);
        let ok = match who {
            [_] => !shared,
            [a, b] => shared && (*a == PRIMARY_VM) != (*b == PRIMARY_VM),
            _ => false,
        };
        if !ok {
            problems.push(format!("{frame} mapped by {who:?} (channel: {shared})"));
        }
    }
    problems
}

/// HEAD/TAIL links form one chain per pCPU, rooted at the primary vCPU and
/// ending at the running vCPU; off-stack vCPUs have no links.
pub fn stack_links(hv: &Hypervisor) -> Vec<String> {
    let mut problems = Vec::new();
    let mut on_stack = BTreeSet::new();
    for p in hv.machine().pcpus() {
        let stack = hv.stack(p.id);
        if hv.current(p.id) != stack.last().copied() {
            problems.push(format!("{}: running {:?} but stack top {:?}", p.id, hv.current(p.id), stack.last()));
        }
        if let Some(root) = stack.first() {
            if hv.vcpu(*root).and_then(|v| v.tail).is_some() {
                problems.push(format!("{}: root {root} has a TAIL", p.id));
            }
        }
        for pair in stack.windows(2) {
            let (parent, child) = (hv.vcpu(pair[0]).unwrap(), hv.vcpu(pair[1]).unwrap());
            if child.tail != Some(parent.id) {
                problems.push(format!("{}: HEAD of {} is {} but its TAIL is {:?}", p.id, parent.id, child.id, child.tail));
            }
            if child.pcpu != p.id {
                problems.push(format!("{} stacked on {} but pinned to {}", child.id, p.id, child.pcpu));
            }
        }
        on_stack.extend(stack);
    }
    for v in hv.vcpus() {
        if !on_stack.contains(&v.id) && (v.head.is_some() || v.tail.is_some()) {
            problems.push(format!("off-stack {} has links head={:?} tail={:?}", v.id, v.head, v.tail));
        }
    }
    problems
}

/// Free plus allocated pages account for the whole donatable region, free
/// pages are the primary's, and each open enclave's allocation is exactly
/// what it was given.
pub fn allocator_conservation(os: &GuestOs, hv: &Hypervisor) -> Vec<String> {
    let mut problems = Vec::new();
    let a = os.allocator();
    let allocated: BTreeSet<IpaPage> = a.allocations().values().flatten().copied().collect();
    if a.free_count() + a.allocated_count() != a.total() || allocated.len() != a.allocated_count() {
        problems.push(format!(
            "free {} + allocated {} != total {}",
            a.free_count(),
            a.allocated_count(),
            a.total()
        ));
    }
    if let Some(p) = a.free_pages().intersection(&allocated).next() {
        problems.push(format!("{p:?} both free and allocated"));
    }
    let primary = &hv.primary().stage2;
    for p in a.free_pages() {
        if !primary.get(*p).is_some_and(|m| m.perms.write) {
            problems.push(format!("free {p:?} is not writable by the primary"));
        }
    }
    for e in os.open_fds() {
        let given: Vec<IpaPage> = e.handle.private_pages.iter().chain(&e.handle.channel_pages).copied().collect();
        if a.allocations().get(&e.alloc) != Some(&given) {
            problems.push(format!("{} allocation does not match its donation", e.fd));
        }
        for p in &e.handle.private_pages {
            if primary.get(*p).is_some() {
                problems.push(format!("{} private {p:?} still mapped by the primary", e.fd));
            }
        }
    }
    problems
}

/// All stage-2 tables, for before/after comparison.
pub fn stage2_snapshot(hv: &Hypervisor) -> Vec<BTreeMap<IpaPage, Mapping>> {
    hv.vms().iter().map(|vm| vm.stage2.snapshot()).collect()
}

/// Byte offsets of every occurrence of `pattern` in physical memory.
pub fn find_in_memory(hv: &Hypervisor, pattern: &[u8]) -> Vec<usize> {
    memmem::find_iter(hv.machine().physical_memory(), pattern).collect()
}

/// Occurrences of `pattern` that overlap a frame `table` maps.
pub fn find_in_mapped(hv: &Hypervisor, table: &Stage2Table, pattern: &[u8]) -> Vec<FrameNo> {
    let mapped: BTreeSet<FrameNo> = table.frames().collect();
    let mut hits: Vec<FrameNo> = find_in_memory(hv, pattern)
        .into_iter()
        .flat_map(|at| {
            let first = (at / PAGE_SIZE) as u64;
            let last = ((at + pattern.len() - 1) / PAGE_SIZE) as u64;
            (first..=last).map(FrameNo)
        })
        .filter(|f| mapped.contains(f))
        .collect();
    hits.dedup();
    hits
}

/// Nonzero bytes in the given primary pages.
pub fn nonzero_bytes(hv: &Hypervisor, pages: &[IpaPage]) -> usize {
    pages
        .iter()
        .filter_map(|p| hv.primary().stage2.get(*p))
        .map(|m| hv.machine().frame_bytes(m.frame).unwrap().iter().filter(|b| **b != 0).count())
        .sum()
}

/// Reference model for VM stacking: a plain vector per pCPU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackModel {
    stacks: BTreeMap<PcpuId, Vec<VcpuId>>,
}

impl StackModel {
    /// Primary vCPU alone on every pCPU.
    pub fn new(hv: &Hypervisor) -> Self {
        let stacks = hv
            .machine()
            .pcpus()
            .iter()
            .map(|p| (p.id, vec![hv.primary_vcpu(p.id).expect("root")]))
            .collect();
        Self { stacks }
    }

    pub fn stack(&self, pcpu: PcpuId) -> &[VcpuId] {
        &self.stacks[&pcpu]
    }

    pub fn top(&self, pcpu: PcpuId) -> VcpuId {
        *self.stacks[&pcpu].last().expect("stacks are never empty")
    }

    fn contains(&self, v: VcpuId) -> bool {
        self.stacks.values().any(|s| s.contains(&v))
    }

    /// Would `parent` on `pcpu` be allowed to schedule an off-stack `child`
    /// pinned to `child_pcpu`? Applies the push if so.
    pub fn push(&mut self, pcpu: PcpuId, parent: VcpuId, child: VcpuId, child_pcpu: PcpuId) -> bool {
        if self.top(pcpu) != parent || child_pcpu != pcpu || self.contains(child) {
            return false;
        }
        self.stacks.get_mut(&pcpu).unwrap().push(child);
        true
    }

    /// Pops `child` if it is the top and not the root.
    pub fn pop(&mut self, pcpu: PcpuId, child: VcpuId) -> bool {
        let s = self.stacks.get_mut(&pcpu).unwrap();
        if s.len() < 2 || s.last() != Some(&child) {
            return false;
        }
        s.pop();
        true
    }

    /// Interrupt for `target`: returns the vCPUs popped, top first; empty
    /// means pending.
    pub fn interrupt(&mut self, pcpu: PcpuId, target: VcpuId) -> Vec<VcpuId> {
        let s = self.stacks.get_mut(&pcpu).unwrap();
        match s.iter().position(|v| *v == target) {
            Some(at) if at + 1 < s.len() => {
                let mut popped: Vec<_> = s.drain(at + 1..).collect();
                popped.reverse();
                popped
            }
            _ => Vec::new(),
        }
    }

    /// Differences between the model and the hypervisor.
    pub fn compare(&self, hv: &Hypervisor) -> Vec<String> {
        self.stacks
            .iter()
            .filter(|(p, s)| hv.stack(**p) != **s || hv.current(**p) != s.last().copied())
            .map(|(p, s)| format!("{p}: model {s:?}, hypervisor {:?}", hv.stack(*p)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guest_os::GuestOsConfig;
    use crate::hypervisor::{Hypercall, HypervisorConfig, ImageMeta, Mutations};
    use crate::machine::MachineConfig;
    
    fn hv() -> Hypervisor {
        Hypervisor::new(HypervisorConfig { machine: MachineConfig { frames: 64, pcpus: 2 }, ..HypervisorConfig::default() })
    }

    #[test]
    fn healthy_boot_passes_everything() {
        let hv = hv();
        let os = GuestOs::new(&hv, GuestOsConfig::default());
        assert!(frame_exclusivity(&hv).is_empty());
        assert!(stack_links(&hv).is_empty());
        assert!(allocator_conservation(&os, &hv).is_empty());
        assert!(StackModel::new(&hv).compare(&hv).is_empty());
    }

    #[test]
    fn exclusivity_holds_through_a_lifecycle() {
        let mut hv = hv();
        let primary = hv.primary_vcpu(PcpuId(0)).unwrap();
        let created = hv.dispatch(primary, Hypercall::CreateEnclave {
            donated: vec![IpaPage(20), IpaPage(21), IpaPage(22)],
            meta: ImageMeta { mem_pages: 2, channel_pages: 1 },
        });
        let Ok(crate::hypervisor::HvcOutcome::Created(h)) = created else { panic!("{created:?}") };
        assert!(frame_exclusivity(&hv).is_empty());
        assert_eq!(hv.channel_frames().iter().copied().collect::<Vec<_>>(), vec![FrameNo(22)]);
        hv.dispatch(primary, Hypercall::DestroyEnclave { handle: h.handle }).unwrap();
        assert!(frame_exclusivity(&hv).is_empty());
    }

    #[test]
    fn secret_search_sees_only_mapped_frames() {
        let mut hv = Hypervisor::new(HypervisorConfig {
            machine: MachineConfig { frames: 64, pcpus: 1 },
            mutations: Mutations::default(),
            ..HypervisorConfig::default()
        });
        let secret = [0x5Au8; 32];
        // straddles frames 30 and 31
        hv.vm_write(PRIMARY_VM, 31 * PAGE_SIZE as u64 - 16, &secret).unwrap();
        assert_eq!(find_in_memory(&hv, &secret).len(), 1);
        assert_eq!(find_in_mapped(&hv, &hv.primary().stage2.clone(), &secret), vec![FrameNo(30), FrameNo(31)]);
        assert_eq!(nonzero_bytes(&hv, &[IpaPage(30), IpaPage(31), IpaPage(32)]), 32);
    }

    #[test]
    fn model_rules() {
        let hv = hv();
        let mut m = StackModel::new(&hv);
        let (r0, r1) = (hv.primary_vcpu(PcpuId(0)).unwrap(), hv.primary_vcpu(PcpuId(1)).unwrap());
        let (a, b) = (VcpuId(10), VcpuId(11));
        assert!(m.push(PcpuId(0), r0, a, PcpuId(0)));
        assert!(!m.push(PcpuId(0), r0, b, PcpuId(0)), "parent is not on top");
        assert!(!m.push(PcpuId(1), r1, a, PcpuId(1)), "already stacked");
        assert!(!m.push(PcpuId(1), r1, b, PcpuId(0)), "wrong pcpu");
        assert!(m.push(PcpuId(0), a, b, PcpuId(0)));
        assert!(!m.pop(PcpuId(0), a));
        assert_eq!(m.interrupt(PcpuId(0), b), vec![]);
        assert_eq!(m.interrupt(PcpuId(0), r0), vec![b, a]);
        assert!(!m.pop(PcpuId(0), r0));
    }
}
