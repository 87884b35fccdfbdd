use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;
use crate::machine::{PAGE_SIZE, PcpuId};
use crate::stage2::{Access, FaultKind};

const P0: VcpuId = VcpuId(0);

fn hv(frames: usize, pcpus: usize) -> Hypervisor {
    Hypervisor::new(HypervisorConfig {
        machine: MachineConfig { frames, pcpus },
        ..HypervisorConfig::default()
    })
}

fn pages(range: std::ops::Range<u64>) -> Vec<IpaPage> {
    range.map(IpaPage).collect()
}

fn create(hv: &mut Hypervisor, caller: VcpuId, donated: Vec<IpaPage>, mem: u32, chan: u32) -> Result<EnclaveHandle, HvError> {
    match hv.dispatch(caller, Hypercall::CreateEnclave { donated, meta: ImageMeta { mem_pages: mem, channel_pages: chan } })? {
        HvcOutcome::Created(h) => Ok(h),
        other => panic!("unexpected {other:?}"),
    }
}

/// Frame -> list of VMs mapping it, over all live tables.
fn frame_owners(hv: &Hypervisor) -> BTreeMap<FrameNo, Vec<VmId>> {
    let mut owners: BTreeMap<FrameNo, Vec<VmId>> = BTreeMap::new();
    for vm in hv.vms() {
        for f in vm.stage2.frames() {
            owners.entry(f).or_default().push(vm.id);
        }
    }
    owners
}

#[test]
fn boot_identity_maps_primary() {
    let hv = hv(64, 2);
    assert_eq!(hv.primary().stage2.len(), 64);
    assert_eq!(hv.primary().stage2.translate(0x5123, Access::Write), Ok(0x5123));
    assert_eq!(hv.current(PcpuId(0)), Some(VcpuId(0)));
    assert_eq!(hv.current(PcpuId(1)), Some(VcpuId(1)));
    assert_eq!(hv.stack(PcpuId(1)), vec![VcpuId(1)]);
}

#[test]
fn create_splits_private_and_channel() {
    let mut hv = hv(256, 1);
    let h = create(&mut hv, P0, pages(100..164), 60, 1).unwrap();
    assert_eq!(h.channel_pages, vec![IpaPage(163)]);
    assert_eq!(h.private_pages.len(), 63);
    for p in &h.private_pages {
        let f = hv.primary().stage2.translate(p.base(), Access::Read).unwrap_err();
        assert_eq!(f.kind, FaultKind::Unmapped);
    }
    // channel: both views reach the same frame, rw in both
    let enc = hv.vm(h.vm).unwrap();
    let via_enclave = enc.stage2.translate(h.enclave_channel_base().base(), Access::Write).unwrap();
    let via_primary = hv.primary().stage2.translate(163 << 12, Access::Write).unwrap();
    assert_eq!(via_enclave, via_primary);
    assert!(hv.primary().stage2.translate(163 << 12, Access::Execute).is_err());
    // enclave private pages re-based at zero, rwx
    assert_eq!(enc.stage2.translate(0, Access::Execute), Ok(100 << 12));
    assert_eq!(enc.state, VmState::Created);
    assert_eq!(enc.stage2.len(), 64);

    for (frame, owners) in frame_owners(&hv) {
        if hv.channel_frames().contains(&frame) {
            assert_eq!(owners, vec![PRIMARY_VM, h.vm]);
        } else {
            assert_eq!(owners.len(), 1, "{frame} mapped by {owners:?}");
        }
    }
    let ctx = hv.vcpu(h.vcpu).unwrap().context;
    assert_eq!(ctx.regs[boot_regs::PRIVATE_PAGES], 63);
    assert_eq!(ctx.regs[boot_regs::CHANNEL_BASE_PAGE], 63);
    assert_eq!(ctx.regs[boot_regs::CHANNEL_PAGES], 1);
}

#[test]
fn create_is_all_or_nothing() {
    let mut hv = hv(128, 1);
    let first = create(&mut hv, P0, pages(10..20), 9, 1).unwrap();
    let snap = hv.primary().stage2.snapshot();
    let ledger = hv.machine().ledger();

    let mut bad = pages(30..40);
    bad.push(IpaPage(15)); // private page of `first`, unmapped in primary
    assert_eq!(create(&mut hv, P0, bad, 9, 1), Err(HvError::PageNotMapped(IpaPage(15))));

    let mut dup = pages(30..40);
    dup.push(IpaPage(31));
    assert_eq!(create(&mut hv, P0, dup, 9, 1), Err(HvError::DuplicatePage(IpaPage(31))));

    let mut shared = pages(30..40);
    shared.push(first.channel_pages[0]);
    assert_eq!(create(&mut hv, P0, shared, 9, 1), Err(HvError::PageShared(first.channel_pages[0])));

    assert_eq!(create(&mut hv, P0, pages(30..35), 9, 1), Err(HvError::TooSmall { donated: 5, required: 10 }));
    assert_eq!(create(&mut hv, P0, pages(30..35), 0, 1), Err(HvError::BadImageMeta));
    assert_eq!(create(&mut hv, P0, pages(30..35), 4, 0), Err(HvError::BadImageMeta));
    assert_eq!(create(&mut hv, P0, pages(200..210), 9, 1), Err(HvError::PageNotMapped(IpaPage(200))));

    assert_eq!(hv.primary().stage2.snapshot(), snap);
    assert_eq!(hv.vms().len(), 2);
    let d = hv.machine().ledger().since(&ledger);
    assert_eq!(d.pt_ops, 0);
    assert_eq!(d.hypercalls, 7);
}

#[test]
fn vm_table_exhaustion() {
    let mut hv = Hypervisor::new(HypervisorConfig {
        machine: MachineConfig { frames: 64, pcpus: 1 },
        max_vms: 3,
        ..HypervisorConfig::default()
    });
    create(&mut hv, P0, pages(0..2), 1, 1).unwrap();
    let h = create(&mut hv, P0, pages(2..4), 1, 1).unwrap();
    assert_eq!(create(&mut hv, P0, pages(4..6), 1, 1), Err(HvError::Exhausted));
    hv.dispatch(P0, Hypercall::DestroyEnclave { handle: h.handle }).unwrap();
    create(&mut hv, P0, pages(4..6), 1, 1).unwrap();
}

#[test]
fn create_pt_op_count() {
    let mut hv = hv(512, 1);
    let before = hv.machine().ledger();
    create(&mut hv, P0, pages(100..356), 255, 1).unwrap();
    let d = hv.machine().ledger().since(&before);
    assert!(d.pt_ops >= 2 * 255 + 2);
    assert_eq!(d.pt_ops, 512);
    assert_eq!(d.hypercalls, 1);
    assert_eq!(d.zero_bytes, 0);
}

#[test]
fn destroy_round_trip_and_zeroes() {
    let mut hv = hv(512, 1);
    let snap = hv.primary().stage2.snapshot();
    let h = create(&mut hv, P0, pages(100..356), 254, 2).unwrap();
    // the enclave scribbles over all its pages
    for i in 0..256u64 {
        hv.vm_write(h.vm, i << 12 | 17, b"secret!").unwrap();
    }
    let before = hv.machine().ledger();
    hv.dispatch(P0, Hypercall::DestroyEnclave { handle: h.handle }).unwrap();
    let d = hv.machine().ledger().since(&before);
    assert_eq!(d.zero_bytes, 256 * PAGE_SIZE as u64);
    assert_eq!(d.pt_ops, 512);

    assert_eq!(hv.primary().stage2.snapshot(), snap);
    for p in 100..356u64 {
        assert_eq!(hv.vm_read(PRIMARY_VM, p << 12, PAGE_SIZE).unwrap(), vec![0; PAGE_SIZE]);
    }
    let vm = hv.vm(h.vm).unwrap();
    assert_eq!(vm.state, VmState::Destroyed);
    assert!(vm.stage2.is_empty());
    assert!(hv.channel_frames().is_empty());
    assert!(!hv.vcpu(h.vcpu).unwrap().attached);
    let returned: Vec<_> = hv
        .events()
        .iter()
        .filter_map(|e| match e {
            HvEvent::PageReturned { zeroed, .. } => Some(*zeroed),
            _ => None,
        })
        .collect();
    assert_eq!(returned.len(), 256);
    assert!(returned.iter().all(|z| *z));

    assert_eq!(hv.dispatch(P0, Hypercall::DestroyEnclave { handle: h.handle }), Err(HvError::BadHandle(h.handle)));
    assert_eq!(hv.dispatch(P0, Hypercall::InvokeEnclave { handle: h.handle }), Err(HvError::Destroyed(h.handle)));
    assert_eq!(
        hv.dispatch(P0, Hypercall::InvokeEnclave { handle: HandleId(77) }),
        Err(HvError::BadHandle(HandleId(77)))
    );
}

#[test]
fn skip_zeroize_mutation_is_visible() {
    let mut hv = Hypervisor::new(HypervisorConfig {
        machine: MachineConfig { frames: 64, pcpus: 1 },
        mutations: Mutations { skip_zeroize: true },
        ..HypervisorConfig::default()
    });
    let h = create(&mut hv, P0, pages(10..14), 3, 1).unwrap();
    hv.vm_write(h.vm, 0, &[0x55; 8]).unwrap();
    hv.dispatch(P0, Hypercall::DestroyEnclave { handle: h.handle }).unwrap();
    assert!(hv.events().iter().any(|e| matches!(e, HvEvent::PageReturned { zeroed: false, .. })));
    assert_eq!(hv.vm_read(PRIMARY_VM, 10 << 12, 1).unwrap(), vec![0x55]);
}

#[test]
fn invoke_and_exit() {
    let mut hv = hv(128, 1);
    let h = create(&mut hv, P0, pages(10..20), 9, 1).unwrap();
    let before = hv.machine().ledger();
    assert_eq!(hv.dispatch(P0, Hypercall::InvokeEnclave { handle: h.handle }), Ok(HvcOutcome::Switched { to: h.vcpu }));
    let d = hv.machine().ledger().since(&before);
    assert_eq!((d.ctx_switches, d.hypercalls, d.pt_ops), (1, 1, 0));
    assert_eq!(hv.vcpu(P0).unwrap().head, Some(h.vcpu));
    assert_eq!(hv.vcpu(h.vcpu).unwrap().tail, Some(P0));
    assert_eq!(hv.vm(h.vm).unwrap().state, VmState::Running);
    assert_eq!(hv.stack(PcpuId(0)), vec![P0, h.vcpu]);

    // the primary is off-CPU now
    assert_eq!(hv.dispatch(P0, Hypercall::InvokeEnclave { handle: h.handle }), Err(HvError::NotRunning(P0)));
    // enclaves cannot invoke or create
    assert!(matches!(
        hv.dispatch(h.vcpu, Hypercall::InvokeEnclave { handle: h.handle }),
        Err(HvError::PrivilegeViolation { .. })
    ));
    assert!(matches!(
        hv.dispatch(h.vcpu, Hypercall::CreateEnclave { donated: pages(30..32), meta: ImageMeta { mem_pages: 1, channel_pages: 1 } }),
        Err(HvError::PrivilegeViolation { .. })
    ));
    assert!(matches!(
        hv.dispatch(h.vcpu, Hypercall::DestroyEnclave { handle: h.handle }),
        Err(HvError::PrivilegeViolation { .. })
    ));

    assert_eq!(hv.dispatch(h.vcpu, Hypercall::EnclaveExit), Ok(HvcOutcome::Switched { to: P0 }));
    assert_eq!(hv.current(PcpuId(0)), Some(P0));
    assert_eq!(hv.vcpu(P0).unwrap().head, None);
    assert_eq!(hv.vcpu(h.vcpu).unwrap().tail, None);
    assert_eq!(hv.take_resume(P0), Some(ResumeReason::ChildYielded(h.vcpu)));
    assert_eq!(hv.vm(h.vm).unwrap().state, VmState::Ready);

    // primary may not exit
    assert!(matches!(hv.dispatch(P0, Hypercall::EnclaveExit), Err(HvError::PrivilegeViolation { .. })));
}

#[test]
fn exit_without_parent() {
    let mut hv = hv(64, 1);
    let h = create(&mut hv, P0, pages(10..12), 1, 1).unwrap();
    // An enclave that is not running cannot exit either.
    assert_eq!(hv.dispatch(h.vcpu, Hypercall::EnclaveExit), Err(HvError::NotRunning(h.vcpu)));
    assert_eq!(hv.yield_to_parent(P0), Err(HvError::NoParent(P0)));
}

#[test]
fn invoke_cost_is_independent_of_size() {
    let mut costs = Vec::new();
    for n in [2u64, 16, 64, 256] {
        let mut hv = hv(512, 1);
        let h = create(&mut hv, P0, pages(100..100 + n), n as u32 - 1, 1).unwrap();
        let before = hv.machine().ledger();
        hv.dispatch(P0, Hypercall::InvokeEnclave { handle: h.handle }).unwrap();
        costs.push(hv.machine().ledger().since(&before));
    }
    assert!(costs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn every_dispatch_counts_one_hypercall() {
    let mut hv = hv(64, 1);
    let calls = [
        Hypercall::EnclaveExit,
        Hypercall::InvokeEnclave { handle: HandleId(9) },
        Hypercall::DestroyEnclave { handle: HandleId(9) },
        Hypercall::CreateEnclave { donated: vec![], meta: ImageMeta { mem_pages: 1, channel_pages: 1 } },
    ];
    for (i, c) in calls.into_iter().enumerate() {
        let before = hv.machine().ledger().hypercalls;
        let _ = hv.dispatch(P0, c);
        assert_eq!(hv.machine().ledger().hypercalls, before + 1, "call {i}");
    }
    let logged = hv.events().iter().filter(|e| matches!(e, HvEvent::Hypercall { .. })).count();
    assert_eq!(logged, 4);
    let _ = hv.dispatch(VcpuId(99), Hypercall::EnclaveExit);
    assert_eq!(hv.machine().ledger().hypercalls, 5);
}

#[test]
fn interrupt_for_primary_unwinds_enclave() {
    let mut hv = hv(64, 1);
    let h = create(&mut hv, P0, pages(10..12), 1, 1).unwrap();
    hv.dispatch(P0, Hypercall::InvokeEnclave { handle: h.handle }).unwrap();
    hv.context_mut(h.vcpu).unwrap().pc = 0x42;
    let before = hv.machine().ledger();
    let out = hv.deliver_interrupt(PcpuId(0), P0).unwrap();
    assert_eq!(out, IrqOutcome::Unwound { popped: vec![h.vcpu] });
    assert_eq!(hv.machine().ledger().since(&before).ctx_switches, 1);
    assert_eq!(hv.current(PcpuId(0)), Some(P0));
    assert_eq!(hv.take_resume(P0), Some(ResumeReason::Interrupted(vec![h.vcpu])));
    assert_eq!(hv.vcpu(h.vcpu).unwrap().context.pc, 0x42, "saved context survives");
    assert_eq!(hv.vm(h.vm).unwrap().state, VmState::Ready);
    // resumable
    hv.dispatch(P0, Hypercall::InvokeEnclave { handle: h.handle }).unwrap();
    assert_eq!(hv.vcpu(h.vcpu).unwrap().context.pc, 0x42);
}

#[test]
fn interrupt_for_running_vcpu_is_pending() {
    let mut hv = hv(64, 1);
    let before = hv.machine().ledger();
    assert_eq!(hv.deliver_interrupt(PcpuId(0), P0), Ok(IrqOutcome::Pending));
    assert_eq!(hv.machine().ledger().since(&before).ctx_switches, 0);
    assert_eq!(hv.vcpu(P0).unwrap().pending_irqs, 1);
    assert_eq!(hv.take_pending_irqs(P0), 1);
    assert_eq!(hv.take_pending_irqs(P0), 0);

    // an off-stack enclave is a descendant in the tree: also pending
    let h = create(&mut hv, P0, pages(10..12), 1, 1).unwrap();
    assert_eq!(hv.deliver_interrupt(PcpuId(0), h.vcpu), Ok(IrqOutcome::Pending));
}

#[test]
fn interrupt_on_wrong_pcpu() {
    let mut hv = hv(64, 2);
    assert_eq!(
        hv.deliver_interrupt(PcpuId(1), P0),
        Err(HvError::WrongPcpu { vcpu: P0, pinned: PcpuId(0), pcpu: PcpuId(1) })
    );
}

#[test]
fn depth_three_unwind() {
    let mut hv = hv(64, 1);
    let a = create(&mut hv, P0, pages(10..12), 1, 1).unwrap();
    let b = create(&mut hv, P0, pages(12..14), 1, 1).unwrap();
    hv.dispatch(P0, Hypercall::InvokeEnclave { handle: a.handle }).unwrap();
    // configured stacking tree: a may schedule b directly
    hv.schedule_child(a.vcpu, b.vcpu).unwrap();
    assert_eq!(hv.stack(PcpuId(0)), vec![P0, a.vcpu, b.vcpu]);
    // interrupt to the middle vcpu pops one
    let before = hv.machine().ledger();
    assert_eq!(hv.deliver_interrupt(PcpuId(0), a.vcpu), Ok(IrqOutcome::Unwound { popped: vec![b.vcpu] }));
    hv.schedule_child(a.vcpu, b.vcpu).unwrap();
    assert_eq!(hv.deliver_interrupt(PcpuId(0), P0), Ok(IrqOutcome::Unwound { popped: vec![b.vcpu, a.vcpu] }));
    assert_eq!(hv.stack(PcpuId(0)), vec![P0]);
    assert_eq!(hv.machine().ledger().since(&before).ctx_switches, 3);
    for v in hv.vcpus() {
        assert_eq!(v.head, None);
        assert_eq!(v.tail, None);
    }
}

#[test]
fn cross_pcpu_rules() {
    let mut hv = hv(64, 2);
    let p1 = hv.primary_vcpu(PcpuId(1)).unwrap();
    let h = create(&mut hv, P0, pages(10..12), 1, 1).unwrap();
    assert_eq!(hv.vcpu(h.vcpu).unwrap().pcpu, PcpuId(0));
    assert_eq!(
        hv.dispatch(p1, Hypercall::InvokeEnclave { handle: h.handle }),
        Err(HvError::WrongPcpu { vcpu: h.vcpu, pinned: PcpuId(0), pcpu: PcpuId(1) })
    );
    hv.dispatch(P0, Hypercall::InvokeEnclave { handle: h.handle }).unwrap();
    // the primary on pcpu1 still runs and can try to pull the enclave out from under pcpu0
    assert_eq!(hv.dispatch(p1, Hypercall::DestroyEnclave { handle: h.handle }), Err(HvError::EnclaveActive(h.handle)));
    hv.dispatch(h.vcpu, Hypercall::EnclaveExit).unwrap();
    hv.dispatch(p1, Hypercall::DestroyEnclave { handle: h.handle }).unwrap();
}

#[test]
fn faults_are_logged() {
    let mut hv = hv(64, 1);
    let h = create(&mut hv, P0, pages(10..12), 1, 1).unwrap();
    let f = hv.vm_read(PRIMARY_VM, 10 << 12, 4).unwrap_err();
    assert_eq!(f.kind, FaultKind::Unmapped);
    assert!(matches!(hv.events().last(), Some(HvEvent::Fault { vcpu: Some(P0), .. })));
    // enclave reaching outside its donation
    assert!(hv.vm_read(h.vm, 40 << 12, 4).is_err());
    assert!(hv.vm_read(VmId(42), 0, 1).is_err());
    hv.vm_write(PRIMARY_VM, 11 << 12, &[1, 2]).unwrap();
    assert_eq!(hv.last_touched(), &[FrameNo(11)]);
}

#[test]
fn timers_fire_after_steps() {
    let mut hv = hv(64, 1);
    let h = create(&mut hv, P0, pages(10..12), 1, 1).unwrap();
    hv.dispatch(P0, Hypercall::InvokeEnclave { handle: h.handle }).unwrap();
    hv.arm_timer(PcpuId(0), P0, 2);
    assert!(hv.tick(PcpuId(0)).is_empty());
    assert_eq!(hv.tick(PcpuId(0)), vec![Ok(IrqOutcome::Unwound { popped: vec![h.vcpu] })]);
    assert_eq!(hv.armed_timers(), 0);
}

// Reference model: a plain Vec per pCPU.
#[derive(Debug, Clone)]
enum StackOp {
    Push(usize, usize),
    Pop(usize),
    Irq(usize, usize),
}

fn stack_op() -> impl Strategy<Value = StackOp> {
    prop_oneof![
        (0usize..2, 0usize..6).prop_map(|(c, e)| StackOp::Push(c, e)),
        (0usize..2).prop_map(StackOp::Pop),
        (0usize..2, 0usize..8).prop_map(|(c, t)| StackOp::Irq(c, t)),
    ]
}

proptest! {
    #[test]
    fn lifo_matches_reference_stack(ops in prop::collection::vec(stack_op(), 1..60)) {
        let mut hv = hv(64, 2);
        // three enclaves per pcpu
        let mut enclaves: Vec<Vec<VcpuId>> = vec![vec![], vec![]];
        for i in 0..6u64 {
            let cpu = (i % 2) as u32;
            let caller = hv.primary_vcpu(PcpuId(cpu)).unwrap();
            let h = create(&mut hv, caller, pages(10 + 2 * i..12 + 2 * i), 1, 1).unwrap();
            enclaves[cpu as usize].push(h.vcpu);
        }
        let mut model: Vec<Vec<VcpuId>> = (0..2).map(|c| vec![hv.primary_vcpu(PcpuId(c)).unwrap()]).collect();

        for op in ops {
            match op {
                StackOp::Push(c, e) => {
                    let child = enclaves[c][e % 3];
                    let parent = *model[c].last().unwrap();
                    let r = hv.schedule_child(parent, child);
                    if model[c].contains(&child) {
                        prop_assert!(r.is_err());
                    } else {
                        prop_assert!(r.is_ok());
                        model[c].push(child);
                    }
                }
                StackOp::Pop(c) => {
                    let top = *model[c].last().unwrap();
                    let r = hv.yield_to_parent(top);
                    if model[c].len() > 1 {
                        prop_assert!(r.is_ok());
                        model[c].pop();
                    } else {
                        prop_assert_eq!(r, Err(HvError::NoParent(top)));
                    }
                }
                StackOp::Irq(c, t) => {
                    let candidates: Vec<VcpuId> = std::iter::once(hv.primary_vcpu(PcpuId(c as u32)).unwrap())
                        .chain(enclaves[c].iter().copied())
                        .collect();
                    let target = candidates[t % candidates.len()];
                    let r = hv.deliver_interrupt(PcpuId(c as u32), target).unwrap();
                    let pos = model[c].iter().position(|v| *v == target);
                    match pos {
                        Some(p) if p + 1 < model[c].len() => {
                            let mut popped: Vec<VcpuId> = model[c].drain(p + 1..).collect();
                            popped.reverse();
                            prop_assert_eq!(r, IrqOutcome::Unwound { popped });
                        }
                        _ => prop_assert_eq!(r, IrqOutcome::Pending),
                    }
                }
            }
            for (c, stack) in model.iter().enumerate() {
                prop_assert_eq!(hv.stack(PcpuId(c as u32)), stack.clone());
                prop_assert_eq!(hv.current(PcpuId(c as u32)), stack.last().copied());
            }
            for v in hv.vcpus() {
                if let Some(h) = v.head {
                    prop_assert_eq!(hv.vcpu(h).unwrap().tail, Some(v.id));
                }
                if let Some(t) = v.tail {
                    prop_assert_eq!(hv.vcpu(t).unwrap().head, Some(v.id));
                }
            }
        }
    }
}
