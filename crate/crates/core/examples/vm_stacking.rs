//! Nested scheduling on one core: push, yield, and an interrupt for the
//! root that unwinds the whole stack in one switch.

use vmenclave::harness::oracle::{stack_links, StackModel};
use vmenclave::hypervisor::{HvcOutcome, Hypercall, Hypervisor, HypervisorConfig, ImageMeta};
use vmenclave::machine::{MachineConfig, PcpuId};
use vmenclave::stage2::IpaPage;

fn main() {
    let mut hv = Hypervisor::new(HypervisorConfig {
        machine: MachineConfig { frames: 64, pcpus: 1 },
        ..HypervisorConfig::default()
    });
    let pcpu = PcpuId(0);
    let root = hv.primary_vcpu(pcpu).unwrap();
    let mut vcpus = Vec::new();
    for i in 0..3u64 {
        let donated = (10 + 2 * i..12 + 2 * i).map(IpaPage).collect();
        let call = Hypercall::CreateEnclave { donated, meta: ImageMeta { mem_pages: 1, channel_pages: 1 } };
        let Ok(HvcOutcome::Created(h)) = hv.dispatch(root, call) else { unreachable!() };
        vcpus.push(h.vcpu);
    }
    let mut model = StackModel::new(&hv);
    let show = |hv: &Hypervisor, what: &str| println!("{what:<28} {:?}", hv.stack(pcpu));

    let mut parent = root;
    for &v in &vcpus {
        hv.schedule_child(parent, v).unwrap();
        assert!(model.push(pcpu, parent, v, pcpu));
        show(&hv, &format!("{parent} schedules {v}"));
        parent = v;
    }
    hv.yield_to_parent(parent).unwrap();
    model.pop(pcpu, parent);
    show(&hv, &format!("{parent} yields"));

    let below = hv.deliver_interrupt(pcpu, vcpus[2]).unwrap();
    println!("{:<28} {below:?}", format!("irq for off-stack {}", vcpus[2]));
    let unwound = hv.deliver_interrupt(pcpu, root).unwrap();
    assert_eq!(model.interrupt(pcpu, root), vcpus[..2].iter().rev().copied().collect::<Vec<_>>());
    show(&hv, &format!("irq for {root}: {unwound:?}"));

    assert!(model.compare(&hv).is_empty() && stack_links(&hv).is_empty());
    println!("model and HEAD/TAIL links agree");
}
