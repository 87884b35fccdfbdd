//! Create, invoke and destroy with raw hypercalls, showing how the
//! primary's stage-2 table changes and comes back.

use vmenclave::hypervisor::{HvcOutcome, Hypercall, Hypervisor, HypervisorConfig, ImageMeta, PRIMARY_VM};
use vmenclave::machine::{MachineConfig, PcpuId};
use vmenclave::stage2::IpaPage;

fn main() {
    let mut hv = Hypervisor::new(HypervisorConfig {
        machine: MachineConfig { frames: 64, pcpus: 1 },
        ..HypervisorConfig::default()
    });
    let root = hv.primary_vcpu(PcpuId(0)).unwrap();
    let before = hv.primary().stage2.snapshot();

    // pages need not be contiguous; the last one becomes the channel
    let donated = vec![IpaPage(40), IpaPage(12), IpaPage(33), IpaPage(7)];
    hv.vm_write(PRIMARY_VM, IpaPage(12).base(), b"code").unwrap();
    let HvcOutcome::Created(h) = hv
        .dispatch(root, Hypercall::CreateEnclave { donated, meta: ImageMeta { mem_pages: 3, channel_pages: 1 } })
        .unwrap()
    else {
        unreachable!()
    };
    println!("{} as {} on {}", h.handle, h.vm, h.pcpu);
    println!("  private (unmapped from primary): {:?}", h.private_pages);
    println!("  channel (shared):                {:?}", h.channel_pages);
    println!("  primary read of {:?}: {:?}", IpaPage(12), hv.vm_read(PRIMARY_VM, IpaPage(12).base(), 4).unwrap_err());
    println!("  enclave sees page 12 as its IPA page 1: {:?}", String::from_utf8(hv.vm_read(h.vm, IpaPage(1).base(), 4).unwrap()));

    hv.dispatch(root, Hypercall::InvokeEnclave { handle: h.handle }).unwrap();
    println!("invoked: stack {:?}", hv.stack(PcpuId(0)));
    hv.dispatch(h.vcpu, Hypercall::EnclaveExit).unwrap();
    println!("exited:  stack {:?}", hv.stack(PcpuId(0)));

    hv.dispatch(root, Hypercall::DestroyEnclave { handle: h.handle }).unwrap();
    let after = hv.primary().stage2.snapshot();
    println!("destroyed: primary table restored = {}", before == after);
    println!("  page 12 after destroy: {:?}", hv.vm_read(PRIMARY_VM, IpaPage(12).base(), 4).unwrap());
    println!("ledger: {:?}", hv.machine().ledger());
    for e in hv.drain_events() {
        println!("  {e:?}");
    }
}
