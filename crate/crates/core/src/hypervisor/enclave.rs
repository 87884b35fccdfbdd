//! Enclave create / destroy / invoke / exit.
//!
//! Donation layout: the last `channel_pages` of the donated list become the
//! channel, everything before it is private. The enclave sees private pages
//! re-based at IPA page 0 in donation order, then the channel pages.

use std::collections::BTreeSet;

use super::{
    DonatedPage, Donation, EnclaveHandle, GuestContext, HandleId, HvError, HvEvent, Hypervisor, ImageMeta, Vcpu,
    VcpuId, Vm, VmId, VmKind, VmState, PRIMARY_VM,
};
use crate::stage2::{IpaPage, Perms, Stage2Table};

/// Initial register convention for a fresh enclave vCPU.
pub mod boot_regs {
    /// Number of private pages (the enclave's IPA pages `0..n`).
    pub const PRIVATE_PAGES: usize = 0;
    /// First channel page in enclave IPA space.
    pub const CHANNEL_BASE_PAGE: usize = 1;
    pub const CHANNEL_PAGES: usize = 2;
}

const PRIVATE_PERMS: Perms = Perms::RWX;
const CHANNEL_PERMS: Perms = Perms::RW;

impl Hypervisor {
    pub(super) fn create_enclave(
        &mut self,
        caller: VcpuId,
        donated: &[IpaPage],
        meta: ImageMeta,
    ) -> Result<EnclaveHandle, HvError> {
        // Validation first; nothing below mutates until every check passed.
        if meta.mem_pages == 0 || meta.channel_pages == 0 {
            return Err(HvError::BadImageMeta);
        }
        let required = meta.total_pages();
        if donated.len() < required {
            return Err(HvError::TooSmall { donated: donated.len(), required });
        }
        let primary = &self.vms[PRIMARY_VM.0 as usize];
        let mut seen = BTreeSet::new();
        let mut frames = Vec::with_capacity(donated.len());
        for &page in donated {
            if !seen.insert(page) {
                return Err(HvError::DuplicatePage(page));
            }
            let m = primary.stage2.get(page).ok_or(HvError::PageNotMapped(page))?;
            if !m.perms.write {
                return Err(HvError::PageNotWritable(page));
            }
            if self.channel_frames.contains(&m.frame) {
                return Err(HvError::PageShared(page));
            }
            frames.push(m);
        }
        if self.live_vm_count() >= self.max_vms {
            return Err(HvError::Exhausted);
        }

        let pcpu = self.vcpus[caller.0 as usize].pcpu;
        let vm_id = VmId(self.vms.len() as u32);
        let vcpu_id = VcpuId(self.vcpus.len() as u32);
        let n_private = donated.len() - meta.channel_pages as usize;
        let mut table = Stage2Table::new(vm_id);
        let mut pages = Vec::with_capacity(donated.len());

        for (i, (&page, m)) in donated.iter().zip(&frames).enumerate() {
            let channel = i >= n_private;
            let enclave_ipa = IpaPage(i as u64);
            let primary = &mut self.vms[PRIMARY_VM.0 as usize].stage2;
            if channel {
                primary.protect(&mut self.machine, page, CHANNEL_PERMS).expect("validated above");
                table.map(&mut self.machine, enclave_ipa, m.frame, CHANNEL_PERMS).expect("fresh table");
                self.channel_frames.insert(m.frame);
            } else {
                primary.unmap(&mut self.machine, page).expect("validated above");
                table.map(&mut self.machine, enclave_ipa, m.frame, PRIVATE_PERMS).expect("fresh table");
            }
            pages.push(DonatedPage { primary_ipa: page, enclave_ipa, frame: m.frame, original_perms: m.perms, channel });
        }

        let mut context = GuestContext::default();
        context.regs[boot_regs::PRIVATE_PAGES] = n_private as u64;
        context.regs[boot_regs::CHANNEL_BASE_PAGE] = n_private as u64;
        context.regs[boot_regs::CHANNEL_PAGES] = meta.channel_pages as u64;
        self.vcpus.push(Vcpu {
            id: vcpu_id,
            vm: vm_id,
            pcpu,
            head: None,
            tail: None,
            context,
            pending_irqs: 0,
            resume: None,
            attached: true,
        });
        self.vms.push(Vm {
            id: vm_id,
            kind: VmKind::Enclave,
            state: VmState::Created,
            stage2: table,
            vcpus: vec![vcpu_id],
            donation: Some(Donation { primary: PRIMARY_VM, pages }),
        });

        let handle = EnclaveHandle {
            handle: HandleId(self.next_handle),
            vm: vm_id,
            vcpu: vcpu_id,
            pcpu,
            channel_pages: donated[n_private..].to_vec(),
            private_pages: donated[..n_private].to_vec(),
        };
        self.next_handle += 1;
        self.handles.insert(handle.handle, handle.clone());
        Ok(handle)
    }

    fn live_enclave(&self, handle: HandleId) -> Result<&EnclaveHandle, HvError> {
        let h = self.handles.get(&handle).ok_or(HvError::BadHandle(handle))?;
        if self.vms[h.vm.0 as usize].state == VmState::Destroyed {
            return Err(HvError::Destroyed(handle));
        }
        Ok(h)
    }

    pub(super) fn destroy_enclave(&mut self, _caller: VcpuId, handle: HandleId) -> Result<(), HvError> {
        let h = self.live_enclave(handle).map_err(|e| match e {
            HvError::Destroyed(h) => HvError::BadHandle(h),
            e => e,
        })?;
        let (vm_id, vcpu_id) = (h.vm, h.vcpu);
        if self.is_stacked(vcpu_id) {
            return Err(HvError::EnclaveActive(handle));
        }

        let vm = &mut self.vms[vm_id.0 as usize];
        let donation = vm.donation.clone().expect("enclaves carry their donation");
        vm.stage2.clear(&mut self.machine);

        // Scrub every frame before any of them becomes reachable again.
        if !self.mutations.skip_zeroize {
            for p in &donation.pages {
                self.machine.zero_frame(p.frame).expect("donated frames are valid");
            }
        }

        for p in &donation.pages {
            let primary = &mut self.vms[PRIMARY_VM.0 as usize].stage2;
            if p.channel {
                primary.protect(&mut self.machine, p.primary_ipa, p.original_perms).expect("channel stays mapped");
                self.channel_frames.remove(&p.frame);
            } else {
                primary
                    .map(&mut self.machine, p.primary_ipa, p.frame, p.original_perms)
                    .expect("donated ipa was left unmapped");
            }
            let zeroed = self.machine.frame_is_zero(p.frame).expect("donated frames are valid");
            self.log(HvEvent::PageReturned { enclave: vm_id, ipa: p.primary_ipa, frame: p.frame, zeroed });
        }

        self.vms[vm_id.0 as usize].state = VmState::Destroyed;
        let v = &mut self.vcpus[vcpu_id.0 as usize];
        v.attached = false;
        v.head = None;
        v.tail = None;
        v.context = GuestContext::default();
        v.pending_irqs = 0;
        v.resume = None;
        self.timers.retain(|t| t.target != vcpu_id);
        Ok(())
    }

    pub(super) fn invoke_enclave(&mut self, caller: VcpuId, handle: HandleId) -> Result<VcpuId, HvError> {
        let target = self.live_enclave(handle)?.vcpu;
        let (pinned, pcpu) = (self.vcpus[target.0 as usize].pcpu, self.vcpus[caller.0 as usize].pcpu);
        if pinned != pcpu {
            return Err(HvError::WrongPcpu { vcpu: target, pinned, pcpu });
        }
        if self.is_stacked(target) {
            return Err(HvError::EnclaveActive(handle));
        }
        self.schedule_child(caller, target)?;
        Ok(target)
    }

    pub(super) fn enclave_exit(&mut self, caller: VcpuId) -> Result<VcpuId, HvError> {
        self.yield_to_parent(caller)
    }
}
