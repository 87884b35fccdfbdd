//! Hypervisor model: VM and vCPU records, the VM-stacking scheduler, the
//! hypercall dispatcher and the enclave lifecycle.
//!
//! There is exactly one primary VM. It boots with every machine frame
//! identity-mapped `rwx` (IPA page `n` is frame `n`) and one vCPU per pCPU.
//! Enclave VMs are built at runtime from pages the primary donates; each has
//! one vCPU pinned to the pCPU of the primary vCPU that created it.
//!
//! Guest code is cooperative: the layers above run a guest only while its
//! vCPU is on top of its pCPU's stack, and every transition between guests
//! goes through a hypercall or [`Hypervisor::deliver_interrupt`].

mod enclave;
mod event;
mod stacking;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

pub use enclave::boot_regs;
pub use event::{HvEvent, IrqOutcome, SwitchReason};

use crate::machine::{CostLedger, FrameNo, Machine, MachineConfig, PcpuId};
use crate::stage2::{AccessFault, IpaPage, MemOp, Perms, Stage2Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct VmId(pub u32);

impl fmt::Display for VmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vm{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct VcpuId(pub u32);

impl fmt::Display for VcpuId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vcpu{}", self.0)
    }
}

/// Opaque enclave handle returned by create.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct HandleId(pub u32);

impl fmt::Display for HandleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "enclave#{}", self.0)
    }
}

/// The primary VM always has this id.
pub const PRIMARY_VM: VmId = VmId(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum VmKind {
    Primary,
    Enclave,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum VmState {
    /// On a pCPU stack (primary: always).
    Running,
    /// Has run before; currently off-stack.
    Ready,
    /// Built but never invoked.
    Created,
    Destroyed,
}

/// Register file saved for an off-CPU vCPU. Its meaning is up to the guest.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GuestContext {
    pub pc: u64,
    pub regs: [u64; 8],
}

/// Why a parent vCPU got the CPU back.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum ResumeReason {
    ChildYielded(VcpuId),
    /// Interrupt unwound these children off the stack (top first).
    Interrupted(Vec<VcpuId>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vcpu {
    pub id: VcpuId,
    pub vm: VmId,
    pub pcpu: PcpuId,
    /// Child this vCPU scheduled, if it is currently stacked above us.
    pub head: Option<VcpuId>,
    /// Parent that scheduled this vCPU.
    pub tail: Option<VcpuId>,
    pub context: GuestContext,
    pub pending_irqs: u32,
    pub resume: Option<ResumeReason>,
    /// False once the owning VM is destroyed.
    pub attached: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DonatedPage {
    pub primary_ipa: IpaPage,
    pub enclave_ipa: IpaPage,
    pub frame: FrameNo,
    pub original_perms: Perms,
    pub channel: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Donation {
    pub primary: VmId,
    pub pages: Vec<DonatedPage>,
}

#[derive(Debug, Clone)]
pub struct Vm {
    pub id: VmId,
    pub kind: VmKind,
    pub state: VmState,
    pub stage2: Stage2Table,
    pub vcpus: Vec<VcpuId>,
    pub donation: Option<Donation>,
}

/// Sizes the enclave needs, taken from its image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ImageMeta {
    pub mem_pages: u32,
    pub channel_pages: u32,
}

impl ImageMeta {
    pub fn total_pages(&self) -> usize {
        self.mem_pages as usize + self.channel_pages as usize
    }
}

/// Result of a successful create.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EnclaveHandle {
    pub handle: HandleId,
    pub vm: VmId,
    pub vcpu: VcpuId,
    pub pcpu: PcpuId,
    /// Channel pages as the primary sees them (still mapped, `rw-`).
    pub channel_pages: Vec<IpaPage>,
    /// Private pages as the primary used to see them (now unmapped).
    pub private_pages: Vec<IpaPage>,
}

impl EnclaveHandle {
    /// First channel page in the enclave's own IPA space.
    pub fn enclave_channel_base(&self) -> IpaPage {
        IpaPage(self.private_pages.len() as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Hypercall {
    CreateEnclave { donated: Vec<IpaPage>, meta: ImageMeta },
    DestroyEnclave { handle: HandleId },
    InvokeEnclave { handle: HandleId },
    EnclaveExit,
}

impl Hypercall {
    pub fn name(&self) -> &'static str {
        match self {
            Hypercall::CreateEnclave { .. } => "create_enclave",
            Hypercall::DestroyEnclave { .. } => "destroy_enclave",
            Hypercall::InvokeEnclave { .. } => "invoke_enclave",
            Hypercall::EnclaveExit => "enclave_exit",
        }
    }

    fn handle(&self) -> Option<HandleId> {
        match self {
            Hypercall::DestroyEnclave { handle } | Hypercall::InvokeEnclave { handle } => Some(*handle),
            _ => None,
        }
    }

    fn primary_only(&self) -> bool {
        !matches!(self, Hypercall::EnclaveExit)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HvcOutcome {
    Created(EnclaveHandle),
    Destroyed,
    /// Control moved to another vCPU.
    Switched { to: VcpuId },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HvError {
    #[error("{vcpu} may not issue {call}")]
    PrivilegeViolation { vcpu: VcpuId, call: &'static str },
    #[error("no such vcpu {0}")]
    BadVcpu(VcpuId),
    #[error("{0} is not the running vcpu on its pcpu")]
    NotRunning(VcpuId),
    #[error("donated {0} is not mapped in the primary")]
    PageNotMapped(IpaPage),
    #[error("donated {0} is not writable by the primary")]
    PageNotWritable(IpaPage),
    #[error("{0} donated twice")]
    DuplicatePage(IpaPage),
    #[error("{0} is a live channel page of another enclave")]
    PageShared(IpaPage),
    #[error("donation of {donated} pages is below the {required} the image needs")]
    TooSmall { donated: usize, required: usize },
    #[error("image needs at least one memory page and one channel page")]
    BadImageMeta,
    #[error("vm table is full")]
    Exhausted,
    #[error("unknown {0}")]
    BadHandle(HandleId),
    #[error("{0} is destroyed")]
    Destroyed(HandleId),
    #[error("{0} is on a vcpu stack")]
    EnclaveActive(HandleId),
    #[error("{vcpu} is pinned to {pinned}, not {pcpu}")]
    WrongPcpu { vcpu: VcpuId, pinned: PcpuId, pcpu: PcpuId },
    #[error("{0} has no parent to yield to")]
    NoParent(VcpuId),
    #[error("{0} cannot be scheduled as a child")]
    NotSchedulable(VcpuId),
}

/// Deliberate defects for mutation testing of the harness oracles.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Mutations {
    pub skip_zeroize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HypervisorConfig {
    pub machine: MachineConfig,
    /// Upper bound on live VMs, primary included.
    pub max_vms: usize,
    #[doc(hidden)]
    pub mutations: Mutations,
}

impl Default for HypervisorConfig {
    fn default() -> Self {
        Self { machine: MachineConfig::default(), max_vms: 64, mutations: Mutations::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Timer {
    pcpu: PcpuId,
    target: VcpuId,
    remaining: u32,
}

#[derive(Debug, Clone)]
pub struct Hypervisor {
    machine: Machine,
    vms: Vec<Vm>,
    vcpus: Vec<Vcpu>,
    handles: BTreeMap<HandleId, EnclaveHandle>,
    channel_frames: BTreeSet<FrameNo>,
    next_handle: u32,
    max_vms: usize,
    mutations: Mutations,
    timers: Vec<Timer>,
    events: Vec<HvEvent>,
    /// Ledger as of each entry in `events`.
    ledgers: Vec<CostLedger>,
    last_touched: Vec<FrameNo>,
}

impl Hypervisor {
    /// Boots the primary VM with all frames identity-mapped.
    pub fn new(config: HypervisorConfig) -> Self {
        let mut machine = Machine::new(config.machine);
        let mut stage2 = Stage2Table::new(PRIMARY_VM);
        for f in 0..machine.frame_count() as u64 {
            stage2
                .map(&mut machine, IpaPage(f), FrameNo(f), Perms::RWX)
                .expect("fresh table");
        }
        let pcpu_ids: Vec<PcpuId> = machine.pcpus().iter().map(|p| p.id).collect();
        let mut vcpus = Vec::new();
        for pcpu in pcpu_ids {
            let id = VcpuId(vcpus.len() as u32);
            vcpus.push(Vcpu {
                id,
                vm: PRIMARY_VM,
                pcpu,
                head: None,
                tail: None,
                context: GuestContext::default(),
                pending_irqs: 0,
                resume: None,
                attached: true,
            });
            machine.pcpu_mut(pcpu).expect("pcpu exists").current_vcpu = Some(id);
        }
        let primary = Vm {
            id: PRIMARY_VM,
            kind: VmKind::Primary,
            state: VmState::Running,
            stage2,
            vcpus: vcpus.iter().map(|v| v.id).collect(),
            donation: None,
        };
        Self {
            machine,
            vms: vec![primary],
            vcpus,
            handles: BTreeMap::new(),
            channel_frames: BTreeSet::new(),
            next_handle: 1,
            max_vms: config.max_vms.max(1),
            mutations: config.mutations,
            timers: Vec::new(),
            events: Vec::new(),
            ledgers: Vec::new(),
            last_touched: Vec::new(),
        }
    }

    pub fn machine(&self) -> &Machine {
        &self.machine
    }

    pub fn vm(&self, id: VmId) -> Option<&Vm> {
        self.vms.get(id.0 as usize)
    }

    pub fn vms(&self) -> &[Vm] {
        &self.vms
    }

    pub fn primary(&self) -> &Vm {
        &self.vms[0]
    }

    pub fn vcpu(&self, id: VcpuId) -> Option<&Vcpu> {
        self.vcpus.get(id.0 as usize)
    }

    pub fn vcpus(&self) -> &[Vcpu] {
        &self.vcpus
    }

    /// The primary's vCPU pinned to `pcpu`.
    pub fn primary_vcpu(&self, pcpu: PcpuId) -> Option<VcpuId> {
        self.primary().vcpus.get(pcpu.0 as usize).copied()
    }

    pub fn current(&self, pcpu: PcpuId) -> Option<VcpuId> {
        self.machine.pcpu(pcpu).and_then(|p| p.current_vcpu)
    }

    pub fn handle(&self, id: HandleId) -> Option<&EnclaveHandle> {
        self.handles.get(&id)
    }

    pub fn handles(&self) -> impl Iterator<Item = &EnclaveHandle> {
        self.handles.values()
    }

    pub fn live_vm_count(&self) -> usize {
        self.vms.iter().filter(|v| v.state != VmState::Destroyed).count()
    }

    /// Frames currently shared between the primary and some enclave.
    pub fn channel_frames(&self) -> &BTreeSet<FrameNo> {
        &self.channel_frames
    }

    /// Mutable access to a vCPU's saved registers. Guest runtimes keep their
    /// execution state here across preemption.
    pub fn context_mut(&mut self, id: VcpuId) -> Option<&mut GuestContext> {
        self.vcpus.get_mut(id.0 as usize).map(|v| &mut v.context)
    }

    /// Consumes the reason the vCPU last regained the CPU.
    pub fn take_resume(&mut self, id: VcpuId) -> Option<ResumeReason> {
        self.vcpus.get_mut(id.0 as usize).and_then(|v| v.resume.take())
    }

    /// Acknowledges pending interrupts, returning how many there were.
    pub fn take_pending_irqs(&mut self, id: VcpuId) -> u32 {
        self.vcpus.get_mut(id.0 as usize).map(|v| std::mem::take(&mut v.pending_irqs)).unwrap_or(0)
    }

    /// Charges one trusted-application command of compute.
    pub fn charge_ta_command(&mut self) {
        self.machine.charge_ta_command();
    }

    pub fn events(&self) -> &[HvEvent] {
        &self.events
    }

    pub fn drain_events(&mut self) -> Vec<HvEvent> {
        self.ledgers.clear();
        std::mem::take(&mut self.events)
    }

    /// Drains events together with the ledger at the time each was logged.
    pub fn drain_logged(&mut self) -> Vec<(HvEvent, CostLedger)> {
        let ledgers = std::mem::take(&mut self.ledgers);
        std::mem::take(&mut self.events).into_iter().zip(ledgers).collect()
    }

    pub fn record(&mut self, event: HvEvent) {
        self.log(event);
    }

    pub(super) fn log(&mut self, event: HvEvent) {
        self.events.push(event);
        self.ledgers.push(self.machine.ledger());
    }

    /// Frames touched by the most recent successful guest access.
    pub fn last_touched(&self) -> &[FrameNo] {
        &self.last_touched
    }

    /// A guest memory access through `vm`'s stage-2 table. Faults are logged
    /// as events and returned.
    pub fn vm_access(&mut self, vm: VmId, ipa: u64, op: MemOp<'_>) -> Result<Vec<u8>, AccessFault> {
        let Some(v) = self.vms.get(vm.0 as usize) else {
            return Err(AccessFault { vm, ipa, access: op.access(), kind: crate::stage2::FaultKind::Unmapped });
        };
        match v.stage2.access(&mut self.machine, ipa, op) {
            Ok((bytes, touched)) => {
                self.last_touched = touched;
                Ok(bytes)
            }
            Err(fault) => {
                self.last_touched.clear();
                let vcpu = self.running_vcpu_of(vm);
                self.log(HvEvent::Fault { vcpu, fault });
                Err(fault)
            }
        }
    }

    pub fn vm_read(&mut self, vm: VmId, ipa: u64, len: usize) -> Result<Vec<u8>, AccessFault> {
        self.vm_access(vm, ipa, MemOp::Read(len))
    }

    pub fn vm_write(&mut self, vm: VmId, ipa: u64, data: &[u8]) -> Result<(), AccessFault> {
        self.vm_access(vm, ipa, MemOp::Write(data)).map(|_| ())
    }

    fn running_vcpu_of(&self, vm: VmId) -> Option<VcpuId> {
        self.machine
            .pcpus()
            .iter()
            .filter_map(|p| p.current_vcpu)
            .find(|v| self.vcpus[v.0 as usize].vm == vm)
    }

    /// Single hypercall entry point. Every call, including rejected ones, is
    /// charged and logged exactly once.
    pub fn dispatch(&mut self, caller: VcpuId, call: Hypercall) -> Result<HvcOutcome, HvError> {
        self.machine.charge_hypercall();
        let slot = self.events.len();
        let name = call.name();
        let handle = call.handle();
        let pcpu = self.vcpu(caller).map(|v| v.pcpu);
        self.log(HvEvent::Hypercall { pcpu, vcpu: caller, call: name, handle, result: Ok(String::new()) });

        let result = self.dispatch_inner(caller, call);

        let summary = match &result {
            Ok(HvcOutcome::Created(h)) => Ok(format!("created {} as {}", h.handle, h.vm)),
            Ok(HvcOutcome::Destroyed) => Ok("destroyed".to_string()),
            Ok(HvcOutcome::Switched { to }) => Ok(format!("switched to {to}")),
            Err(e) => Err(e.to_string()),
        };
        let created = match &result {
            Ok(HvcOutcome::Created(h)) => Some(h.handle),
            _ => None,
        };
        if let HvEvent::Hypercall { result, handle, .. } = &mut self.events[slot] {
            *result = summary;
            if created.is_some() {
                *handle = created;
            }
        }
        result
    }

    fn dispatch_inner(&mut self, caller: VcpuId, call: Hypercall) -> Result<HvcOutcome, HvError> {
        let vcpu = self.vcpu(caller).ok_or(HvError::BadVcpu(caller))?;
        if !vcpu.attached {
            return Err(HvError::BadVcpu(caller));
        }
        let kind = self.vms[vcpu.vm.0 as usize].kind;
        let privileged_ok = match kind {
            VmKind::Primary => call.primary_only(),
            VmKind::Enclave => !call.primary_only(),
        };
        if !privileged_ok {
            return Err(HvError::PrivilegeViolation { vcpu: caller, call: call.name() });
        }
        if self.current(vcpu.pcpu) != Some(caller) {
            return Err(HvError::NotRunning(caller));
        }
        match call {
            Hypercall::CreateEnclave { donated, meta } => self.create_enclave(caller, &donated, meta).map(HvcOutcome::Created),
            Hypercall::DestroyEnclave { handle } => self.destroy_enclave(caller, handle).map(|()| HvcOutcome::Destroyed),
            Hypercall::InvokeEnclave { handle } => self.invoke_enclave(caller, handle).map(|to| HvcOutcome::Switched { to }),
            Hypercall::EnclaveExit => self.enclave_exit(caller).map(|to| HvcOutcome::Switched { to }),
        }
    }

    /// Arms a one-shot timer interrupt for `target`, fired after `after`
    /// guest steps on `pcpu` (see [`Hypervisor::tick`]).
    pub fn arm_timer(&mut self, pcpu: PcpuId, target: VcpuId, after: u32) {
        self.timers.push(Timer { pcpu, target, remaining: after.max(1) });
    }

    pub fn armed_timers(&self) -> usize {
        self.timers.len()
    }

    pub fn cancel_timers(&mut self) {
        self.timers.clear();
    }

    /// Advances the timers of `pcpu` by one guest step and delivers any that
    /// expire, in arming order.
    pub fn tick(&mut self, pcpu: PcpuId) -> Vec<Result<IrqOutcome, HvError>> {
        let mut due = Vec::new();
        self.timers.retain_mut(|t| {
            if t.pcpu != pcpu {
                return true;
            }
            t.remaining -= 1;
            if t.remaining == 0 {
                due.push(t.target);
                false
            } else {
                true
            }
        });
        due.into_iter().map(|target| self.deliver_interrupt(pcpu, target)).collect()
    }
}

#[cfg(test)]
mod tests;
