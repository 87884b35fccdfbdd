//! Enclave-side runtime: the serve loop and the trusted applications it
//! hosts.
//!
//! The loop runs as a small state machine, one phase per guest step, with
//! its position in the vCPU's saved `pc` so a timer can preempt it anywhere
//! and a later invoke picks up where it stopped:
//!
//! ```text
//! BOOT -> SERVE -> HANDLE -> COMPLETE -> SERVE ...
//! ```
//!
//! COMPLETE posts the result and exits in the same step, so an interrupt
//! can only land while the request is still outstanding.
//!
//! Private memory layout (enclave IPA):
//!
//! ```text
//! page 0          code blob, starting with the program tag "TA:<name>\0"
//! pages 1..P-1    scratch: request args, then the handler result
//! page P-1        program state
//! pages P..P+C    channel
//! ```
//!
//! Nothing about a running TA is kept host-side: registers live in the
//! vCPU context and everything else in enclave frames.

mod programs;
pub mod wallet;

use std::fmt;

use thiserror::Error;

use crate::channel::{ChannelError, ChannelView};
use crate::guest_os::EnclaveRunner;
use crate::harness::image::EnclaveImage;
use crate::hypervisor::{boot_regs, HvError, HvEvent, HvcOutcome, Hypercall, Hypervisor, VcpuId, VmId, VmKind};
use crate::machine::{PcpuId, PAGE_SIZE};
use crate::stage2::{AccessFault, IpaPage};

pub use programs::{Counter, Echo, Rogue};
pub use wallet::Wallet;

pub const TAG_PREFIX: &[u8] = b"TA:";
const TAG_MAX: usize = 64;

/// Serve-loop phases, stored in `GuestContext::pc`.
pub mod phase {
    pub const BOOT: u64 = 0;
    pub const SERVE: u64 = 1;
    pub const HANDLE: u64 = 2;
    pub const COMPLETE: u64 = 3;
}

// Runtime registers, after the boot registers.
const REG_PROGRAM: usize = 3;
const REG_CMD: usize = 4;
const REG_ARG_LEN: usize = 5;
const REG_RET_LEN: usize = 6;

const NO_PROGRAM: u64 = u64::MAX;
const FAILED: u64 = u64::MAX;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaError {
    #[error("unknown command {0}")]
    UnknownCommand(u32),
    #[error("malformed arguments: {0}")]
    BadArgs(&'static str),
    #[error("no master key")]
    NoMasterKey,
    #[error("no key with id {0}")]
    BadKeyId(u32),
    #[error("key store full")]
    KeyStoreFull,
    #[error("{len} bytes do not fit in {room} bytes of scratch")]
    NoScratch { len: usize, room: usize },
    #[error("state access out of range")]
    StateRange,
    #[error("no program loaded")]
    NoProgram,
    #[error(transparent)]
    Fault(#[from] AccessFault),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// What a handler can touch: its own VM's memory and the hypercall
/// interface, as its own vCPU.
pub struct TaEnv<'a> {
    hv: &'a mut Hypervisor,
    vm: VmId,
    vcpu: VcpuId,
    /// None when private memory is too small to hold a state page.
    state_base: Option<u64>,
}

impl TaEnv<'_> {
    pub fn vm(&self) -> VmId {
        self.vm
    }

    pub fn vcpu(&self) -> VcpuId {
        self.vcpu
    }

    /// Reads from the program's state page.
    pub fn load_state(&mut self, offset: usize, len: usize) -> Result<Vec<u8>, TaError> {
        let base = self.state_base.filter(|_| offset + len <= PAGE_SIZE).ok_or(TaError::StateRange)?;
        Ok(self.hv.vm_read(self.vm, base + offset as u64, len)?)
    }

    pub fn store_state(&mut self, offset: usize, data: &[u8]) -> Result<(), TaError> {
        let base = self.state_base.filter(|_| offset + data.len() <= PAGE_SIZE).ok_or(TaError::StateRange)?;
        Ok(self.hv.vm_write(self.vm, base + offset as u64, data)?)
    }

    /// Arbitrary access through this VM's stage-2 table.
    pub fn read(&mut self, ipa: u64, len: usize) -> Result<Vec<u8>, AccessFault> {
        self.hv.vm_read(self.vm, ipa, len)
    }

    pub fn write(&mut self, ipa: u64, data: &[u8]) -> Result<(), AccessFault> {
        self.hv.vm_write(self.vm, ipa, data)
    }

    pub fn hypercall(&mut self, call: Hypercall) -> Result<HvcOutcome, HvError> {
        self.hv.dispatch(self.vcpu, call)
    }
}

/// A trusted application: a set of numbered command handlers.
pub trait TaProgram {
    /// Matched against the tag at the start of the code blob.
    fn name(&self) -> &'static str;

    /// Length of the entry command table written into images.
    fn command_count(&self) -> u32;

    fn handle(&self, env: &mut TaEnv<'_>, cmd_id: u32, args: &[u8]) -> Result<Vec<u8>, TaError>;
}

impl fmt::Debug for dyn TaProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TaProgram({})", self.name())
    }
}

/// Code blob naming `program`.
pub fn code_blob(name: &str) -> Vec<u8> {
    let mut code = TAG_PREFIX.to_vec();
    code.extend_from_slice(name.as_bytes());
    code.push(0);
    code
}

/// Enclave image for a built-in program.
pub fn builtin_image(name: &str, mem_pages: u32, channel_pages: u32) -> EnclaveImage {
    let count = TaHost::new().program(name).map(|p| p.command_count()).unwrap_or(0);
    EnclaveImage::new(mem_pages, channel_pages, count, code_blob(name)).expect("tag fits in one page")
}

/// Runs the serve loop for every enclave vCPU.
#[derive(Debug)]
pub struct TaHost {
    programs: Vec<Box<dyn TaProgram>>,
    step_limit: u64,
    steps: u64,
}

impl Default for TaHost {
    fn default() -> Self {
        Self::new()
    }
}

impl TaHost {
    /// Host with the built-in programs: echo, counter, wallet, rogue.
    pub fn new() -> Self {
        let mut host = Self { programs: Vec::new(), step_limit: 10_000, steps: 0 };
        host.register(Box::new(Echo));
        host.register(Box::new(Counter));
        host.register(Box::new(Wallet));
        host.register(Box::new(Rogue));
        host
    }

    /// Adds a program. A later registration with the same name wins.
    pub fn register(&mut self, program: Box<dyn TaProgram>) {
        self.programs.push(program);
    }

    pub fn program(&self, name: &str) -> Option<&dyn TaProgram> {
        self.programs.iter().rev().find(|p| p.name() == name).map(|p| p.as_ref())
    }

    /// Steps one `run_until_resumed` may take before giving up.
    pub fn set_step_limit(&mut self, limit: u64) {
        self.step_limit = limit;
    }

    /// Guest steps executed so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Executes one phase of `vcpu`'s serve loop, then advances the pCPU's
    /// timers by one step.
    pub fn step(&mut self, hv: &mut Hypervisor, vcpu: VcpuId) -> Result<(), String> {
        let v = hv.vcpu(vcpu).ok_or("no such vcpu")?;
        let (vm, pcpu, ctx) = (v.vm, v.pcpu, v.context);
        let private = ctx.regs[boot_regs::PRIVATE_PAGES];
        let channel = ChannelView::contiguous(
            vm,
            IpaPage(ctx.regs[boot_regs::CHANNEL_BASE_PAGE]),
            ctx.regs[boot_regs::CHANNEL_PAGES] as usize,
        );
        let mut regs = ctx.regs;
        let next = match ctx.pc {
            phase::BOOT => {
                regs[REG_PROGRAM] = self.load(hv, vm);
                phase::SERVE
            }
            phase::SERVE => match channel.serve(hv) {
                Ok((cmd, args)) => {
                    regs[REG_CMD] = cmd as u64;
                    regs[REG_ARG_LEN] = args.len() as u64;
                    match write_scratch(hv, vm, private, &args) {
                        Ok(()) => phase::HANDLE,
                        Err(e) => {
                            note(hv, vm, "ta_error", &e);
                            regs[REG_RET_LEN] = FAILED;
                            phase::COMPLETE
                        }
                    }
                }
                // spurious invoke: nothing to do
                Err(_) => return self.exit(hv, vcpu, pcpu, regs),
            },
            phase::HANDLE => {
                hv.charge_ta_command();
                let cmd = regs[REG_CMD] as u32;
                let result = self.run_handler(hv, vm, vcpu, private, regs[REG_PROGRAM], cmd, regs[REG_ARG_LEN] as usize);
                match result {
                    Ok(len) => regs[REG_RET_LEN] = len as u64,
                    Err(e) => {
                        note(hv, vm, "ta_error", &e);
                        regs[REG_RET_LEN] = FAILED;
                    }
                }
                phase::COMPLETE
            }
            phase::COMPLETE => {
                let done = match regs[REG_RET_LEN] {
                    FAILED => channel.fail(hv),
                    len => match hv.vm_read(vm, scratch_base(), len as usize) {
                        Ok(out) => channel.complete(hv, &out),
                        Err(f) => Err(ChannelError::Fault(f)),
                    },
                };
                if let Err(e) = done {
                    note(hv, vm, "ta_error", &e);
                }
                return self.exit(hv, vcpu, pcpu, regs);
            }
            other => return Err(format!("{vcpu} has corrupt pc {other}")),
        };
        set_context(hv, vcpu, next, regs);
        self.tick(hv, pcpu);
        Ok(())
    }

    fn exit(&mut self, hv: &mut Hypervisor, vcpu: VcpuId, pcpu: PcpuId, regs: [u64; 8]) -> Result<(), String> {
        set_context(hv, vcpu, phase::SERVE, regs);
        let exited = hv.dispatch(vcpu, Hypercall::EnclaveExit).map(|_| ()).map_err(|e| e.to_string());
        self.tick(hv, pcpu);
        exited
    }

    fn tick(&mut self, hv: &mut Hypervisor, pcpu: PcpuId) {
        self.steps += 1;
        hv.tick(pcpu);
    }

    /// Finds the program named by the tag at IPA 0.
    fn load(&self, hv: &mut Hypervisor, vm: VmId) -> u64 {
        let Ok(head) = hv.vm_read(vm, 0, TAG_MAX) else { return NO_PROGRAM };
        let Some(rest) = head.strip_prefix(TAG_PREFIX) else { return NO_PROGRAM };
        let name = &rest[..rest.iter().position(|&b| b == 0).unwrap_or(rest.len())];
        self.programs
            .iter()
            .rposition(|p| p.name().as_bytes() == name)
            .map_or(NO_PROGRAM, |i| i as u64)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_handler(
        &self,
        hv: &mut Hypervisor,
        vm: VmId,
        vcpu: VcpuId,
        private: u64,
        program: u64,
        cmd: u32,
        arg_len: usize,
    ) -> Result<usize, TaError> {
        let program = self.programs.get(program as usize).ok_or(TaError::NoProgram)?;
        let args = hv.vm_read(vm, scratch_base(), arg_len)?;
        let state_base = (private >= 2).then(|| (private - 1) * PAGE_SIZE as u64);
        let mut env = TaEnv { hv, vm, vcpu, state_base };
        let out = program.handle(&mut env, cmd, &args)?;
        write_scratch(hv, vm, private, &out)?;
        Ok(out.len())
    }
}

fn scratch_base() -> u64 {
    PAGE_SIZE as u64
}

fn write_scratch(hv: &mut Hypervisor, vm: VmId, private: u64, data: &[u8]) -> Result<(), TaError> {
    let room = (private.saturating_sub(2) as usize) * PAGE_SIZE;
    if data.len() > room {
        return Err(TaError::NoScratch { len: data.len(), room });
    }
    Ok(hv.vm_write(vm, scratch_base(), data)?)
}

fn set_context(hv: &mut Hypervisor, vcpu: VcpuId, pc: u64, regs: [u64; 8]) {
    let ctx = hv.context_mut(vcpu).expect("stepping a live vcpu");
    ctx.pc = pc;
    ctx.regs = regs;
}

fn note(hv: &mut Hypervisor, vm: VmId, tag: &str, detail: &dyn fmt::Display) {
    hv.record(HvEvent::Note { vm: Some(vm), tag: tag.to_string(), detail: detail.to_string() });
}

impl EnclaveRunner for TaHost {
    fn run_until_resumed(&mut self, hv: &mut Hypervisor, pcpu: PcpuId, caller: VcpuId) -> Result<(), String> {
        let budget = self.steps + self.step_limit;
        loop {
            let top = hv.current(pcpu).ok_or_else(|| format!("{pcpu} is idle"))?;
            if top == caller {
                return Ok(());
            }
            if self.steps >= budget {
                return Err(format!("{top} still running after {} steps", self.step_limit));
            }
            let vm = hv.vcpu(top).map(|v| v.vm).ok_or("bad vcpu")?;
            if hv.vm(vm).map(|v| v.kind) != Some(VmKind::Enclave) {
                return Err(format!("{top} is not an enclave vcpu"));
            }
            self.step(hv, top)?;
        }
    }
}
