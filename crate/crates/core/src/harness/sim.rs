//! A whole simulated system (hypervisor, primary OS, enclave runtime) with
//! every oracle re-checked after each operation.

use std::collections::BTreeMap;

use crate::channel::ChannelStatus;
use crate::guest_os::{DriverError, Fd, GuestOs, GuestOsConfig};
use crate::harness::image::EnclaveImage;
use crate::harness::oracle::{self, Violation};
use crate::harness::trace::TraceEvent;
use crate::hypervisor::{
    HvError, HvEvent, HvcOutcome, Hypercall, Hypervisor, HypervisorConfig, ImageMeta, IrqOutcome, Mutations,
    VcpuId, VmId, PRIMARY_VM,
};
use crate::machine::{MachineConfig, PcpuId};
use crate::stage2::{AccessFault, IpaPage};
use crate::ta_runtime::{wallet, TaHost, TAG_PREFIX};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimConfig {
    pub machine: MachineConfig,
    pub max_vms: usize,
    pub reserved_pages: u64,
    /// Keep trace records in memory. Oracles run either way.
    pub keep_trace: bool,
    pub mutations: Mutations,
}

impl Default for SimConfig {
    fn default() -> Self {
        let hv = HypervisorConfig::default();
        Self {
            machine: hv.machine,
            max_vms: hv.max_vms,
            reserved_pages: GuestOsConfig::default().reserved_pages,
            keep_trace: true,
            mutations: Mutations::default(),
        }
    }
}

impl SimConfig {
    pub fn with_machine(frames: usize, pcpus: usize) -> Self {
        Self { machine: MachineConfig { frames, pcpus }, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
struct OpenEnclave {
    vm: VmId,
    program: String,
}

pub struct Simulation {
    pub hv: Hypervisor,
    pub os: GuestOs,
    pub ta: TaHost,
    keep_trace: bool,
    trace: Vec<TraceEvent>,
    next_step: u64,
    violations: Vec<Violation>,
    enclaves: BTreeMap<Fd, OpenEnclave>,
    /// Secret byte patterns per enclave, learned from the requests we sent.
    secrets: BTreeMap<VmId, Vec<Vec<u8>>>,
    wallet_master: BTreeMap<VmId, [u8; wallet::KEY_LEN]>,
}

/// Program name from a code blob tag, if it has one.
pub fn program_of(image: &EnclaveImage) -> String {
    image
        .code
        .strip_prefix(TAG_PREFIX)
        .map(|rest| {
            let end = rest.iter().position(|&b| b == 0).unwrap_or(rest.len());
            String::from_utf8_lossy(&rest[..end]).into_owned()
        })
        .unwrap_or_default()
}

impl Simulation {
    pub fn new(config: SimConfig) -> Self {
        let hv = Hypervisor::new(HypervisorConfig {
            machine: config.machine,
            max_vms: config.max_vms,
            mutations: config.mutations,
        });
        let os = GuestOs::new(&hv, GuestOsConfig { reserved_pages: config.reserved_pages });
        let mut sim = Self {
            hv,
            os,
            ta: TaHost::new(),
            keep_trace: config.keep_trace,
            trace: Vec::new(),
            next_step: 0,
            violations: Vec::new(),
            enclaves: BTreeMap::new(),
            secrets: BTreeMap::new(),
            wallet_master: BTreeMap::new(),
        };
        sim.observe();
        sim
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.trace)
    }

    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }

    /// Step number the next trace record will get.
    pub fn step(&self) -> u64 {
        self.next_step
    }

    pub fn vm_of(&self, fd: Fd) -> Option<VmId> {
        self.enclaves.get(&fd).map(|e| e.vm)
    }

    /// Program named by the image `fd` was created from.
    pub fn program(&self, fd: Fd) -> Option<&str> {
        self.enclaves.get(&fd).map(|e| e.program.as_str())
    }

    pub fn open_fds(&self) -> Vec<Fd> {
        self.enclaves.keys().copied().collect()
    }

    fn violation(&mut self, oracle: &'static str, detail: String) {
        self.violations.push(Violation { step: self.next_step.saturating_sub(1), oracle, detail });
    }

    /// Annotates the trace.
    pub fn note(&mut self, tag: &str, detail: impl Into<String>) {
        self.hv.record(HvEvent::Note { vm: None, tag: tag.to_string(), detail: detail.into() });
        self.observe();
    }

    /// Moves pending hypervisor events into the trace and re-runs every
    /// oracle.
    pub fn observe(&mut self) {
        for (event, ledger) in self.hv.drain_logged() {
            if let HvEvent::PageReturned { frame, zeroed: false, enclave, .. } = &event {
                let detail = format!("{frame} of {enclave} returned to the primary with enclave data in it");
                self.violations.push(Violation { step: self.next_step, oracle: "zeroize_before_remap", detail });
            }
            if self.keep_trace {
                self.trace.push(TraceEvent::new(self.next_step, event, ledger));
            }
            self.next_step += 1;
        }
        let checks: [(&'static str, Vec<String>); 3] = [
            ("frame_exclusivity", oracle::frame_exclusivity(&self.hv)),
            ("stack_links", oracle::stack_links(&self.hv)),
            ("allocator_conservation", oracle::allocator_conservation(&self.os, &self.hv)),
        ];
        for (name, problems) in checks {
            for p in problems {
                self.violation(name, p);
            }
        }
        let leaks: Vec<String> = self
            .secrets
            .iter()
            .flat_map(|(vm, pats)| pats.iter().map(move |p| (vm, p)))
            .filter_map(|(vm, p)| {
                let hits = oracle::find_in_mapped(&self.hv, &self.hv.primary().stage2, p);
                (!hits.is_empty()).then(|| format!("secret of {vm} visible to the primary in {hits:?}"))
            })
            .collect();
        for l in leaks {
            self.violation("secret_confinement", l);
        }
    }

    pub fn set_cpu(&mut self, pcpu: PcpuId) {
        self.os.set_cpu(pcpu);
    }

    /// `driver_create`, checking that a failure changes nothing.
    pub fn create(&mut self, image: &EnclaveImage) -> Result<Fd, DriverError> {
        let tables = oracle::stage2_snapshot(&self.hv);
        let alloc = self.os.allocator().clone();
        let result = self.os.driver_create(&mut self.hv, image);
        match &result {
            Ok(fd) => {
                let vm = self.os.enclave(*fd).expect("just created").handle.vm;
                self.enclaves.insert(*fd, OpenEnclave { vm, program: program_of(image) });
            }
            Err(e) => self.check_unchanged(&tables, &alloc, e),
        }
        self.observe();
        result
    }

    fn check_unchanged(
        &mut self,
        tables: &[BTreeMap<IpaPage, crate::stage2::Mapping>],
        alloc: &crate::guest_os::OsAllocator,
        err: &dyn std::fmt::Display,
    ) {
        if oracle::stage2_snapshot(&self.hv) != tables {
            self.violation("failure_atomicity", format!("stage-2 tables changed by failed create ({err})"));
        }
        if self.os.allocator() != alloc {
            self.violation("failure_atomicity", format!("allocator changed by failed create ({err})"));
        }
    }

    /// A create hypercall straight from the primary, bypassing the driver.
    /// Meant for failure injection: a success is flagged as a violation.
    pub fn inject_bad_create(&mut self, donated: Vec<IpaPage>, meta: ImageMeta) -> Result<HvcOutcome, HvError> {
        let tables = oracle::stage2_snapshot(&self.hv);
        let alloc = self.os.allocator().clone();
        let caller = self.hv.primary_vcpu(self.os.cpu()).expect("primary vcpu");
        let result = self.hv.dispatch(caller, Hypercall::CreateEnclave { donated, meta });
        match &result {
            Ok(_) => self.violation("failure_injection", "malformed create was accepted".into()),
            Err(e) => self.check_unchanged(&tables, &alloc, e),
        }
        self.observe();
        result
    }

    pub fn invoke(&mut self, fd: Fd, cmd: u32, args: &[u8]) -> Result<(ChannelStatus, Vec<u8>), DriverError> {
        let result = self.os.driver_invoke(&mut self.hv, &mut self.ta, fd, cmd, args);
        if let Ok((ChannelStatus::Done, out)) = &result {
            self.learn_secrets(fd, cmd, args, out);
        }
        self.observe();
        result
    }

    pub fn resume(&mut self, fd: Fd) -> Result<(ChannelStatus, Vec<u8>), DriverError> {
        let result = self.os.driver_resume(&mut self.hv, &mut self.ta, fd);
        self.observe();
        result
    }

    /// Wallet secrets follow from the seed we passed in, so the harness can
    /// compute what to look for.
    fn learn_secrets(&mut self, fd: Fd, cmd: u32, args: &[u8], out: &[u8]) {
        let Some(e) = self.enclaves.get(&fd) else { return };
        if e.program != "wallet" {
            return;
        }
        let vm = e.vm;
        match cmd {
            wallet::CMD_CREATE_MASTER_KEY => {
                let master = wallet::master_from_seed(args);
                self.wallet_master.insert(vm, master);
                self.secrets.entry(vm).or_default().push(master.to_vec());
            }
            wallet::CMD_DERIVE_KEY if out.len() == 4 => {
                if let Some(master) = self.wallet_master.get(&vm) {
                    let id = u32::from_le_bytes(out.try_into().expect("4 bytes"));
                    let key = wallet::derive(master, id);
                    self.secrets.entry(vm).or_default().push(key.to_vec());
                }
            }
            _ => {}
        }
    }

    /// Secrets the harness knows about for `fd`'s enclave.
    pub fn secrets_of(&self, fd: Fd) -> Vec<Vec<u8>> {
        self.vm_of(fd).and_then(|vm| self.secrets.get(&vm)).cloned().unwrap_or_default()
    }

    /// `driver_destroy`, then a full-memory scan for the enclave's secrets.
    pub fn destroy(&mut self, fd: Fd) -> Result<(), DriverError> {
        let donated: Vec<IpaPage> = match self.os.enclave(fd) {
            Ok(e) => e.handle.private_pages.iter().chain(&e.handle.channel_pages).copied().collect(),
            Err(_) => Vec::new(),
        };
        let result = self.os.driver_destroy(&mut self.hv, fd);
        self.observe();
        if result.is_ok() {
            // independent of what the hypervisor reports about itself
            let dirty = oracle::nonzero_bytes(&self.hv, &donated);
            if dirty > 0 {
                self.violation("zeroize_before_remap", format!("{dirty} nonzero bytes in pages reclaimed from {fd}"));
            }
            let e = self.enclaves.remove(&fd).expect("open fd is tracked");
            self.wallet_master.remove(&e.vm);
            for secret in self.secrets.remove(&e.vm).unwrap_or_default() {
                let hits = oracle::find_in_memory(&self.hv, &secret).len();
                if hits > 0 {
                    self.violation("post_destroy_scan", format!("{hits} copies of a secret of {} survive", e.vm));
                }
            }
        }
        result
    }

    /// The primary touching memory directly, as a compromised OS would.
    pub fn primary_read(&mut self, ipa: u64, len: usize) -> Result<Vec<u8>, AccessFault> {
        let r = self.hv.vm_read(PRIMARY_VM, ipa, len);
        self.observe();
        r
    }

    pub fn primary_write(&mut self, ipa: u64, data: &[u8]) -> Result<(), AccessFault> {
        let r = self.hv.vm_write(PRIMARY_VM, ipa, data);
        self.observe();
        r
    }

    pub fn interrupt(&mut self, pcpu: PcpuId, target: VcpuId) -> Result<IrqOutcome, HvError> {
        let r = self.hv.deliver_interrupt(pcpu, target);
        self.observe();
        r
    }

    /// Arms a timer for the primary vCPU of `pcpu`.
    pub fn arm_preemption(&mut self, pcpu: PcpuId, after_steps: u32) {
        let target = self.hv.primary_vcpu(pcpu).expect("primary vcpu");
        self.hv.arm_timer(pcpu, target, after_steps);
    }
}
