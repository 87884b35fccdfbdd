//! Fixed adversary playbook against a compromised primary OS and a hostile
//! enclave.
//!
//! * (a) the primary reads and writes every page it donated as private
//! * (b) after destroy, the primary inspects every reclaimed page
//! * (c) mid-session, the primary searches its memory for wallet keys
//! * (d) an enclave issues primary-only hypercalls
//! * (e) an enclave touches IPAs outside its donation

use std::fmt;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::harness::oracle::{self, Violation};
use crate::harness::sim::{SimConfig, Simulation};
use crate::hypervisor::{HvEvent, Mutations};
use crate::machine::{MachineConfig, PAGE_SIZE};
use crate::stage2::IpaPage;
use crate::ta_runtime::{builtin_image, wallet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AttackResult {
    pub id: char,
    pub name: &'static str,
    pub attempts: usize,
    /// Attempts that were stopped or found nothing.
    pub contained: usize,
    pub detail: String,
}

impl AttackResult {
    pub fn pass(&self) -> bool {
        self.attempts > 0 && self.contained == self.attempts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub results: Vec<AttackResult>,
    pub violations: Vec<Violation>,
    pub elapsed: Duration,
}

impl AttackReport {
    pub fn all_contained(&self) -> bool {
        self.violations.is_empty() && self.results.iter().all(AttackResult::pass)
    }

    pub fn get(&self, id: char) -> Option<&AttackResult> {
        self.results.iter().find(|r| r.id == id)
    }
}

impl fmt::Display for AttackReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            let verdict = if r.pass() { "contained" } else { "BREACHED" };
            writeln!(f, "({}) {:<48} {:>5}/{:<5} {verdict}: {}", r.id, r.name, r.contained, r.attempts, r.detail)?;
        }
        for v in self.violations.iter().take(5) {
            writeln!(f, "VIOLATION step {} [{}] {}", v.step, v.oracle, v.detail)?;
        }
        if self.violations.len() > 5 {
            writeln!(f, "... {} more violations", self.violations.len() - 5)?;
        }
        let pct = |r: &AttackResult| 100.0 * r.contained as f64 / r.attempts.max(1) as f64;
        let worst = self.results.iter().map(pct).fold(100.0, f64::min);
        write!(f, "containment {worst:.1}% in {:.2?}", self.elapsed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttackConfig {
    pub machine: MachineConfig,
    /// Private pages of the victim wallet.
    pub victim_pages: u32,
    pub mutations: Mutations,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { machine: MachineConfig { frames: 2048, pcpus: 1 }, victim_pages: 256, mutations: Mutations::default() }
    }
}

pub fn attack_suite() -> AttackReport {
    attack_suite_with(AttackConfig::default())
}

pub fn attack_suite_with(config: AttackConfig) -> AttackReport {
    let started = Instant::now();
    let mut sim = Simulation::new(SimConfig {
        machine: config.machine,
        mutations: config.mutations,
        ..SimConfig::default()
    });
    let mut results = Vec::new();

    let victim = sim
        .create(&builtin_image("wallet", config.victim_pages, 1))
        .expect("victim wallet fits the attack machine");
    let handle = sim.os.enclave(victim).unwrap().handle.clone();
    sim.invoke(victim, wallet::CMD_CREATE_MASTER_KEY, b"attack-suite seed").unwrap();
    sim.invoke(victim, wallet::CMD_DERIVE_KEY, b"").unwrap();
    sim.invoke(victim, wallet::CMD_DERIVE_KEY, b"").unwrap();
    sim.invoke(victim, wallet::CMD_SIGN, &wallet::args::sign(1, b"transfer")).unwrap();
    let secrets = sim.secrets_of(victim);

    // (a)
    let (mut reads, mut writes) = (0, 0);
    for p in &handle.private_pages {
        reads += sim.primary_read(p.base(), PAGE_SIZE).is_err() as usize;
        writes += sim.primary_write(p.base(), &[0x41; 16]).is_err() as usize;
    }
    let n = handle.private_pages.len();
    results.push(AttackResult {
        id: 'a',
        name: "primary accesses donated private pages",
        attempts: 2 * n,
        contained: reads + writes,
        detail: format!("{reads}/{n} reads and {writes}/{n} writes faulted"),
    });

    // (c)
    let primary_frames: Vec<_> = sim.hv.primary().stage2.frames().collect();
    let mut exposed = 0;
    for s in &secrets {
        exposed += oracle::find_in_mapped(&sim.hv, &sim.hv.primary().stage2, s).len();
    }
    results.push(AttackResult {
        id: 'c',
        name: "primary searches its memory for wallet keys",
        attempts: primary_frames.len(),
        contained: primary_frames.len().saturating_sub(exposed),
        detail: format!("{} key patterns, {exposed} frames containing one", secrets.len()),
    });

    // (d) and (e) need a hostile enclave next to the victim
    let rogue = sim.create(&builtin_image("rogue", 4, 1)).expect("rogue fits");
    let rogue_vcpu = sim.os.enclave(rogue).unwrap().handle.vcpu;
    let victim_id = handle.handle.0.to_le_bytes();
    let mut refused = 0;
    for (cmd, args) in [(1u32, &[][..]), (2, &victim_id[..]), (3, &victim_id[..])] {
        let before = sim.step();
        let (_, out) = sim.invoke(rogue, cmd, args).unwrap();
        let rejected_in_trace = sim.trace().iter().filter(|e| e.step >= before).any(|e| {
            matches!(&e.event, HvEvent::Hypercall { vcpu, result: Err(msg), .. }
                if *vcpu == rogue_vcpu && msg.contains("may not issue"))
        });
        refused += (out.first() == Some(&0) && rejected_in_trace) as usize;
    }
    results.push(AttackResult {
        id: 'd',
        name: "enclave issues primary-only hypercalls",
        attempts: 3,
        contained: refused,
        detail: format!("{refused}/3 of create, invoke, destroy refused"),
    });

    let own = sim.os.enclave(rogue).unwrap().handle.private_pages.len() + 1;
    let span = (config.machine.frames - own) as u32;
    let mut got = 0;
    for mode in [0u8, 1] {
        let args = [&(own as u64).to_le_bytes()[..], &span.to_le_bytes()[..], &[mode]].concat();
        let (_, out) = sim.invoke(rogue, 6, &args).unwrap();
        got += u32::from_le_bytes(out[..4].try_into().unwrap()) as usize;
    }
    results.push(AttackResult {
        id: 'e',
        name: "enclave touches IPAs outside its donation",
        attempts: 2 * span as usize,
        contained: 2 * span as usize - got,
        detail: format!("IPA pages {own}..{}: {got} reads or writes got through", own + span as usize),
    });
    sim.destroy(rogue).unwrap();

    // (b)
    let donated: Vec<IpaPage> = handle.private_pages.iter().chain(&handle.channel_pages).copied().collect();
    sim.destroy(victim).unwrap();
    let nonzero = oracle::nonzero_bytes(&sim.hv, &donated);
    let surviving: usize = secrets.iter().map(|s| oracle::find_in_memory(&sim.hv, s).len()).sum();
    let clean = donated
        .iter()
        .filter(|p| oracle::nonzero_bytes(&sim.hv, std::slice::from_ref(p)) == 0)
        .count();
    results.push(AttackResult {
        id: 'b',
        name: "primary inspects reclaimed pages after destroy",
        attempts: donated.len(),
        contained: if surviving == 0 { clean } else { 0 },
        detail: format!("{nonzero} nonzero bytes in {} reclaimed pages, {surviving} key copies anywhere", donated.len()),
    });

    results.sort_by_key(|r| r.id);
    AttackReport { results, violations: sim.violations().to_vec(), elapsed: started.elapsed() }
}
