//! Seeded random walk over driver calls, raw hypercalls and adversary moves.
//!
//! Every step runs through [`Simulation`], so every oracle is checked after
//! every step; on top of that the pCPU stacks are compared against a
//! [`StackModel`] that expects only the primary on each core between calls.
//! The first violation stops the run. Re-running the same seed for
//! `failure.op + 1` ops reproduces it.

use std::fmt;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::channel::ChannelStatus;
use crate::guest_os::Fd;
use crate::harness::image::EnclaveImage;
use crate::harness::oracle::{StackModel, Violation};
use crate::harness::sim::{SimConfig, Simulation};
use crate::harness::trace::TraceEvent;
use crate::hypervisor::{ImageMeta, Mutations};
use crate::machine::{MachineConfig, PcpuId, PAGE_SIZE};
use crate::stage2::IpaPage;
use crate::ta_runtime::{builtin_image, code_blob, wallet};

const PROGRAMS: [&str; 4] = ["echo", "counter", "wallet", "rogue"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FuzzConfig {
    pub ops: u64,
    pub seed: u64,
    pub machine: MachineConfig,
    /// Open enclaves the walk aims to stay under.
    pub max_open: usize,
    pub keep_trace: bool,
    pub mutations: Mutations,
}

impl FuzzConfig {
    pub fn new(ops: u64, seed: u64) -> Self {
        Self {
            ops,
            seed,
            machine: MachineConfig { frames: 384, pcpus: 2 },
            max_open: 6,
            keep_trace: false,
            mutations: Mutations::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FuzzFailure {
    pub seed: u64,
    /// Index of the op after which the violation was seen.
    pub op: u64,
    pub action: String,
    pub violation: Violation,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FuzzStats {
    pub creates: u64,
    pub failed_creates: u64,
    pub injected_failures: u64,
    pub invokes: u64,
    pub preemptions: u64,
    pub resumes: u64,
    /// Destroys of an enclave that had been created and used or not.
    pub lifecycles: u64,
    pub contained_peeks: u64,
    pub interrupts: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FuzzReport {
    pub seed: u64,
    pub ops_run: u64,
    pub stats: FuzzStats,
    pub failure: Option<FuzzFailure>,
    #[serde(skip)]
    pub trace: Vec<TraceEvent>,
}

impl FuzzReport {
    pub fn pass(&self) -> bool {
        self.failure.is_none()
    }
}

impl fmt::Display for FuzzReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = &self.stats;
        writeln!(f, "{} ops, seed {}", self.ops_run, self.seed)?;
        writeln!(f, "  creates {} ({} refused), injected failures {}", s.creates, s.failed_creates, s.injected_failures)?;
        writeln!(f, "  invokes {}, preemptions {}, resumes {}", s.invokes, s.preemptions, s.resumes)?;
        writeln!(f, "  lifecycles {}, contained peeks {}, interrupts {}", s.lifecycles, s.contained_peeks, s.interrupts)?;
        match &self.failure {
            None => write!(f, "verdict: pass"),
            Some(x) => write!(
                f,
                "verdict: FAIL at op {} ({}): [{}] {}\nreproduce with --ops {} --seed {}",
                x.op,
                x.action,
                x.violation.oracle,
                x.violation.detail,
                x.op + 1,
                x.seed
            ),
        }
    }
}

pub fn fuzz(ops: u64, seed: u64) -> FuzzReport {
    fuzz_with(FuzzConfig::new(ops, seed))
}

struct Walk {
    sim: Simulation,
    rng: ChaCha8Rng,
    stats: FuzzStats,
    max_open: usize,
    preempted: Vec<Fd>,
    /// Rogue TA violations reported back through its reply.
    extra: Vec<String>,
}

pub fn fuzz_with(config: FuzzConfig) -> FuzzReport {
    let sim = Simulation::new(SimConfig {
        machine: config.machine,
        keep_trace: config.keep_trace,
        mutations: config.mutations,
        ..SimConfig::default()
    });
    let mut w = Walk {
        sim,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        stats: FuzzStats::default(),
        max_open: config.max_open,
        preempted: Vec::new(),
        extra: Vec::new(),
    };
    let mut failure = None;
    let mut ops_run = 0;
    for op in 0..config.ops {
        let action = w.step();
        ops_run = op + 1;
        let model = StackModel::new(&w.sim.hv).compare(&w.sim.hv);
        let found = w
            .sim
            .violations()
            .first()
            .cloned()
            .or_else(|| {
                model.first().map(|d| Violation { step: w.sim.step(), oracle: "stack_model", detail: d.clone() })
            })
            .or_else(|| {
                w.extra.first().map(|d| Violation { step: w.sim.step(), oracle: "isolation", detail: d.clone() })
            });
        if let Some(violation) = found {
            failure = Some(FuzzFailure { seed: config.seed, op, action, violation });
            break;
        }
    }
    FuzzReport { seed: config.seed, ops_run, stats: w.stats, failure, trace: w.sim.take_trace() }
}

impl Walk {
    fn pick_fd(&mut self) -> Option<Fd> {
        self.sim.open_fds().choose(&mut self.rng).copied()
    }

    fn step(&mut self) -> String {
        let open = self.sim.open_fds().len();
        let roll = self.rng.random_range(0..100);
        match roll {
            0..=19 if open < self.max_open => self.create(),
            0..=19 => self.destroy(),
            20..=26 => self.bad_create(),
            27..=54 => self.invoke(),
            55..=62 => self.resume(),
            63..=79 => self.destroy(),
            80..=91 => self.peek(),
            _ => self.interrupt(),
        }
    }

    fn use_random_cpu(&mut self) -> PcpuId {
        let pcpus = self.sim.hv.machine().pcpus().len() as u32;
        let cpu = PcpuId(self.rng.random_range(0..pcpus));
        self.sim.set_cpu(cpu);
        cpu
    }

    fn create(&mut self) -> String {
        let program = *PROGRAMS.choose(&mut self.rng).unwrap();
        let mem = self.rng.random_range(1..=24);
        let chan = self.rng.random_range(1..=3);
        let cpu = self.use_random_cpu();
        let r = self.sim.create(&builtin_image(program, mem, chan));
        self.stats.creates += 1;
        self.stats.failed_creates += r.is_err() as u64;
        format!("create {program} {mem}+{chan} on {cpu}: {}", r.map_or_else(|e| e.to_string(), |fd| fd.to_string()))
    }

    /// Creates that must fail and leave everything as it was.
    fn bad_create(&mut self) -> String {
        self.stats.injected_failures += 1;
        let frames = self.sim.hv.machine().frame_count() as u64;
        let free: Vec<IpaPage> = self.sim.os.allocator().free_pages().iter().copied().collect();
        let owned: Vec<IpaPage> = self.sim.os.allocator().allocations().values().flatten().copied().collect();
        let take = |rng: &mut ChaCha8Rng, n: usize| -> Vec<IpaPage> { free.choose_multiple(rng, n).copied().collect() };
        let kind = self.rng.random_range(0..6);
        let (donated, meta) = match kind {
            0 => {
                // more pages than the machine has
                let img = EnclaveImage::new(frames as u32, 1, 1, code_blob("echo")).unwrap();
                let cpu = self.use_random_cpu();
                let r = self.sim.create(&img);
                return format!("oversized create on {cpu}: {}", r.map_or_else(|e| e.to_string(), |fd| fd.to_string()));
            }
            1 => {
                let mut d = take(&mut self.rng, 3);
                if let Some(first) = d.first().copied() {
                    d.push(first);
                }
                (d, ImageMeta { mem_pages: 3, channel_pages: 1 })
            }
            2 => {
                let mut d = take(&mut self.rng, 2);
                d.push(IpaPage(frames + self.rng.random_range(0..64)));
                (d, ImageMeta { mem_pages: 2, channel_pages: 1 })
            }
            3 if !owned.is_empty() => {
                let mut d = take(&mut self.rng, 2);
                d.push(*owned.choose(&mut self.rng).unwrap());
                (d, ImageMeta { mem_pages: 2, channel_pages: 1 })
            }
            4 => {
                let n = self.rng.random_range(2..6);
                (take(&mut self.rng, n), ImageMeta { mem_pages: n as u32 + 1, channel_pages: 1 })
            }
            _ => (Vec::new(), ImageMeta { mem_pages: 0, channel_pages: 0 }),
        };
        let label = format!("bad create {kind} {donated:?}");
        let r = self.sim.inject_bad_create(donated, meta);
        format!("{label}: {:?}", r.err())
    }

    fn command(&mut self, program: &str) -> (u32, Vec<u8>) {
        let rng = &mut self.rng;
        match program {
            "wallet" => {
                let cmd = rng.random_range(1..=6);
                let id = rng.random_range(0..3);
                let args = match cmd {
                    wallet::CMD_CREATE_MASTER_KEY => rng.random::<[u8; 16]>().to_vec(),
                    wallet::CMD_SIGN => wallet::args::sign(id, &rng.random::<[u8; 8]>()),
                    wallet::CMD_VERIFY => wallet::args::verify(id, &[rng.random(); wallet::TAG_LEN], b"m"),
                    wallet::CMD_DERIVE_KEY => Vec::new(),
                    _ => wallet::args::key_id(id),
                };
                (cmd, args)
            }
            "rogue" => {
                let frames = self.sim.hv.machine().frame_count() as u64;
                match rng.random_range(1..=5) {
                    c @ (1..=3) => (c, rng.random_range(0u32..8).to_le_bytes().to_vec()),
                    4 => {
                        let ipa = rng.random_range(0..frames) * PAGE_SIZE as u64;
                        (4, [&ipa.to_le_bytes()[..], &16u32.to_le_bytes()].concat())
                    }
                    _ => {
                        let ipa = rng.random_range(0..frames) * PAGE_SIZE as u64;
                        (5, [&ipa.to_le_bytes()[..], b"rogue!"].concat())
                    }
                }
            }
            _ => {
                let len = rng.random_range(0..64);
                let args = (0..len).map(|_| rng.random()).collect();
                (rng.random_range(0..3), args)
            }
        }
    }

    fn invoke(&mut self) -> String {
        let Some(fd) = self.pick_fd() else { return self.create() };
        let e = self.sim.os.enclave(fd).unwrap();
        let (pcpu, vm) = (e.handle.pcpu, e.handle.vm);
        let private = e.handle.private_pages.len() as u64 + e.handle.channel_pages.len() as u64;
        let program = self.sim.program(fd).unwrap_or_default().to_string();
        // usually the right core, sometimes not
        if self.rng.random_bool(0.9) {
            self.sim.set_cpu(pcpu);
        } else {
            self.use_random_cpu();
        }
        if self.rng.random_bool(0.25) {
            let after = self.rng.random_range(1..=4);
            self.sim.arm_preemption(self.sim.os.cpu(), after);
        }
        let (cmd, args) = self.command(&program);
        let r = self.sim.invoke(fd, cmd, &args);
        self.stats.invokes += 1;
        // a reply of 1 from the rogue means it got away with something
        if program == "rogue" {
            if let Ok((ChannelStatus::Done, out)) = &r {
                let inside = match cmd {
                    4 | 5 => u64::from_le_bytes(args[..8].try_into().unwrap()) / PAGE_SIZE as u64 >= private,
                    _ => true,
                };
                if out.first() == Some(&1) && inside {
                    self.extra.push(format!("rogue {vm} succeeded with cmd {cmd} {args:?}"));
                }
            }
        }
        self.disarm();
        match r {
            Ok((ChannelStatus::Preempted, _)) => {
                self.stats.preemptions += 1;
                self.preempted.push(fd);
                format!("invoke {fd} cmd {cmd}: preempted")
            }
            Ok((status, out)) => format!("invoke {fd} cmd {cmd}: {status:?} {} bytes", out.len()),
            Err(e) => format!("invoke {fd} cmd {cmd}: {e}"),
        }
    }

    /// Timers that did not fire would hit some later call; clear them.
    fn disarm(&mut self) {
        self.sim.hv.cancel_timers();
    }

    fn resume(&mut self) -> String {
        self.preempted.retain(|fd| self.sim.vm_of(*fd).is_some());
        let Some(&fd) = self.preempted.choose(&mut self.rng) else { return self.invoke() };
        let pcpu = self.sim.os.enclave(fd).unwrap().handle.pcpu;
        self.sim.set_cpu(pcpu);
        let r = self.sim.resume(fd);
        self.stats.resumes += 1;
        if !matches!(r, Ok((ChannelStatus::Preempted, _))) {
            self.preempted.retain(|f| *f != fd);
        }
        format!("resume {fd}: {:?}", r.map(|(s, _)| s))
    }

    fn destroy(&mut self) -> String {
        let Some(fd) = self.pick_fd() else { return self.create() };
        let r = self.sim.destroy(fd);
        self.stats.lifecycles += r.is_ok() as u64;
        format!("destroy {fd}: {r:?}")
    }

    /// The primary pokes at pages it gave away.
    fn peek(&mut self) -> String {
        let Some(fd) = self.pick_fd() else { return self.create() };
        let pages = self.sim.os.enclave(fd).unwrap().handle.private_pages.clone();
        let page = *pages.choose(&mut self.rng).unwrap();
        let ipa = page.base() + self.rng.random_range(0..PAGE_SIZE as u64 - 8);
        let write = self.rng.random_bool(0.5);
        let ok = if write {
            self.sim.primary_write(ipa, &[0xAB; 8]).is_ok()
        } else {
            self.sim.primary_read(ipa, 8).is_ok()
        };
        if ok {
            self.extra.push(format!("primary {} private IPA {ipa:#x} of {fd}", if write { "wrote" } else { "read" }));
        } else {
            self.stats.contained_peeks += 1;
        }
        format!("peek {fd} {ipa:#x} write={write}: {}", if ok { "allowed" } else { "faulted" })
    }

    fn interrupt(&mut self) -> String {
        let cpu = self.use_random_cpu();
        let target = self.sim.hv.primary_vcpu(cpu).unwrap();
        let r = self.sim.interrupt(cpu, target);
        self.sim.hv.take_pending_irqs(target);
        self.stats.interrupts += 1;
        format!("interrupt {target} on {cpu}: {r:?}")
    }
}
