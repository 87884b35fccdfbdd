//! Line-oriented scenario scripts.
//!
//! One step per line, whitespace-separated, `#` starts a comment:
//!
//! ```text
//! name wallet-demo
//! machine frames=1024 pcpus=1
//! seed 7
//! create w wallet mem=4 chan=1
//! invoke w 1 str:correct-horse
//! expect done
//! invoke w 5 u32:0 str:pay-bob -> tag
//! invoke w 6 u32:0 $tag str:pay-bob
//! expect done hex:01
//! peek w all
//! destroy w
//! ```
//!
//! | step | meaning |
//! |------|---------|
//! | `machine frames=N pcpus=P` | machine shape, before any action |
//! | `seed N` | seed for `rand:` arguments |
//! | `cpu K` | pCPU the driver creates enclaves from |
//! | `create A PROG [mem=M] [chan=C]` | built-in program image |
//! | `load A FILE` | image file, relative to the script |
//! | `invoke A CMD [ARG..] [-> VAR]` | request, optionally capturing the result |
//! | `resume A [-> VAR]` | re-enter a preempted enclave |
//! | `destroy A` | tear down |
//! | `expect STATUS [ARG..]` | check the last result (`done`, `error`, `preempted`, `request`, `fail`) |
//! | `timer K N` | preempt pCPU K after N guest steps |
//! | `interrupt K TARGET` | interrupt `primary` or an enclave alias on pCPU K |
//! | `peek A [all\|I]` / `poke A [all\|I]` | primary reads / writes A's private pages; must fault |
//!
//! Arguments concatenate: `str:TEXT`, `hex:BYTES`, `u32:N`, `u64:N`,
//! `rand:LEN`, `$VAR`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::channel::ChannelStatus;
use crate::guest_os::Fd;
use crate::harness::image::EnclaveImage;
use crate::harness::oracle::Violation;
use crate::harness::sim::{SimConfig, Simulation};
use crate::harness::trace::TraceEvent;
use crate::hypervisor::HvEvent;
use crate::machine::{MachineConfig, PcpuId, PAGE_SIZE};
use crate::ta_runtime::builtin_image;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct ScenarioParseError {
    pub line: usize,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Arg {
    Bytes(Vec<u8>),
    Random(usize),
    Var(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expect {
    Status(ChannelStatus),
    /// The driver call itself returned an error.
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PageSel {
    All,
    One(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Cpu(u32),
    Create { alias: String, program: String, mem: u32, chan: u32 },
    Load { alias: String, path: PathBuf },
    Invoke { alias: String, cmd: u32, args: Vec<Arg>, capture: Option<String> },
    Resume { alias: String, capture: Option<String> },
    Destroy { alias: String },
    Expect { want: Expect, args: Option<Vec<Arg>> },
    Timer { pcpu: u32, after: u32 },
    Interrupt { pcpu: u32, target: String },
    Peek { alias: String, pages: PageSel },
    Poke { alias: String, pages: PageSel },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub line: usize,
    pub text: String,
    pub op: Op,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    pub machine: MachineConfig,
    pub seed: u64,
    pub steps: Vec<Step>,
    /// Directory `load` paths are relative to.
    pub base_dir: PathBuf,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioParseError> {
        let mut sc = Scenario {
            name: "unnamed".into(),
            machine: MachineConfig::default(),
            seed: 0,
            steps: Vec::new(),
            base_dir: PathBuf::from("."),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |msg: String| ScenarioParseError { line, msg };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let words: Vec<&str> = content.split_whitespace().collect();
            let op = match words[0] {
                "name" => {
                    sc.name = words[1..].join(" ");
                    continue;
                }
                "machine" => {
                    if !sc.steps.is_empty() {
                        return Err(err("machine must come before the first action".into()));
                    }
                    for kv in &words[1..] {
                        match kv.split_once('=') {
                            Some(("frames", v)) => sc.machine.frames = num(v).map_err(&err)?,
                            Some(("pcpus", v)) => sc.machine.pcpus = num(v).map_err(&err)?,
                            _ => return Err(err(format!("unknown machine setting {kv}"))),
                        }
                    }
                    continue;
                }
                "seed" => {
                    sc.seed = num(word(&words, 1).map_err(&err)?).map_err(&err)?;
                    continue;
                }
                "cpu" => Op::Cpu(num(word(&words, 1).map_err(&err)?).map_err(&err)?),
                "create" => {
                    let (mut mem, mut chan) = (4, 1);
                    for kv in words.iter().skip(3) {
                        match kv.split_once('=') {
                            Some(("mem", v)) => mem = num(v).map_err(&err)?,
                            Some(("chan", v)) => chan = num(v).map_err(&err)?,
                            _ => return Err(err(format!("unknown create option {kv}"))),
                        }
                    }
                    Op::Create {
                        alias: word(&words, 1).map_err(&err)?.into(),
                        program: word(&words, 2).map_err(&err)?.into(),
                        mem,
                        chan,
                    }
                }
                "load" => Op::Load {
                    alias: word(&words, 1).map_err(&err)?.into(),
                    path: word(&words, 2).map_err(&err)?.into(),
                },
                "invoke" => {
                    let (rest, capture) = split_capture(&words[1..]).map_err(&err)?;
                    Op::Invoke {
                        alias: word(rest, 0).map_err(&err)?.into(),
                        cmd: num(word(rest, 1).map_err(&err)?).map_err(&err)?,
                        args: rest.iter().skip(2).map(|a| parse_arg(a)).collect::<Result<_, _>>().map_err(&err)?,
                        capture,
                    }
                }
                "resume" => {
                    let (rest, capture) = split_capture(&words[1..]).map_err(&err)?;
                    Op::Resume { alias: word(rest, 0).map_err(&err)?.into(), capture }
                }
                "destroy" => Op::Destroy { alias: word(&words, 1).map_err(&err)?.into() },
                "expect" => {
                    let want = match word(&words, 1).map_err(&err)? {
                        "done" => Expect::Status(ChannelStatus::Done),
                        "error" => Expect::Status(ChannelStatus::Error),
                        "preempted" => Expect::Status(ChannelStatus::Preempted),
                        "request" => Expect::Status(ChannelStatus::Request),
                        "fail" => Expect::Fail,
                        other => return Err(err(format!("unknown status {other}"))),
                    };
                    let args = (words.len() > 2)
                        .then(|| words[2..].iter().map(|a| parse_arg(a)).collect::<Result<Vec<_>, _>>())
                        .transpose()
                        .map_err(&err)?;
                    Op::Expect { want, args }
                }
                "timer" => Op::Timer {
                    pcpu: num(word(&words, 1).map_err(&err)?).map_err(&err)?,
                    after: num(word(&words, 2).map_err(&err)?).map_err(&err)?,
                },
                "interrupt" => Op::Interrupt {
                    pcpu: num(word(&words, 1).map_err(&err)?).map_err(&err)?,
                    target: word(&words, 2).map_err(&err)?.into(),
                },
                "peek" | "poke" => {
                    let alias = word(&words, 1).map_err(&err)?.to_string();
                    let pages = match words.get(2) {
                        None | Some(&"all") => PageSel::All,
                        Some(i) => PageSel::One(num(i).map_err(&err)?),
                    };
                    if words[0] == "peek" {
                        Op::Peek { alias, pages }
                    } else {
                        Op::Poke { alias, pages }
                    }
                }
                other => return Err(err(format!("unknown step {other}"))),
            };
            sc.steps.push(Step { line, text: content.to_string(), op });
        }
        Ok(sc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioLoadError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut sc = Self::parse(&text)?;
        sc.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        Ok(sc)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioLoadError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Parse(#[from] ScenarioParseError),
}

fn word<'a>(words: &[&'a str], i: usize) -> Result<&'a str, String> {
    words.get(i).copied().ok_or_else(|| "missing argument".to_string())
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("bad number {s}"))
}

fn split_capture<'a, 'b>(words: &'b [&'a str]) -> Result<(&'b [&'a str], Option<String>), String> {
    match words.iter().position(|w| *w == "->") {
        None => Ok((words, None)),
        Some(at) if at + 2 == words.len() => Ok((&words[..at], Some(words[at + 1].to_string()))),
        Some(_) => Err("`->` must be followed by exactly one name".into()),
    }
}

fn parse_arg(a: &str) -> Result<Arg, String> {
    if let Some(v) = a.strip_prefix('$') {
        return Ok(Arg::Var(v.to_string()));
    }
    let (kind, v) = a.split_once(':').ok_or_else(|| format!("bad argument {a}"))?;
    Ok(match kind {
        "str" => Arg::Bytes(v.as_bytes().to_vec()),
        "hex" => Arg::Bytes(decode_hex(v).ok_or_else(|| format!("bad hex {v}"))?),
        "u32" => Arg::Bytes(num::<u32>(v)?.to_le_bytes().to_vec()),
        "u64" => Arg::Bytes(num::<u64>(v)?.to_le_bytes().to_vec()),
        "rand" => Arg::Random(num(v)?),
        _ => return Err(format!("bad argument kind {kind}")),
    })
}

pub fn decode_hex(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).ok()).collect()
}

pub fn encode_hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

/// One executed request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Response {
    pub line: usize,
    pub alias: String,
    /// Channel status, or `fail: <error>` if the driver call failed.
    pub status: String,
    pub output: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub pass: bool,
    pub violations: Vec<Violation>,
    /// Failed expectations, adversary successes and script errors.
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub verdict: Verdict,
    pub responses: Vec<Response>,
    /// Faults taken by adversary steps.
    pub contained_faults: usize,
    #[serde(skip)]
    pub trace: Vec<TraceEvent>,
}

impl ScenarioReport {
    pub fn count(&self, status: ChannelStatus) -> usize {
        let s = format!("{status:?}").to_lowercase();
        self.responses.iter().filter(|r| r.status == s).count()
    }
}

impl fmt::Display for ScenarioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario {} (seed {})", self.name, self.seed)?;
        for r in &self.responses {
            writeln!(f, "  line {:>3} {:<8} {:<10} {}", r.line, r.alias, r.status, r.output)?;
        }
        writeln!(f, "  adversary faults: {}", self.contained_faults)?;
        for v in &self.verdict.violations {
            writeln!(f, "  VIOLATION step {} [{}] {}", v.step, v.oracle, v.detail)?;
        }
        for x in &self.verdict.failures {
            writeln!(f, "  FAILURE {x}")?;
        }
        write!(f, "  verdict: {}", if self.verdict.pass { "pass" } else { "fail" })
    }
}

type Last = Result<(ChannelStatus, Vec<u8>), String>;

struct Runner {
    sim: Simulation,
    rng: ChaCha8Rng,
    fds: BTreeMap<String, Fd>,
    vars: BTreeMap<String, Vec<u8>>,
    last: Option<Last>,
    responses: Vec<Response>,
    failures: Vec<String>,
    faults: usize,
}

impl Runner {
    fn fd(&self, alias: &str) -> Result<Fd, String> {
        self.fds.get(alias).copied().ok_or_else(|| format!("unknown enclave {alias}"))
    }

    fn bytes(&mut self, args: &[Arg]) -> Result<Vec<u8>, String> {
        let mut out = Vec::new();
        for a in args {
            match a {
                Arg::Bytes(b) => out.extend_from_slice(b),
                Arg::Random(n) => out.extend((0..*n).map(|_| self.rng.random::<u8>())),
                Arg::Var(v) => out.extend_from_slice(self.vars.get(v).ok_or_else(|| format!("unset ${v}"))?),
            }
        }
        Ok(out)
    }

    fn finish_call(&mut self, line: usize, alias: &str, r: Result<(ChannelStatus, Vec<u8>), String>, capture: &Option<String>) {
        let (status, output) = match &r {
            Ok((s, out)) => (format!("{s:?}").to_lowercase(), encode_hex(out)),
            Err(e) => (format!("fail: {e}"), String::new()),
        };
        self.sim.note("response", format!("{alias} {status} {output}"));
        if let (Some(name), Ok((_, out))) = (capture, &r) {
            self.vars.insert(name.clone(), out.clone());
        }
        self.responses.push(Response { line, alias: alias.to_string(), status, output });
        self.last = Some(r);
    }

    fn private_pages(&self, alias: &str, sel: PageSel) -> Result<Vec<u64>, String> {
        let e = self.sim.os.enclave(self.fd(alias)?).map_err(|e| e.to_string())?;
        let pages: Vec<u64> = e.handle.private_pages.iter().map(|p| p.base()).collect();
        match sel {
            PageSel::All => Ok(pages),
            PageSel::One(i) => pages.get(i).map(|p| vec![*p]).ok_or_else(|| format!("{alias} has no private page {i}")),
        }
    }

    fn exec(&mut self, step: &Step, base: &Path) -> Result<(), String> {
        match &step.op {
            Op::Cpu(k) => self.sim.set_cpu(PcpuId(*k)),
            Op::Create { alias, program, mem, chan } => {
                let image = EnclaveImage::new(*mem, *chan, 0, crate::ta_runtime::code_blob(program))
                    .map(|_| builtin_image(program, *mem, *chan))
                    .map_err(|e| e.to_string())?;
                self.create(step.line, alias, &image);
            }
            Op::Load { alias, path } => {
                let image = EnclaveImage::load(base.join(path)).map_err(|e| format!("{}: {e}", path.display()))?;
                self.create(step.line, alias, &image);
            }
            Op::Invoke { alias, cmd, args, capture } => {
                let fd = self.fd(alias)?;
                let bytes = self.bytes(args)?;
                let r = self.sim.invoke(fd, *cmd, &bytes).map_err(|e| e.to_string());
                self.finish_call(step.line, alias, r, capture);
            }
            Op::Resume { alias, capture } => {
                let fd = self.fd(alias)?;
                let r = self.sim.resume(fd).map_err(|e| e.to_string());
                self.finish_call(step.line, alias, r, capture);
            }
            Op::Destroy { alias } => {
                let fd = self.fd(alias)?;
                match self.sim.destroy(fd) {
                    Ok(()) => {
                        self.fds.remove(alias);
                        self.last = Some(Ok((ChannelStatus::Done, Vec::new())));
                    }
                    Err(e) => self.last = Some(Err(e.to_string())),
                }
            }
            Op::Expect { want, args } => {
                let last = self.last.clone().ok_or("nothing to check yet")?;
                let bytes = args.as_ref().map(|a| self.bytes(a)).transpose()?;
                let ok = match (want, &last) {
                    (Expect::Fail, Err(_)) => true,
                    (Expect::Status(s), Ok((got, out))) => s == got && bytes.as_ref().is_none_or(|b| b == out),
                    _ => false,
                };
                if !ok {
                    return Err(format!("expected {want:?} {}, got {last:?}", bytes.map(|b| encode_hex(&b)).unwrap_or_default()));
                }
            }
            Op::Timer { pcpu, after } => self.sim.arm_preemption(PcpuId(*pcpu), *after),
            Op::Interrupt { pcpu, target } => {
                let vcpu = if target == "primary" {
                    self.sim.hv.primary_vcpu(PcpuId(*pcpu)).ok_or("no such pcpu")?
                } else {
                    self.sim.os.enclave(self.fd(target)?).map_err(|e| e.to_string())?.handle.vcpu
                };
                if let Err(e) = self.sim.interrupt(PcpuId(*pcpu), vcpu) {
                    self.last = Some(Err(e.to_string()));
                }
            }
            Op::Peek { alias, pages } | Op::Poke { alias, pages } => {
                let write = matches!(step.op, Op::Poke { .. });
                for ipa in self.private_pages(alias, *pages)? {
                    let r = if write {
                        self.sim.primary_write(ipa, &[0xAA; 8])
                    } else {
                        self.sim.primary_read(ipa, PAGE_SIZE).map(|_| ())
                    };
                    match r {
                        Err(_) => self.faults += 1,
                        Ok(()) => self.failures.push(format!(
                            "line {}: primary {} {alias} private ipa {ipa:#x}",
                            step.line,
                            if write { "wrote" } else { "read" }
                        )),
                    }
                }
            }
        }
        Ok(())
    }

    fn create(&mut self, line: usize, alias: &str, image: &EnclaveImage) {
        match self.sim.create(image) {
            Ok(fd) => {
                self.fds.insert(alias.to_string(), fd);
                self.responses.push(Response { line, alias: alias.into(), status: "created".into(), output: fd.0.to_string() });
                self.last = Some(Ok((ChannelStatus::Done, Vec::new())));
            }
            Err(e) => {
                self.responses.push(Response { line, alias: alias.into(), status: format!("fail: {e}"), output: String::new() });
                self.last = Some(Err(e.to_string()));
            }
        }
    }
}

/// Runs `scenario` on a fresh machine. `seed` overrides the script's seed.
pub fn run_scenario(scenario: &Scenario, seed: Option<u64>) -> ScenarioReport {
    let seed = seed.unwrap_or(scenario.seed);
    let mut r = Runner {
        sim: Simulation::new(SimConfig { machine: scenario.machine, ..SimConfig::default() }),
        rng: ChaCha8Rng::seed_from_u64(seed),
        fds: BTreeMap::new(),
        vars: BTreeMap::new(),
        last: None,
        responses: Vec::new(),
        failures: Vec::new(),
        faults: 0,
    };
    for step in &scenario.steps {
        r.sim.hv.record(HvEvent::Note { vm: None, tag: "scenario".into(), detail: format!("{}: {}", step.line, step.text) });
        if let Err(e) = r.exec(step, &scenario.base_dir) {
            r.failures.push(format!("line {}: {e}", step.line));
        }
        r.sim.observe();
    }
    let violations = r.sim.violations().to_vec();
    let pass = violations.is_empty() && r.failures.is_empty();
    ScenarioReport {
        name: scenario.name.clone(),
        seed,
        verdict: Verdict { pass, violations, failures: r.failures },
        responses: r.responses,
        contained_faults: r.faults,
        trace: r.sim.take_trace(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEMO: &str = "
        name demo
        machine frames=512 pcpus=1
        seed 3
        create c counter mem=3
        invoke c 0
        expect done u64:1
        invoke c 0 -> n
        expect done $n
        invoke c 7
        expect error
        invoke c 0 rand:4   # extra args are ignored by the counter
        expect done u64:3
        peek c
        poke c 1
        destroy c
        invoke c 0
    ";

    #[test]
    fn parses_and_runs() {
        let sc = Scenario::parse(DEMO).unwrap();
        assert_eq!(sc.name, "demo");
        assert_eq!(sc.machine, MachineConfig { frames: 512, pcpus: 1 });
        let rep = run_scenario(&sc, None);
        // the last line refers to a destroyed enclave
        assert_eq!(rep.verdict.failures, vec!["line 17: unknown enclave c".to_string()]);
        assert!(rep.verdict.violations.is_empty());
        assert_eq!(rep.count(ChannelStatus::Done), 3);
        assert_eq!(rep.count(ChannelStatus::Error), 1);
        assert_eq!(rep.contained_faults, 4);
    }

    #[test]
    fn failed_expectation_fails_verdict() {
        let sc = Scenario::parse("create e echo\ninvoke e 0 str:a\nexpect done str:b\n").unwrap();
        let rep = run_scenario(&sc, None);
        assert!(!rep.verdict.pass);
        assert_eq!(rep.verdict.failures.len(), 1);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        for (text, line) in [
            ("bogus", 1),
            ("\ncreate", 2),
            ("invoke e x", 1),
            ("create e echo mem=z", 1),
            ("invoke e 0 hex:abc", 1),
            ("invoke e 0 -> a b", 1),
            ("create e echo\nmachine frames=4", 2),
            ("expect maybe", 1),
        ] {
            assert_eq!(Scenario::parse(text).unwrap_err().line, line, "{text}");
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let sc = Scenario::parse("machine frames=256\ncreate e echo\ninvoke e 0 rand:16\ndestroy e").unwrap();
        let a = run_scenario(&sc, Some(9));
        let b = run_scenario(&sc, Some(9));
        let c = run_scenario(&sc, Some(10));
        let text = |r: &ScenarioReport| crate::harness::trace::to_jsonl(&r.trace);
        assert_eq!(text(&a), text(&b));
        assert_ne!(text(&a), text(&c));
    }

    #[test]
    fn hex_round_trip() {
        assert_eq!(decode_hex("00ff10"), Some(vec![0, 255, 16]));
        assert_eq!(decode_hex("0"), None);
        assert_eq!(decode_hex("zz"), None);
        assert_eq!(encode_hex(&[1, 171]), "01ab");
    }
}
