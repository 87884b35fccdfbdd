use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};

use vmenclave::harness::attack::attack_suite;
use vmenclave::harness::bench::bench_with;
use vmenclave::harness::fuzz::{fuzz_with, FuzzConfig};
use vmenclave::harness::image::EnclaveImage;
use vmenclave::harness::scenario::{run_scenario, Scenario, ScenarioReport};
use vmenclave::harness::trace::save_jsonl;
use vmenclave::ta_runtime::{code_blob, TaHost};

#[derive(Parser)]
#[command(version, about = "Simulator for virtualization-based enclaves")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run scenario scripts; several files run in parallel.
    Run {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        /// JSON-lines trace; a directory when several scenarios are given.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Overrides the seed in the script.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (default: available cores).
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Run the adversary playbook.
    Attack {
        #[arg(long)]
        json: bool,
    },
    /// Ledger-unit micro-benchmarks.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "16,64,256,1024")]
        pages: Vec<u32>,
        #[arg(long, default_value_t = 30)]
        reps: usize,
        #[arg(long)]
        json: bool,
    },
    /// Random walk with every oracle enabled.
    Fuzz {
        #[arg(long, default_value_t = 10_000)]
        ops: u64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Write an enclave image file.
    PackImage {
        #[arg(long)]
        mem_pages: u32,
        #[arg(long)]
        channel_pages: u32,
        /// Code blob to embed.
        #[arg(long, required_unless_present = "program", conflicts_with = "program")]
        code: Option<PathBuf>,
        /// Embed the tag of a built-in program instead of a file.
        #[arg(long)]
        program: Option<String>,
        /// Entry command table length (default: the program's, else 0).
        #[arg(long)]
        cmds: Option<u32>,
        #[arg(short, long)]
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    match Cli::parse().cmd {
        Cmd::Run { scenarios, trace, seed, jobs, json } => run(&scenarios, trace.as_deref(), seed, jobs, json),
        Cmd::Attack { json } => {
            let report = attack_suite();
            if json {
                println!("{}", serde_json::to_string_pretty(&report).unwrap());
            } else {
                println!("{report}");
            }
            exit(report.all_contained())
        }
        Cmd::Bench { pages, reps, json } => {
            if pages.is_empty() || pages.contains(&0) || reps == 0 {
                eprintln!("error: sizes and repetitions must be at least 1");
                return ExitCode::from(2);
            }
            let report = bench_with(&pages, reps);
            if json {
                println!("{}", serde_json::to_string_pretty(&report).unwrap());
            } else {
                println!("{report}");
            }
            exit(report.ordered() && report.invoke_constant() && (report.fit.is_none() || report.linear(0.999)))
        }
        Cmd::Fuzz { ops, seed, trace, json } => {
            let report = fuzz_with(FuzzConfig { keep_trace: trace.is_some(), ..FuzzConfig::new(ops, seed) });
            if let Some(path) = trace {
                if let Err(e) = save_jsonl(&path, &report.trace) {
                    eprintln!("error: {}: {e}", path.display());
                    return ExitCode::from(2);
                }
            }
            if json {
                println!("{}", serde_json::to_string_pretty(&report).unwrap());
            } else {
                println!("{report}");
            }
            exit(report.pass())
        }
        Cmd::PackImage { mem_pages, channel_pages, code, program, cmds, output } => {
            let (code, default_cmds) = match (code, program) {
                (Some(path), _) => match std::fs::read(&path) {
                    Ok(bytes) => (bytes, 0),
                    Err(e) => {
                        eprintln!("error: {}: {e}", path.display());
                        return ExitCode::from(2);
                    }
                },
                (None, Some(name)) => {
                    let count = TaHost::new().program(&name).map(|p| p.command_count());
                    (code_blob(&name), count.unwrap_or(0))
                }
                (None, None) => unreachable!("clap requires one of them"),
            };
            let image = EnclaveImage::new(mem_pages, channel_pages, cmds.unwrap_or(default_cmds), code)
                .and_then(|img| img.save(&output).map(|()| img));
            match image {
                Ok(img) => {
                    println!("{}: {} bytes, {} pages", output.display(), img.to_bytes().len(), img.total_pages());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
    }
}

fn exit(pass: bool) -> ExitCode {
    if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn trace_path(trace: &Path, script: &Path, several: bool) -> PathBuf {
    if several {
        let stem = script.file_stem().unwrap_or_default();
        trace.join(stem).with_extension("jsonl")
    } else {
        trace.to_path_buf()
    }
}

fn run(scripts: &[PathBuf], trace: Option<&Path>, seed: Option<u64>, jobs: Option<usize>, json: bool) -> ExitCode {
    let several = scripts.len() > 1;
    if let (Some(dir), true) = (trace, several) {
        if let Err(e) = std::fs::create_dir_all(dir) {
            eprintln!("error: {}: {e}", dir.display());
            return ExitCode::from(2);
        }
    }
    // each scenario owns its machine, so workers share nothing but the queue
    let results: Mutex<Vec<Option<Result<ScenarioReport, String>>>> = Mutex::new(vec![None; scripts.len()]);
    let next = AtomicUsize::new(0);
    let workers = jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, scripts.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(script) = scripts.get(i) else { break };
                let outcome = Scenario::load(script).map_err(|e| e.to_string()).and_then(|sc| {
                    let report = run_scenario(&sc, seed);
                    if let Some(t) = trace {
                        let path = trace_path(t, script, several);
                        save_jsonl(&path, &report.trace).map_err(|e| format!("{}: {e}", path.display()))?;
                    }
                    Ok(report)
                });
                results.lock().unwrap()[i] = Some(outcome);
            });
        }
    });

    let mut pass = true;
    let mut broken = false;
    for (script, outcome) in scripts.iter().zip(results.into_inner().unwrap()) {
        match outcome.expect("every script was run") {
            Ok(report) => {
                pass &= report.verdict.pass;
                if json {
                    println!("{}", serde_json::to_string(&report).unwrap());
                } else {
                    println!("{report}");
                }
            }
            Err(e) => {
                broken = true;
                eprintln!("error: {}: {e}", script.display());
            }
        }
    }
    if broken {
        ExitCode::from(2)
    } else {
        exit(pass)
    }
}
