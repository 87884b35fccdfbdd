//! Micro-benchmarks in ledger units.
//!
//! Each size runs repeated create / empty invoke / destroy cycles of an echo
//! enclave with `pages` private pages and one channel page. The simulator is
//! deterministic, so the standard deviation is reported but always 0.

use std::fmt;

use serde::Serialize;

use crate::harness::sim::{SimConfig, Simulation};
use crate::machine::{CostLedger, CostWeights, MachineConfig, PAGE_SIZE};
use crate::ta_runtime::builtin_image;

pub const REPETITIONS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std_dev: f64,
    pub samples: usize,
}

impl Stat {
    pub fn of(xs: &[u64]) -> Stat {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<u64>() as f64 / n;
        let var = xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        Stat { mean, std_dev: var.sqrt(), samples: xs.len() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub pages: u32,
    pub create: Stat,
    pub invoke: Stat,
    pub destroy: Stat,
    /// Ledger deltas of the first cycle, for inspection.
    pub create_ledger: CostLedger,
    pub invoke_ledger: CostLedger,
    pub destroy_ledger: CostLedger,
}

impl BenchRow {
    pub fn ordered(&self) -> bool {
        self.invoke.mean < self.create.mean && self.create.mean < self.destroy.mean
    }
}

/// Least-squares fit `y = slope * x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

impl LinearFit {
    /// None with fewer than two distinct x values.
    pub fn fit(points: &[(f64, f64)]) -> Option<LinearFit> {
        let n = points.len() as f64;
        let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
        let my = points.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
        if points.len() < 2 || sxx == 0.0 {
            return None;
        }
        let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let ss_res: f64 = points.iter().map(|p| (p.1 - slope * p.0 - intercept).powi(2)).sum();
        let ss_tot: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
        let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
        Some(LinearFit { slope, intercept, r_squared })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub repetitions: usize,
    /// destroy - create against donated bytes.
    pub fit: Option<LinearFit>,
}

impl BenchReport {
    pub fn ordered(&self) -> bool {
        self.rows.iter().all(BenchRow::ordered)
    }

    /// Every invoke sample at every size has the same cost.
    pub fn invoke_constant(&self) -> bool {
        let first = self.rows.first().map(|r| r.invoke.mean);
        self.rows.iter().all(|r| Some(r.invoke.mean) == first && r.invoke.std_dev == 0.0)
    }

    pub fn linear(&self, min_r_squared: f64) -> bool {
        self.fit.is_some_and(|f| f.r_squared > min_r_squared)
    }

    pub fn pass(&self) -> bool {
        self.ordered() && self.invoke_constant() && self.linear(0.999)
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>6} {:>16} {:>16} {:>16}", "pages", "create", "invoke", "destroy")?;
        for r in &self.rows {
            let cell = |s: &Stat| format!("{:.1} ± {:.1}", s.mean, s.std_dev);
            writeln!(f, "{:>6} {:>16} {:>16} {:>16}", r.pages, cell(&r.create), cell(&r.invoke), cell(&r.destroy))?;
        }
        writeln!(f, "{} cycles per size; std dev is 0 because the simulator is deterministic", self.repetitions)?;
        writeln!(f, "invoke < create < destroy: {}", self.ordered())?;
        writeln!(f, "invoke constant across sizes: {}", self.invoke_constant())?;
        match self.fit {
            Some(fit) => write!(
                f,
                "destroy - create = {:.6} * bytes + {:.3} (R² = {:.6})",
                fit.slope, fit.intercept, fit.r_squared
            ),
            None => write!(f, "destroy - create fit needs at least two sizes"),
        }
    }
}

pub fn bench(sizes: &[u32]) -> BenchReport {
    bench_with(sizes, REPETITIONS)
}

pub fn bench_with(sizes: &[u32], repetitions: usize) -> BenchReport {
    assert!(sizes.iter().all(|&p| p >= 1), "sizes must be at least one page");
    assert!(repetitions >= 1);
    let weights = CostWeights::default();
    let mut rows = Vec::new();
    for &pages in sizes {
        let image = builtin_image("echo", pages, 1);
        let frames = (pages as usize + 64).max(256);
        let mut sim = Simulation::new(SimConfig {
            machine: MachineConfig { frames, pcpus: 1 },
            keep_trace: false,
            ..SimConfig::default()
        });
        let mut samples = [Vec::new(), Vec::new(), Vec::new()];
        let mut first = None;
        for _ in 0..repetitions {
            let t0 = sim.hv.machine().ledger();
            let fd = sim.create(&image).expect("bench machine has room");
            let t1 = sim.hv.machine().ledger();
            sim.invoke(fd, 0, &[]).expect("echo answers");
            let t2 = sim.hv.machine().ledger();
            sim.destroy(fd).expect("destroy succeeds");
            let t3 = sim.hv.machine().ledger();
            let deltas = [t1.since(&t0), t2.since(&t1), t3.since(&t2)];
            for (s, d) in samples.iter_mut().zip(&deltas) {
                s.push(d.units(&weights));
            }
            first.get_or_insert(deltas);
        }
        assert!(sim.violations().is_empty(), "{:?}", sim.violations());
        let [c, i, d] = first.unwrap();
        rows.push(BenchRow {
            pages,
            create: Stat::of(&samples[0]),
            invoke: Stat::of(&samples[1]),
            destroy: Stat::of(&samples[2]),
            create_ledger: c,
            invoke_ledger: i,
            destroy_ledger: d,
        });
    }
    let points: Vec<_> = rows
        .iter()
        .map(|r| ((r.pages as usize * PAGE_SIZE) as f64, r.destroy.mean - r.create.mean))
        .collect();
    BenchReport { rows, repetitions, fit: LinearFit::fit(&points) }
}
