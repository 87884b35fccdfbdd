//! JSON-lines trace: one numbered record per hypervisor event.
//!
//! ```text
//! {"step":7,"pcpu":0,"vcpu":2,"event":"context_switch","detail":{...},"ledger":{...}}
//! ```

use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;

use crate::hypervisor::{HvEvent, VcpuId};
use crate::machine::{CostLedger, PcpuId};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEvent {
    pub step: u64,
    pub pcpu: Option<PcpuId>,
    pub vcpu: Option<VcpuId>,
    #[serde(flatten)]
    pub event: HvEvent,
    /// Counters as of this event.
    pub ledger: CostLedger,
}

impl TraceEvent {
    pub fn new(step: u64, event: HvEvent, ledger: CostLedger) -> Self {
        Self { step, pcpu: event.pcpu(), vcpu: event.vcpu(), event, ledger }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace records always serialize")
    }
}

pub fn write_jsonl(mut out: impl Write, events: &[TraceEvent]) -> io::Result<()> {
    for e in events {
        writeln!(out, "{}", e.to_json())?;
    }
    Ok(())
}

pub fn to_jsonl(events: &[TraceEvent]) -> String {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, events).expect("writing to a Vec");
    String::from_utf8(buf).expect("json is utf-8")
}

pub fn save_jsonl(path: impl AsRef<Path>, events: &[TraceEvent]) -> io::Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = io::BufWriter::new(file);
    write_jsonl(&mut out, events)?;
    out.flush()
}
