use serde::Serialize;

use super::{HandleId, VcpuId, VmId};
use crate::machine::{FrameNo, PcpuId};
use crate::stage2::{AccessFault, IpaPage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchReason {
    /// Parent scheduled a child (push).
    Schedule,
    /// Child yielded to its parent (pop).
    Yield,
    /// Interrupt for an ancestor unwound the stack.
    Interrupt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IrqOutcome {
    /// Target was an ancestor; these vCPUs were popped (top first).
    Unwound { popped: Vec<VcpuId> },
    /// Target already running or not on the stack; left pending.
    Pending,
}

/// Everything observable the hypervisor does. The harness turns these into
/// numbered trace records.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", content = "detail", rename_all = "snake_case")]
pub enum HvEvent {
    Hypercall {
        pcpu: Option<PcpuId>,
        vcpu: VcpuId,
        call: &'static str,
        handle: Option<HandleId>,
        result: Result<String, String>,
    },
    ContextSwitch {
        pcpu: PcpuId,
        from: VcpuId,
        to: VcpuId,
        reason: SwitchReason,
        popped: Vec<VcpuId>,
    },
    Fault {
        vcpu: Option<VcpuId>,
        fault: AccessFault,
    },
    Interrupt {
        pcpu: PcpuId,
        target: VcpuId,
        outcome: IrqOutcome,
    },
    /// A donated page went back to the primary during destroy. `zeroed`
    /// records the frame content at the instant it became reachable again.
    PageReturned {
        enclave: VmId,
        ipa: IpaPage,
        frame: FrameNo,
        zeroed: bool,
    },
    /// Channel header dump after a status transition. `vm` is the writer;
    /// `frame` backs the first channel page and is the same from both sides.
    Channel {
        vm: VmId,
        frame: Option<FrameNo>,
        status: u32,
        header: String,
    },
    /// Free-form annotation from the layers above (driver, scenario runner).
    Note {
        vm: Option<VmId>,
        tag: String,
        detail: String,
    },
}

impl HvEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            HvEvent::Hypercall { .. } => "hypercall",
            HvEvent::ContextSwitch { .. } => "context_switch",
            HvEvent::Fault { .. } => "fault",
            HvEvent::Interrupt { .. } => "interrupt",
            HvEvent::PageReturned { .. } => "page_returned",
            HvEvent::Channel { .. } => "channel",
            HvEvent::Note { .. } => "note",
        }
    }

    pub fn pcpu(&self) -> Option<PcpuId> {
        match self {
            HvEvent::Hypercall { pcpu, .. } => *pcpu,
            HvEvent::ContextSwitch { pcpu, .. } | HvEvent::Interrupt { pcpu, .. } => Some(*pcpu),
            _ => None,
        }
    }

    pub fn vcpu(&self) -> Option<VcpuId> {
        match self {
            HvEvent::Hypercall { vcpu, .. } => Some(*vcpu),
            HvEvent::ContextSwitch { to, .. } => Some(*to),
            HvEvent::Fault { vcpu, .. } => *vcpu,
            HvEvent::Interrupt { target, .. } => Some(*target),
            _ => None,
        }
    }
}
