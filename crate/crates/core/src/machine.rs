//! Physical machine model: zero-initialized page frames, pCPUs and the cost
//! ledger every other layer charges its work to.
//!
//! All guest-visible bytes live here. Nothing above this module keeps a
//! private copy of memory contents, so scanning the machine is a complete
//! view of what an attacker with physical access to the frames could see.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::hypervisor::VcpuId;

/// Size of one frame and of one stage-2 page.
pub const PAGE_SIZE: usize = 4096;
/// `log2(PAGE_SIZE)`.
pub const PAGE_SHIFT: u32 = 12;
/// Mask selecting the in-page offset of an address.
pub const PAGE_MASK: u64 = (PAGE_SIZE as u64) - 1;

/// Default machine size: 8192 frames, 32 MiB.
pub const DEFAULT_FRAMES: usize = 8192;

/// Physical frame number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct FrameNo(pub u64);

impl FrameNo {
    /// Physical address of the first byte of the frame.
    pub fn base(self) -> u64 {
        self.0 << PAGE_SHIFT
    }
}

impl fmt::Display for FrameNo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "frame#{}", self.0)
    }
}

/// Physical CPU index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct PcpuId(pub u32);

impl fmt::Display for PcpuId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pcpu{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pcpu {
    pub id: PcpuId,
    /// vCPU currently executing on this core (top of its stacking chain).
    pub current_vcpu: Option<VcpuId>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MachineError {
    #[error("access to {frame} at offset {offset} len {len} is out of range")]
    OutOfRange { frame: FrameNo, offset: usize, len: usize },
}

/// Work counters. Every counter only ever grows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CostLedger {
    pub pt_ops: u64,
    pub zero_bytes: u64,
    pub ctx_switches: u64,
    pub hypercalls: u64,
    /// Trusted-application commands executed (fixed compute charge each).
    pub ta_commands: u64,
}

impl CostLedger {
    /// Weighted simulated time in abstract units.
    pub fn units(&self, w: &CostWeights) -> u64 {
        self.pt_ops * w.pt_op
            + self.zero_bytes * w.zero_page / PAGE_SIZE as u64
            + self.ctx_switches * w.ctx_switch
            + self.hypercalls * w.hypercall
            + self.ta_commands * w.ta_command
    }

    /// Counter-wise difference `self - earlier`.
    ///
    /// Panics if `earlier` is not actually earlier, since the ledger is monotone.
    pub fn since(&self, earlier: &CostLedger) -> CostLedger {
        CostLedger {
            pt_ops: self.pt_ops.checked_sub(earlier.pt_ops).expect("ledger went backwards"),
            zero_bytes: self.zero_bytes.checked_sub(earlier.zero_bytes).expect("ledger went backwards"),
            ctx_switches: self
                .ctx_switches
                .checked_sub(earlier.ctx_switches)
                .expect("ledger went backwards"),
            hypercalls: self.hypercalls.checked_sub(earlier.hypercalls).expect("ledger went backwards"),
            ta_commands: self.ta_commands.checked_sub(earlier.ta_commands).expect("ledger went backwards"),
        }
    }

    /// True if no counter in `self` is below the matching counter in `earlier`.
    pub fn dominates(&self, earlier: &CostLedger) -> bool {
        self.pt_ops >= earlier.pt_ops
            && self.zero_bytes >= earlier.zero_bytes
            && self.ctx_switches >= earlier.ctx_switches
            && self.hypercalls >= earlier.hypercalls
            && self.ta_commands >= earlier.ta_commands
    }
}

/// Unit weights used to turn a ledger into simulated time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostWeights {
    pub pt_op: u64,
    /// Weight of zero-filling one whole page.
    pub zero_page: u64,
    pub ctx_switch: u64,
    pub hypercall: u64,
    pub ta_command: u64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { pt_op: 1, zero_page: 1, ctx_switch: 1, hypercall: 1, ta_command: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MachineConfig {
    pub frames: usize,
    pub pcpus: usize,
}

impl Default for MachineConfig {
    fn default() -> Self {
        Self { frames: DEFAULT_FRAMES, pcpus: 1 }
    }
}

/// Physical memory and cores.
#[derive(Debug, Clone)]
pub struct Machine {
    memory: Vec<u8>,
    frames: usize,
    pcpus: Vec<Pcpu>,
    ledger: CostLedger,
}

impl Machine {
    pub fn new(config: MachineConfig) -> Self {
        assert!(config.frames > 0, "machine needs at least one frame");
        assert!(config.pcpus > 0, "machine needs at least one pcpu");
        Self {
            memory: vec![0; config.frames * PAGE_SIZE],
            frames: config.frames,
            pcpus: (0..config.pcpus)
                .map(|i| Pcpu { id: PcpuId(i as u32), current_vcpu: None })
                .collect(),
            ledger: CostLedger::default(),
        }
    }

    pub fn frame_count(&self) -> usize {
        self.frames
    }

    pub fn contains(&self, frame: FrameNo) -> bool {
        frame.0 < self.frames as u64
    }

    fn span(&self, frame: FrameNo, offset: usize, len: usize) -> Result<std::ops::Range<usize>, MachineError> {
        let oob = MachineError::OutOfRange { frame, offset, len };
        if !self.contains(frame) {
            return Err(oob);
        }
        let end = offset.checked_add(len).ok_or_else(|| oob.clone())?;
        if end > PAGE_SIZE {
            return Err(oob);
        }
        let base = frame.0 as usize * PAGE_SIZE;
        Ok(base + offset..base + end)
    }

    pub fn read_frame(&self, frame: FrameNo, offset: usize, len: usize) -> Result<Vec<u8>, MachineError> {
        let range = self.span(frame, offset, len)?;
        Ok(self.memory[range].to_vec())
    }

    pub fn write_frame(&mut self, frame: FrameNo, offset: usize, data: &[u8]) -> Result<(), MachineError> {
        let range = self.span(frame, offset, data.len())?;
        self.memory[range].copy_from_slice(data);
        Ok(())
    }

    /// Zero-fills a whole frame and charges `PAGE_SIZE` zeroed bytes.
    pub fn zero_frame(&mut self, frame: FrameNo) -> Result<(), MachineError> {
        let range = self.span(frame, 0, PAGE_SIZE)?;
        self.memory[range].fill(0);
        self.ledger.zero_bytes += PAGE_SIZE as u64;
        Ok(())
    }

    /// Borrow a whole frame without copying. Used by scanners.
    pub fn frame_bytes(&self, frame: FrameNo) -> Result<&[u8], MachineError> {
        let range = self.span(frame, 0, PAGE_SIZE)?;
        Ok(&self.memory[range])
    }

    pub fn frame_is_zero(&self, frame: FrameNo) -> Result<bool, MachineError> {
        Ok(self.frame_bytes(frame)?.iter().all(|&b| b == 0))
    }

    /// The whole of physical memory as one flat slice.
    pub fn physical_memory(&self) -> &[u8] {
        &self.memory
    }

    pub fn pcpus(&self) -> &[Pcpu] {
        &self.pcpus
    }

    pub fn pcpu(&self, id: PcpuId) -> Option<&Pcpu> {
        self.pcpus.get(id.0 as usize)
    }

    pub(crate) fn pcpu_mut(&mut self, id: PcpuId) -> Option<&mut Pcpu> {
        self.pcpus.get_mut(id.0 as usize)
    }

    pub fn ledger(&self) -> CostLedger {
        self.ledger
    }

    pub(crate) fn charge_pt_op(&mut self) {
        self.ledger.pt_ops += 1;
    }

    pub(crate) fn charge_ctx_switch(&mut self) {
        self.ledger.ctx_switches += 1;
    }

    pub(crate) fn charge_hypercall(&mut self) {
        self.ledger.hypercalls += 1;
    }

    pub(crate) fn charge_ta_command(&mut self) {
        self.ledger.ta_commands += 1;
    }
}
