//! Shared-memory command channel between an application and its TA.
//!
//! No interrupts are involved: the application fills a request and invokes
//! the enclave; the TA serves it, completes it and exits. Layout, all
//! little-endian:
//!
//! ```text
//! off  size  field
//!   0     4  magic  "BECH"
//!   4     4  status 0=Idle 1=Request 2=Done 3=Error 4=Preempted
//!   8     4  cmd_id
//!  12     4  arg_len
//!  16     4  ret_len
//!  20     -  payload (arguments while Request, result once Done)
//! ```
//!
//! The status word is always written last, after payload and lengths.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::hypervisor::{HvEvent, Hypervisor, VmId};
use crate::machine::PAGE_SIZE;
use crate::stage2::{AccessFault, IpaPage};

pub const MAGIC: [u8; 4] = *b"BECH";
pub const HEADER_LEN: usize = 20;
const STATUS_OFFSET: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum ChannelStatus {
    Idle = 0,
    Request = 1,
    Done = 2,
    Error = 3,
    Preempted = 4,
}

impl ChannelStatus {
    pub fn from_u32(v: u32) -> Option<Self> {
        Some(match v {
            0 => Self::Idle,
            1 => Self::Request,
            2 => Self::Done,
            3 => Self::Error,
            4 => Self::Preempted,
            _ => return None,
        })
    }

    /// Whether `self -> next` is a legal protocol step.
    pub fn may_become(self, next: ChannelStatus) -> bool {
        use ChannelStatus::*;
        matches!(
            (self, next),
            (Idle | Done | Error, Request) | (Request, Done | Error | Preempted) | (Preempted, Request)
        )
    }
}

impl fmt::Display for ChannelStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelHeader {
    pub status: ChannelStatus,
    pub cmd_id: u32,
    pub arg_len: u32,
    pub ret_len: u32,
}

impl ChannelHeader {
    pub fn idle() -> Self {
        Self { status: ChannelStatus::Idle, cmd_id: 0, arg_len: 0, ret_len: 0 }
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        out[4..8].copy_from_slice(&(self.status as u32).to_le_bytes());
        out[8..12].copy_from_slice(&self.cmd_id.to_le_bytes());
        out[12..16].copy_from_slice(&self.arg_len.to_le_bytes());
        out[16..20].copy_from_slice(&self.ret_len.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ChannelError> {
        if bytes.len() < HEADER_LEN {
            return Err(ChannelError::Corrupt("short header"));
        }
        if bytes[0..4] != MAGIC {
            return Err(ChannelError::Corrupt("bad magic"));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let status = ChannelStatus::from_u32(word(4)).ok_or(ChannelError::Corrupt("unknown status"))?;
        Ok(Self { status, cmd_id: word(8), arg_len: word(12), ret_len: word(16) })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChannelError {
    #[error("a request is already outstanding")]
    Busy,
    #[error("payload of {len} bytes exceeds channel capacity {capacity}")]
    TooLarge { len: usize, capacity: usize },
    #[error("no request to serve")]
    NoRequest,
    #[error("corrupt channel: {0}")]
    Corrupt(&'static str),
    #[error(transparent)]
    Fault(#[from] AccessFault),
}

/// One side's view of a channel: the VM doing the access and the IPA pages
/// the channel occupies in that VM, in channel order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelView {
    pub vm: VmId,
    pub pages: Vec<IpaPage>,
}

impl ChannelView {
    pub fn new(vm: VmId, pages: Vec<IpaPage>) -> Self {
        assert!(!pages.is_empty(), "channel needs at least one page");
        Self { vm, pages }
    }

    /// Contiguous view starting at `base`.
    pub fn contiguous(vm: VmId, base: IpaPage, count: usize) -> Self {
        Self::new(vm, (0..count as u64).map(|i| IpaPage(base.0 + i)).collect())
    }

    /// Largest payload the channel holds.
    pub fn capacity(&self) -> usize {
        self.pages.len() * PAGE_SIZE - HEADER_LEN
    }

    fn read_at(&self, hv: &mut Hypervisor, offset: usize, len: usize) -> Result<Vec<u8>, AccessFault> {
        let mut out = Vec::with_capacity(len);
        let mut at = offset;
        while out.len() < len {
            let page = self.pages[at / PAGE_SIZE];
            let in_page = at % PAGE_SIZE;
            let n = (len - out.len()).min(PAGE_SIZE - in_page);
            out.extend(hv.vm_read(self.vm, page.base() + in_page as u64, n)?);
            at += n;
        }
        Ok(out)
    }

    fn write_at(&self, hv: &mut Hypervisor, offset: usize, data: &[u8]) -> Result<(), AccessFault> {
        let mut done = 0;
        while done < data.len() {
            let at = offset + done;
            let page = self.pages[at / PAGE_SIZE];
            let in_page = at % PAGE_SIZE;
            let n = (data.len() - done).min(PAGE_SIZE - in_page);
            hv.vm_write(self.vm, page.base() + in_page as u64, &data[done..done + n])?;
            done += n;
        }
        Ok(())
    }

    pub fn header(&self, hv: &mut Hypervisor) -> Result<ChannelHeader, ChannelError> {
        ChannelHeader::decode(&self.read_at(hv, 0, HEADER_LEN)?)
    }

    /// Writes everything but the status word, then the status word.
    fn publish(&self, hv: &mut Hypervisor, header: ChannelHeader) -> Result<(), ChannelError> {
        let bytes = header.encode();
        self.write_at(hv, 0, &bytes[..STATUS_OFFSET])?;
        self.write_at(hv, STATUS_OFFSET + 4, &bytes[STATUS_OFFSET + 4..])?;
        self.write_at(hv, STATUS_OFFSET, &bytes[STATUS_OFFSET..STATUS_OFFSET + 4])?;
        let frame = hv.vm(self.vm).and_then(|vm| vm.stage2.get(self.pages[0])).map(|m| m.frame);
        hv.record(HvEvent::Channel { vm: self.vm, frame, status: header.status as u32, header: hex(&bytes) });
        Ok(())
    }

    /// Resets the channel to an idle header.
    pub fn init(&self, hv: &mut Hypervisor) -> Result<(), ChannelError> {
        self.publish(hv, ChannelHeader::idle())
    }

    /// Application side: post a request.
    pub fn write_request(&self, hv: &mut Hypervisor, cmd_id: u32, args: &[u8]) -> Result<(), ChannelError> {
        let h = self.header(hv)?;
        if matches!(h.status, ChannelStatus::Request | ChannelStatus::Preempted) {
            return Err(ChannelError::Busy);
        }
        if args.len() > self.capacity() {
            return Err(ChannelError::TooLarge { len: args.len(), capacity: self.capacity() });
        }
        self.write_at(hv, HEADER_LEN, args)?;
        self.publish(
            hv,
            ChannelHeader { status: ChannelStatus::Request, cmd_id, arg_len: args.len() as u32, ret_len: 0 },
        )
    }

    /// Application side: current status and, when `Done`, the result bytes.
    pub fn read_response(&self, hv: &mut Hypervisor) -> Result<(ChannelStatus, Vec<u8>), ChannelError> {
        let h = self.header(hv)?;
        if h.status != ChannelStatus::Done {
            return Ok((h.status, Vec::new()));
        }
        let len = h.ret_len as usize;
        if len > self.capacity() {
            return Err(ChannelError::Corrupt("ret_len beyond capacity"));
        }
        Ok((h.status, self.read_at(hv, HEADER_LEN, len)?))
    }

    /// Application side: flag an in-flight request as preempted.
    pub fn mark_preempted(&self, hv: &mut Hypervisor) -> Result<(), ChannelError> {
        let h = self.header(hv)?;
        if h.status != ChannelStatus::Request {
            return Err(ChannelError::NoRequest);
        }
        self.publish(hv, ChannelHeader { status: ChannelStatus::Preempted, ..h })
    }

    /// Application side: re-arm a preempted request before re-invoking.
    pub fn resume_request(&self, hv: &mut Hypervisor) -> Result<(), ChannelError> {
        let h = self.header(hv)?;
        if h.status != ChannelStatus::Preempted {
            return Err(ChannelError::NoRequest);
        }
        self.publish(hv, ChannelHeader { status: ChannelStatus::Request, ..h })
    }

    /// TA side: fetch the outstanding request.
    pub fn serve(&self, hv: &mut Hypervisor) -> Result<(u32, Vec<u8>), ChannelError> {
        let h = self.header(hv)?;
        if h.status != ChannelStatus::Request {
            return Err(ChannelError::NoRequest);
        }
        let len = h.arg_len as usize;
        if len > self.capacity() {
            return Err(ChannelError::Corrupt("arg_len beyond capacity"));
        }
        Ok((h.cmd_id, self.read_at(hv, HEADER_LEN, len)?))
    }

    /// TA side: post the result of the served request.
    pub fn complete(&self, hv: &mut Hypervisor, result: &[u8]) -> Result<(), ChannelError> {
        let h = self.header(hv)?;
        if h.status != ChannelStatus::Request {
            return Err(ChannelError::NoRequest);
        }
        if result.len() > self.capacity() {
            return Err(ChannelError::TooLarge { len: result.len(), capacity: self.capacity() });
        }
        self.write_at(hv, HEADER_LEN, result)?;
        self.publish(hv, ChannelHeader { status: ChannelStatus::Done, ret_len: result.len() as u32, ..h })
    }

    /// TA side: report failure of the served request.
    pub fn fail(&self, hv: &mut Hypervisor) -> Result<(), ChannelError> {
        let h = self.header(hv)?;
        if h.status != ChannelStatus::Request {
            return Err(ChannelError::NoRequest);
        }
        self.publish(hv, ChannelHeader { status: ChannelStatus::Error, ret_len: 0, ..h })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
