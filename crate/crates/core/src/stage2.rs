//! Stage-2 translation: the per-VM map from guest-physical pages to machine
//! frames, and the only path by which guest code reaches memory.
//!
//! Tables are single-level and page-granular. Each entry update is charged as
//! one `pt_op`. A guest access that spans several pages is translated page by
//! page up front, so a fault anywhere in the span leaves memory untouched.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use serde::Serialize;
use thiserror::Error;

use crate::hypervisor::VmId;
use crate::machine::{FrameNo, Machine, PAGE_MASK, PAGE_SHIFT, PAGE_SIZE};

/// Guest-physical (intermediate physical) page number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct IpaPage(pub u64);

impl IpaPage {
    pub fn of(ipa: u64) -> Self {
        IpaPage(ipa >> PAGE_SHIFT)
    }

    pub fn base(self) -> u64 {
        self.0 << PAGE_SHIFT
    }
}

impl fmt::Display for IpaPage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ipa-page {:#x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Perms {
    pub read: bool,
    pub write: bool,
    pub execute: bool,
}

impl Perms {
    pub const R: Perms = Perms { read: true, write: false, execute: false };
    pub const RW: Perms = Perms { read: true, write: true, execute: false };
    pub const RX: Perms = Perms { read: true, write: false, execute: true };
    pub const RWX: Perms = Perms { read: true, write: true, execute: true };

    pub fn allows(self, access: Access) -> bool {
        match access {
            Access::Read => self.read,
            Access::Write => self.write,
            Access::Execute => self.execute,
        }
    }

    pub fn is_empty(self) -> bool {
        !(self.read || self.write || self.execute)
    }
}

impl fmt::Display for Perms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flag = |on, c| if on { c } else { '-' };
        write!(f, "{}{}{}", flag(self.read, 'r'), flag(self.write, 'w'), flag(self.execute, 'x'))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Access {
    Read,
    Write,
    Execute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum FaultKind {
    Unmapped,
    PermissionDenied,
}

/// A stage-2 abort taken by a guest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Error)]
#[error("{kind:?} stage-2 fault: vm {vm} {access:?} at ipa {ipa:#x}")]
pub struct AccessFault {
    pub vm: VmId,
    pub ipa: u64,
    pub access: Access,
    pub kind: FaultKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Mapping {
    pub frame: FrameNo,
    pub perms: Perms,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Stage2Error {
    #[error("{0} is already mapped")]
    AlreadyMapped(IpaPage),
    #[error("{0} is not mapped")]
    NotMapped(IpaPage),
    #[error("{0} is outside physical memory")]
    BadFrame(FrameNo),
    #[error("mapping for {0} has no permission bits")]
    EmptyPerms(IpaPage),
}

/// A guest memory operation.
#[derive(Debug, Clone, Copy)]
pub enum MemOp<'a> {
    Read(usize),
    Write(&'a [u8]),
    /// Instruction fetch; a read gated on the execute bit.
    Fetch(usize),
}

impl MemOp<'_> {
    pub fn access(&self) -> Access {
        match self {
            MemOp::Read(_) => Access::Read,
            MemOp::Write(_) => Access::Write,
            MemOp::Fetch(_) => Access::Execute,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            MemOp::Read(n) | MemOp::Fetch(n) => *n,
            MemOp::Write(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One page-sized piece of a translated guest access.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub frame: FrameNo,
    /// Byte range inside the frame.
    pub in_frame: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stage2Table {
    owner: VmId,
    entries: BTreeMap<IpaPage, Mapping>,
}

impl Stage2Table {
    pub fn new(owner: VmId) -> Self {
        Self { owner, entries: BTreeMap::new() }
    }

    pub fn owner(&self) -> VmId {
        self.owner
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, page: IpaPage) -> Option<Mapping> {
        self.entries.get(&page).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (IpaPage, Mapping)> + '_ {
        self.entries.iter().map(|(p, m)| (*p, *m))
    }

    /// Frames currently reachable through this table.
    pub fn frames(&self) -> impl Iterator<Item = FrameNo> + '_ {
        self.entries.values().map(|m| m.frame)
    }

    /// Owned copy of the entry set, for before/after comparisons.
    pub fn snapshot(&self) -> BTreeMap<IpaPage, Mapping> {
        self.entries.clone()
    }

    pub fn map(&mut self, machine: &mut Machine, page: IpaPage, frame: FrameNo, perms: Perms) -> Result<(), Stage2Error> {
        if self.entries.contains_key(&page) {
            return Err(Stage2Error::AlreadyMapped(page));
        }
        if !machine.contains(frame) {
            return Err(Stage2Error::BadFrame(frame));
        }
        if perms.is_empty() {
            return Err(Stage2Error::EmptyPerms(page));
        }
        self.entries.insert(page, Mapping { frame, perms });
        machine.charge_pt_op();
        Ok(())
    }

    pub fn unmap(&mut self, machine: &mut Machine, page: IpaPage) -> Result<FrameNo, Stage2Error> {
        let m = self.entries.remove(&page).ok_or(Stage2Error::NotMapped(page))?;
        machine.charge_pt_op();
        Ok(m.frame)
    }

    /// Rewrites the permission bits of an existing entry in place.
    pub fn protect(&mut self, machine: &mut Machine, page: IpaPage, perms: Perms) -> Result<Perms, Stage2Error> {
        if perms.is_empty() {
            return Err(Stage2Error::EmptyPerms(page));
        }
        let m = self.entries.get_mut(&page).ok_or(Stage2Error::NotMapped(page))?;
        let old = std::mem::replace(&mut m.perms, perms);
        machine.charge_pt_op();
        Ok(old)
    }

    /// Drops every entry, charging one `pt_op` each.
    pub fn clear(&mut self, machine: &mut Machine) {
        for _ in 0..self.entries.len() {
            machine.charge_pt_op();
        }
        self.entries.clear();
    }

    pub fn translate(&self, ipa: u64, access: Access) -> Result<u64, AccessFault> {
        let fault = |kind| AccessFault { vm: self.owner, ipa, access, kind };
        let m = self.entries.get(&IpaPage::of(ipa)).ok_or(fault(FaultKind::Unmapped))?;
        if !m.perms.allows(access) {
            return Err(fault(FaultKind::PermissionDenied));
        }
        Ok(m.frame.base() | (ipa & PAGE_MASK))
    }

    /// Splits `[ipa, ipa+len)` into per-page chunks, translating each.
    /// Fails on the first page that does not permit `access`.
    pub fn translate_span(&self, ipa: u64, len: usize, access: Access) -> Result<Vec<Chunk>, AccessFault> {
        let mut chunks = Vec::new();
        let mut cursor = ipa;
        let mut remaining = len;
        while remaining > 0 {
            let pa = self.translate(cursor, access)?;
            let in_page = (cursor & PAGE_MASK) as usize;
            let n = remaining.min(PAGE_SIZE - in_page);
            chunks.push(Chunk { frame: FrameNo(pa >> PAGE_SHIFT), in_frame: in_page..in_page + n });
            remaining -= n;
            if remaining > 0 {
                cursor = cursor.checked_add(n as u64).ok_or(AccessFault {
                    vm: self.owner,
                    ipa: cursor,
                    access,
                    kind: FaultKind::Unmapped,
                })?;
            }
        }
        Ok(chunks)
    }

    /// Performs a guest access through this table. Returns the bytes read
    /// (empty for writes) and the frames touched.
    pub fn access(&self, machine: &mut Machine, ipa: u64, op: MemOp<'_>) -> Result<(Vec<u8>, Vec<FrameNo>), AccessFault> {
        let chunks = self.translate_span(ipa, op.len(), op.access())?;
        let touched = chunks.iter().map(|c| c.frame).collect();
        let mut out = Vec::new();
        match op {
            MemOp::Read(_) | MemOp::Fetch(_) => {
                for c in &chunks {
                    let bytes = machine
                        .read_frame(c.frame, c.in_frame.start, c.in_frame.len())
                        .expect("stage-2 entries only reference valid frames");
                    out.extend_from_slice(&bytes);
                }
            }
            MemOp::Write(data) => {
                let mut at = 0;
                for c in &chunks {
                    let n = c.in_frame.len();
                    machine
                        .write_frame(c.frame, c.in_frame.start, &data[at..at + n])
                        .expect("stage-2 entries only reference valid frames");
                    at += n;
                }
            }
        }
        Ok((out, touched))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::MachineConfig;
    use proptest::prelude::*;

    fn setup() -> (Machine, Stage2Table) {
        (Machine::new(MachineConfig { frames: 64, pcpus: 1 }), Stage2Table::new(VmId(1)))
    }

    #[test]
    fn map_and_translate() {
        let (mut m, mut t) = setup();
        t.map(&mut m, IpaPage(0x10), FrameNo(7), Perms::RW).unwrap();
        assert_eq!(t.translate(0x10 << 12 | 0x4, Access::Read), Ok(7 << 12 | 0x4));
    }

    #[test]
    fn double_map_rejected() {
        let (mut m, mut t) = setup();
        t.map(&mut m, IpaPage(1), FrameNo(1), Perms::RW).unwrap();
        assert_eq!(t.map(&mut m, IpaPage(1), FrameNo(2), Perms::RW), Err(Stage2Error::AlreadyMapped(IpaPage(1))));
        assert_eq!(t.map(&mut m, IpaPage(2), FrameNo(64), Perms::RW), Err(Stage2Error::BadFrame(FrameNo(64))));
        assert_eq!(
            t.map(&mut m, IpaPage(3), FrameNo(3), Perms { read: false, write: false, execute: false }),
            Err(Stage2Error::EmptyPerms(IpaPage(3)))
        );
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn map_charges_pt_ops() {
        let mut m = Machine::new(MachineConfig { frames: 512, pcpus: 1 });
        let mut t = Stage2Table::new(VmId(0));
        let before = m.ledger();
        for p in 0..256 {
            t.map(&mut m, IpaPage(p), FrameNo(p), Perms::RWX).unwrap();
        }
        assert_eq!(m.ledger().since(&before).pt_ops, 256);
    }

    #[test]
    fn unmap_round_trip() {
        let (mut m, mut t) = setup();
        t.map(&mut m, IpaPage(5), FrameNo(9), Perms::RW).unwrap();
        let before = m.ledger().pt_ops;
        assert_eq!(t.unmap(&mut m, IpaPage(5)), Ok(FrameNo(9)));
        assert_eq!(m.ledger().pt_ops, before + 1);
        let f = t.translate(5 << 12, Access::Read).unwrap_err();
        assert_eq!(f.kind, FaultKind::Unmapped);
        assert_eq!(t.unmap(&mut m, IpaPage(6)), Err(Stage2Error::NotMapped(IpaPage(6))));
    }

    #[test]
    fn faults_carry_kind() {
        let (mut m, mut t) = setup();
        assert_eq!(t.translate(0x3000, Access::Read).unwrap_err().kind, FaultKind::Unmapped);
        t.map(&mut m, IpaPage(3), FrameNo(3), Perms::R).unwrap();
        let f = t.translate(0x3008, Access::Write).unwrap_err();
        assert_eq!(f, AccessFault { vm: VmId(1), ipa: 0x3008, access: Access::Write, kind: FaultKind::PermissionDenied });
        assert_eq!(t.translate(0x3008, Access::Execute).unwrap_err().kind, FaultKind::PermissionDenied);
        assert!(t.translate(0x3008, Access::Read).is_ok());
    }

    #[test]
    fn protect_changes_perms() {
        let (mut m, mut t) = setup();
        t.map(&mut m, IpaPage(3), FrameNo(3), Perms::RWX).unwrap();
        assert_eq!(t.protect(&mut m, IpaPage(3), Perms::R), Ok(Perms::RWX));
        assert!(t.translate(0x3000, Access::Write).is_err());
        assert!(t.protect(&mut m, IpaPage(4), Perms::R).is_err());
    }

    #[test]
    fn cross_page_write_lands_in_two_frames() {
        let (mut m, mut t) = setup();
        // Non-adjacent frames behind adjacent IPA pages.
        t.map(&mut m, IpaPage(0), FrameNo(10), Perms::RW).unwrap();
        t.map(&mut m, IpaPage(1), FrameNo(3), Perms::RW).unwrap();
        let data: Vec<u8> = (0..6000u32).map(|i| (i * 7 % 251) as u8).collect();
        let start = 2000u64;
        let (_, touched) = t.access(&mut m, start, MemOp::Write(&data)).unwrap();
        assert_eq!(touched, vec![FrameNo(10), FrameNo(3)]);

        // flat oracle of the guest view
        let mut oracle = vec![0u8; 2 * PAGE_SIZE];
        oracle[2000..8000].copy_from_slice(&data);
        let mut phys = m.read_frame(FrameNo(10), 0, PAGE_SIZE).unwrap();
        phys.extend(m.read_frame(FrameNo(3), 0, PAGE_SIZE).unwrap());
        assert_eq!(phys, oracle);

        let (back, _) = t.access(&mut m, start, MemOp::Read(6000)).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn faulting_span_writes_nothing() {
        let (mut m, mut t) = setup();
        t.map(&mut m, IpaPage(0), FrameNo(1), Perms::RW).unwrap();
        t.map(&mut m, IpaPage(1), FrameNo(2), Perms::R).unwrap();
        let err = t.access(&mut m, 4000, MemOp::Write(&[0xEE; 200])).unwrap_err();
        assert_eq!(err.kind, FaultKind::PermissionDenied);
        assert_eq!(err.ipa, 4096);
        assert!(m.frame_is_zero(FrameNo(1)).unwrap());
        assert!(m.frame_is_zero(FrameNo(2)).unwrap());
    }

    #[test]
    fn fetch_needs_execute() {
        let (mut m, mut t) = setup();
        t.map(&mut m, IpaPage(0), FrameNo(1), Perms::RW).unwrap();
        t.map(&mut m, IpaPage(1), FrameNo(2), Perms::RX).unwrap();
        assert!(t.access(&mut m, 0, MemOp::Fetch(4)).is_err());
        assert!(t.access(&mut m, 4096, MemOp::Fetch(4)).is_ok());
    }

    #[test]
    fn zero_length_access_is_noop() {
        let (mut m, t) = setup();
        assert_eq!(t.access(&mut m, 0xdead_0000, MemOp::Read(0)), Ok((vec![], vec![])));
    }

    #[derive(Debug, Clone)]
    enum Op {
        Map(u64, u64),
        Unmap(u64),
    }

    proptest! {
        // Replay against a plain BTreeMap oracle.
        #[test]
        fn entry_set_matches_map_oracle(ops in prop::collection::vec(
            prop_oneof![
                (0u64..32, 0u64..64).prop_map(|(p, f)| Op::Map(p, f)),
                (0u64..32).prop_map(Op::Unmap),
            ], 1..300)) {
            let (mut m, mut t) = setup();
            let mut oracle: BTreeMap<u64, u64> = BTreeMap::new();
            for op in ops {
                match op {
                    Op::Map(p, f) => {
                        let r = t.map(&mut m, IpaPage(p), FrameNo(f), Perms::RW);
                        match oracle.entry(p) {
                            std::collections::btree_map::Entry::Occupied(_) => {
                                prop_assert_eq!(r, Err(Stage2Error::AlreadyMapped(IpaPage(p))))
                            }
                            std::collections::btree_map::Entry::Vacant(slot) => {
                                prop_assert!(r.is_ok());
                                slot.insert(f);
                            }
                        }
                    }
                    Op::Unmap(p) => {
                        let r = t.unmap(&mut m, IpaPage(p));
                        match oracle.remove(&p) {
                            Some(f) => prop_assert_eq!(r, Ok(FrameNo(f))),
                            None => prop_assert_eq!(r, Err(Stage2Error::NotMapped(IpaPage(p)))),
                        }
                    }
                }
            }
            let got: BTreeMap<u64, u64> = t.entries().map(|(p, mm)| (p.0, mm.frame.0)).collect();
            prop_assert_eq!(got, oracle);
        }

        #[test]
        fn translation_preserves_offset_and_is_pure(
            pages in prop::collection::btree_map(0u64..1024, 0u64..64, 1..32),
            picks in prop::collection::vec((any::<prop::sample::Index>(), 0u64..4096), 1..64),
        ) {
            let (mut m, mut t) = setup();
            for (p, f) in &pages {
                t.map(&mut m, IpaPage(*p), FrameNo(*f), Perms::RWX).unwrap();
            }
            let keys: Vec<u64> = pages.keys().copied().collect();
            for (idx, off) in picks {
                let page = keys[idx.index(keys.len())];
                let ipa = page << 12 | off;
                let pa = t.translate(ipa, Access::Read).unwrap();
                prop_assert_eq!(pa & 0xFFF, ipa & 0xFFF);
                prop_assert_eq!(pa >> 12, pages[&page]);
                prop_assert_eq!(t.translate(ipa, Access::Read), Ok(pa));
            }
        }
    }
}
