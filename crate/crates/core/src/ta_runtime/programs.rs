//! Small built-in programs: echo, a persistent counter, and a hostile TA
//! used by the attack suite.

use super::{TaEnv, TaError, TaProgram};
use crate::hypervisor::{HandleId, Hypercall, ImageMeta};
use crate::stage2::{FaultKind, IpaPage};

/// Cmd 0 returns its arguments.
#[derive(Debug, Clone, Copy, Default)]
pub struct Echo;

impl TaProgram for Echo {
    fn name(&self) -> &'static str {
        "echo"
    }

    fn command_count(&self) -> u32 {
        1
    }

    fn handle(&self, _env: &mut TaEnv<'_>, cmd_id: u32, args: &[u8]) -> Result<Vec<u8>, TaError> {
        match cmd_id {
            0 => Ok(args.to_vec()),
            other => Err(TaError::UnknownCommand(other)),
        }
    }
}

/// Cmd 0 increments and returns a u64 counter, cmd 1 reads it.
#[derive(Debug, Clone, Copy, Default)]
pub struct Counter;

impl TaProgram for Counter {
    fn name(&self) -> &'static str {
        "counter"
    }

    fn command_count(&self) -> u32 {
        2
    }

    fn handle(&self, env: &mut TaEnv<'_>, cmd_id: u32, _args: &[u8]) -> Result<Vec<u8>, TaError> {
        let current = u64::from_le_bytes(env.load_state(0, 8)?.try_into().expect("8 bytes"));
        match cmd_id {
            0 => {
                let next = current + 1;
                env.store_state(0, &next.to_le_bytes())?;
                Ok(next.to_le_bytes().to_vec())
            }
            1 => Ok(current.to_le_bytes().to_vec()),
            other => Err(TaError::UnknownCommand(other)),
        }
    }
}

/// A compromised TA. Each command attempts something it must not be able
/// to do and reports what happened.
///
/// | cmd | args | attempt |
/// |-----|------|---------|
/// | 1 | - | CreateEnclave from its own page 0 |
/// | 2 | handle u32 | InvokeEnclave |
/// | 3 | handle u32 | DestroyEnclave |
/// | 4 | ipa u64, len u32 | read |
/// | 5 | ipa u64, data | write |
/// | 6 | first page u64, count u32, write u8 | touch one word per page |
///
/// Replies start with 1 if the attempt succeeded, 0 if it was refused;
/// cmd 6 instead returns how many pages it got through (u32).
/// Refused hypercalls carry the error text; refused accesses carry the
/// fault kind (0 unmapped, 1 permission).
#[derive(Debug, Clone, Copy, Default)]
pub struct Rogue;

fn u32_at(args: &[u8], at: usize) -> Result<u32, TaError> {
    args.get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or(TaError::BadArgs("short u32"))
}

fn u64_at(args: &[u8], at: usize) -> Result<u64, TaError> {
    args.get(at..at + 8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
        .ok_or(TaError::BadArgs("short u64"))
}

fn fault_code(kind: FaultKind) -> u8 {
    match kind {
        FaultKind::Unmapped => 0,
        FaultKind::PermissionDenied => 1,
    }
}

impl TaProgram for Rogue {
    fn name(&self) -> &'static str {
        "rogue"
    }

    fn command_count(&self) -> u32 {
        6
    }

    fn handle(&self, env: &mut TaEnv<'_>, cmd_id: u32, args: &[u8]) -> Result<Vec<u8>, TaError> {
        let call = match cmd_id {
            1 => Hypercall::CreateEnclave { donated: vec![IpaPage(0)], meta: ImageMeta { mem_pages: 1, channel_pages: 1 } },
            2 => Hypercall::InvokeEnclave { handle: HandleId(u32_at(args, 0)?) },
            3 => Hypercall::DestroyEnclave { handle: HandleId(u32_at(args, 0)?) },
            4 => {
                let (ipa, len) = (u64_at(args, 0)?, u32_at(args, 8)? as usize);
                return Ok(match env.read(ipa, len) {
                    Ok(bytes) => [vec![1], bytes].concat(),
                    Err(f) => vec![0, fault_code(f.kind)],
                });
            }
            5 => {
                let ipa = u64_at(args, 0)?;
                return Ok(match env.write(ipa, &args[8..]) {
                    Ok(()) => vec![1],
                    Err(f) => vec![0, fault_code(f.kind)],
                });
            }
            6 => {
                let (first, count) = (u64_at(args, 0)?, u32_at(args, 8)? as u64);
                let write = *args.get(12).ok_or(TaError::BadArgs("missing mode"))? != 0;
                let mut got = 0u32;
                for page in first..first + count {
                    let ipa = IpaPage(page).base();
                    let ok = if write { env.write(ipa, &[0xEE; 8]).is_ok() } else { env.read(ipa, 8).is_ok() };
                    got += ok as u32;
                }
                return Ok(got.to_le_bytes().to_vec());
            }
            other => return Err(TaError::UnknownCommand(other)),
        };
        Ok(match env.hypercall(call) {
            Ok(_) => vec![1],
            Err(e) => [vec![0], e.to_string().into_bytes()].concat(),
        })
    }
}
