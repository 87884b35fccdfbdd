//! Toy key-management wallet with six commands.
//!
//! All "crypto" is an iterated keyed SHA-256 digest, so outputs are
//! deterministic and easy to recompute outside the simulator.
//!
//! | cmd | args | result |
//! |-----|------|--------|
//! | 1 create_master_key | seed | empty |
//! | 2 derive_key | - | key id (u32) |
//! | 3 get_address | key id | 20 bytes |
//! | 4 get_pubkey | key id | 32 bytes |
//! | 5 sign | key id, msg | 64-byte tag |
//! | 6 verify | key id, tag, msg | `[1]` or `[0]` |
//!
//! State page layout: `has_master: u32`, `key_count: u32`, master key
//! (32 bytes), then derived keys of 32 bytes each.

use sha2::{Digest, Sha256};

use super::{TaEnv, TaError, TaProgram};
use crate::machine::PAGE_SIZE;

pub const CMD_CREATE_MASTER_KEY: u32 = 1;
pub const CMD_DERIVE_KEY: u32 = 2;
pub const CMD_GET_ADDRESS: u32 = 3;
pub const CMD_GET_PUBKEY: u32 = 4;
pub const CMD_SIGN: u32 = 5;
pub const CMD_VERIFY: u32 = 6;

pub const KEY_LEN: usize = 32;
pub const ADDRESS_LEN: usize = 20;
pub const TAG_LEN: usize = 64;
/// Extra digest rounds in [`keyed_digest`].
pub const ROUNDS: usize = 16;

const OFF_HAS_MASTER: usize = 0;
const OFF_KEY_COUNT: usize = 4;
const OFF_MASTER: usize = 8;
const OFF_KEYS: usize = OFF_MASTER + KEY_LEN;
pub const MAX_KEYS: u32 = ((PAGE_SIZE - OFF_KEYS) / KEY_LEN) as u32;

/// `h = H(key || label || data)`, then `ROUNDS` times `h = H(key || h)`.
pub fn keyed_digest(key: &[u8], label: &[u8], data: &[u8]) -> [u8; KEY_LEN] {
    let mut h: [u8; KEY_LEN] = Sha256::new().chain_update(key).chain_update(label).chain_update(data).finalize().into();
    for _ in 0..ROUNDS {
        h = Sha256::new().chain_update(key).chain_update(h).finalize().into();
    }
    h
}

pub fn master_from_seed(seed: &[u8]) -> [u8; KEY_LEN] {
    keyed_digest(seed, b"master", &[])
}

pub fn derive(master: &[u8], index: u32) -> [u8; KEY_LEN] {
    keyed_digest(master, b"derive", &index.to_le_bytes())
}

pub fn pubkey(key: &[u8]) -> [u8; KEY_LEN] {
    keyed_digest(key, b"pub", &[])
}

pub fn address(key: &[u8]) -> [u8; ADDRESS_LEN] {
    let d = Sha256::new().chain_update(b"addr").chain_update(pubkey(key)).finalize();
    d[..ADDRESS_LEN].try_into().expect("20 bytes")
}

pub fn sign(key: &[u8], msg: &[u8]) -> [u8; TAG_LEN] {
    let r = keyed_digest(key, b"sig-r", msg);
    let s = keyed_digest(key, b"sig-s", &[&r[..], msg].concat());
    let mut tag = [0; TAG_LEN];
    tag[..KEY_LEN].copy_from_slice(&r);
    tag[KEY_LEN..].copy_from_slice(&s);
    tag
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Wallet;

fn key_id(args: &[u8]) -> Result<u32, TaError> {
    args.get(..4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or(TaError::BadArgs("missing key id"))
}

fn read_u32(env: &mut TaEnv<'_>, offset: usize) -> Result<u32, TaError> {
    Ok(u32::from_le_bytes(env.load_state(offset, 4)?.try_into().expect("4 bytes")))
}

impl Wallet {
    fn master(env: &mut TaEnv<'_>) -> Result<Vec<u8>, TaError> {
        if read_u32(env, OFF_HAS_MASTER)? == 0 {
            return Err(TaError::NoMasterKey);
        }
        env.load_state(OFF_MASTER, KEY_LEN)
    }

    fn key(env: &mut TaEnv<'_>, id: u32) -> Result<Vec<u8>, TaError> {
        Self::master(env)?;
        if id >= read_u32(env, OFF_KEY_COUNT)? {
            return Err(TaError::BadKeyId(id));
        }
        env.load_state(OFF_KEYS + id as usize * KEY_LEN, KEY_LEN)
    }
}

impl TaProgram for Wallet {
    fn name(&self) -> &'static str {
        "wallet"
    }

    fn command_count(&self) -> u32 {
        6
    }

    fn handle(&self, env: &mut TaEnv<'_>, cmd_id: u32, args: &[u8]) -> Result<Vec<u8>, TaError> {
        match cmd_id {
            CMD_CREATE_MASTER_KEY => {
                env.store_state(OFF_MASTER, &master_from_seed(args))?;
                env.store_state(OFF_KEY_COUNT, &0u32.to_le_bytes())?;
                env.store_state(OFF_HAS_MASTER, &1u32.to_le_bytes())?;
                Ok(Vec::new())
            }
            CMD_DERIVE_KEY => {
                let master = Self::master(env)?;
                let id = read_u32(env, OFF_KEY_COUNT)?;
                if id >= MAX_KEYS {
                    return Err(TaError::KeyStoreFull);
                }
                env.store_state(OFF_KEYS + id as usize * KEY_LEN, &derive(&master, id))?;
                env.store_state(OFF_KEY_COUNT, &(id + 1).to_le_bytes())?;
                Ok(id.to_le_bytes().to_vec())
            }
            CMD_GET_ADDRESS => Ok(address(&Self::key(env, key_id(args)?)?).to_vec()),
            CMD_GET_PUBKEY => Ok(pubkey(&Self::key(env, key_id(args)?)?).to_vec()),
            CMD_SIGN => {
                let key = Self::key(env, key_id(args)?)?;
                Ok(sign(&key, &args[4..]).to_vec())
            }
            CMD_VERIFY => {
                let key = Self::key(env, key_id(args)?)?;
                let tag = args.get(4..4 + TAG_LEN).ok_or(TaError::BadArgs("missing tag"))?;
                let ok = sign(&key, &args[4 + TAG_LEN..])[..] == *tag;
                Ok(vec![ok as u8])
            }
            other => Err(TaError::UnknownCommand(other)),
        }
    }
}

/// Argument encoding helpers for callers.
pub mod args {
    use super::TAG_LEN;

    pub fn key_id(id: u32) -> Vec<u8> {
        id.to_le_bytes().to_vec()
    }

    pub fn sign(id: u32, msg: &[u8]) -> Vec<u8> {
        [&id.to_le_bytes()[..], msg].concat()
    }

    pub fn verify(id: u32, tag: &[u8; TAG_LEN], msg: &[u8]) -> Vec<u8> {
        [&id.to_le_bytes()[..], &tag[..], msg].concat()
    }
}
