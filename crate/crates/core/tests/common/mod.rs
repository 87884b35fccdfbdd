#![allow(dead_code)]

use std::path::PathBuf;

pub fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

pub fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

/// Host-side wallet reference, written against the documented construction
/// rather than the library's code.
pub mod wallet_ref {
    use sha2::{Digest, Sha256};

    fn h(parts: &[&[u8]]) -> [u8; 32] {
        Sha256::digest(parts.concat()).into()
    }

    pub fn kd(key: &[u8], label: &[u8], data: &[u8]) -> [u8; 32] {
        let mut out = h(&[key, label, data]);
        for _ in 0..16 {
            out = h(&[key, &out]);
        }
        out
    }

    pub fn master(seed: &[u8]) -> [u8; 32] {
        kd(seed, b"master", b"")
    }

    pub fn key(seed: &[u8], id: u32) -> [u8; 32] {
        kd(&master(seed), b"derive", &id.to_le_bytes())
    }

    pub fn pubkey(key: &[u8]) -> Vec<u8> {
        kd(key, b"pub", b"").to_vec()
    }

    pub fn address(key: &[u8]) -> Vec<u8> {
        h(&[b"addr", &pubkey(key)])[..20].to_vec()
    }

    pub fn sign(key: &[u8], msg: &[u8]) -> Vec<u8> {
        let r = kd(key, b"sig-r", msg);
        let s = kd(key, b"sig-s", &[&r[..], msg].concat());
        [r, s].concat()
    }
}

/// Known answers computed with an unrelated SHA-256 implementation, for the
/// seed `correct-horse-battery-staple`, key 0 and message `pay-bob-10`.
pub mod known {
    pub const SEED: &[u8] = b"correct-horse-battery-staple";
    pub const MSG: &[u8] = b"pay-bob-10";
    pub const MASTER: &str = "99756d076273e0f419117fb299574e3922de4363849c35cc656a7d2ad3c5a1cb";
    pub const ADDRESS: &str = "a51e0ecf97620cb4521cfc58aea11565926fc3c4";
    pub const PUBKEY: &str = "c93785523cb002d2ae13d44513d3408715fc52ecaf40b20164997d7a584d5898";
    pub const TAG: &str = "235340742d9c0b79047eb717fb33c276a09c89f1a9776d429ab3708c3022b13a\
                           020b339699eedbee56f62a23d947083e918849bb8731197df37efd85cb2037c7";
}
