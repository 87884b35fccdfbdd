//! A wallet enclave driven through the primary OS driver, with its outputs
//! checked against the host-side reference functions.

use vmenclave::channel::ChannelStatus;
use vmenclave::harness::scenario::encode_hex;
use vmenclave::harness::sim::{SimConfig, Simulation};
use vmenclave::ta_runtime::{builtin_image, wallet};

fn main() {
    let mut sim = Simulation::new(SimConfig::with_machine(1024, 1));
    let fd = sim.create(&builtin_image("wallet", 4, 1)).expect("create");
    println!("opened {fd}");

    let seed = b"correct horse battery staple";
    let mut call = |cmd, args: &[u8]| {
        let (status, out) = sim.invoke(fd, cmd, args).expect("driver call");
        assert_eq!(status, ChannelStatus::Done);
        out
    };
    call(wallet::CMD_CREATE_MASTER_KEY, seed);
    let id = u32::from_le_bytes(call(wallet::CMD_DERIVE_KEY, &[]).try_into().unwrap());
    let address = call(wallet::CMD_GET_ADDRESS, &wallet::args::key_id(id));
    let pubkey = call(wallet::CMD_GET_PUBKEY, &wallet::args::key_id(id));
    let tag: [u8; wallet::TAG_LEN] = call(wallet::CMD_SIGN, &wallet::args::sign(id, b"pay bob 10")).try_into().unwrap();
    let good = call(wallet::CMD_VERIFY, &wallet::args::verify(id, &tag, b"pay bob 10"));
    let mut forged = tag;
    forged[0] ^= 1;
    let bad = call(wallet::CMD_VERIFY, &wallet::args::verify(id, &forged, b"pay bob 10"));

    let key = wallet::derive(&wallet::master_from_seed(seed), id);
    println!("key {id}");
    println!("  address {}", encode_hex(&address));
    println!("  pubkey  {}", encode_hex(&pubkey));
    println!("  tag     {}", encode_hex(&tag));
    println!("  verify genuine {good:?}, forged {bad:?}");
    assert_eq!(address, wallet::address(&key));
    assert_eq!(pubkey, wallet::pubkey(&key));
    assert_eq!(tag, wallet::sign(&key, b"pay bob 10"));
    assert_eq!((good, bad), (vec![1], vec![0]));

    sim.destroy(fd).expect("destroy");
    assert!(sim.violations().is_empty(), "{:?}", sim.violations());
    println!("destroyed; {} trace records, no oracle violations", sim.trace().len());
}
