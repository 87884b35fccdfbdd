//! Builds an enclave image, writes it, reads it back and runs it.

use vmenclave::harness::image::{EnclaveImage, IMAGE_HEADER_LEN};
use vmenclave::harness::scenario::encode_hex;
use vmenclave::harness::sim::{SimConfig, Simulation};
use vmenclave::ta_runtime::code_blob;

fn main() {
    let image = EnclaveImage::new(3, 1, 1, code_blob("echo")).unwrap();
    let bytes = image.to_bytes();
    println!("header  {}", encode_hex(&bytes[..IMAGE_HEADER_LEN]));
    println!("code    {}", encode_hex(&bytes[IMAGE_HEADER_LEN..]));

    let dir = std::env::temp_dir().join(format!("pack-image-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("echo.beim");
    image.save(&path).unwrap();
    let loaded = EnclaveImage::load(&path).unwrap();
    assert_eq!(loaded, image);
    println!("wrote and re-read {}", path.display());

    let mut sim = Simulation::new(SimConfig::with_machine(128, 1));
    let fd = sim.create(&loaded).unwrap();
    let (status, out) = sim.invoke(fd, 0, b"ping").unwrap();
    println!("echo from the loaded image: {status:?} {:?}", String::from_utf8_lossy(&out));
    sim.destroy(fd).unwrap();
    std::fs::remove_dir_all(&dir).ok();
}
