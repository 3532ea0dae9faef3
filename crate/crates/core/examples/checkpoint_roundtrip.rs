//! Saves a freshly built network, reloads it, and shows how a damaged file
//! is rejected.
//!
//! cargo run --release --example checkpoint_roundtrip

use ribcam::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use ribcam::model::{build_network, ArchSpec};

fn main() -> ribcam::Result<()> {
    let net = build_network(&ArchSpec::desk(), 42)?;
    let path = std::env::temp_dir().join("ribcam-example.ckpt");
    save_checkpoint(&net, &path)?;
    let back = load_checkpoint(&path)?;
    let digest = |n: &ribcam::model::Network| n.param_digest(|_| true);
    println!("{} parameters, digests equal: {}", net.param_count(), digest(&net) == digest(&back));

    let mut bytes = encode_checkpoint(&net)?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    match decode_checkpoint(&bytes) {
        Ok(_) => println!("corruption went unnoticed"),
        Err(e) => println!("flipped byte {mid}: {e}"),
    }
    let _ = std::fs::remove_file(&path);
    Ok(())
}
