#![no_main]

//! Input: manifest JSON, a zero byte, then the blob. The manifest checksum
//! is replaced by the blob's real one so decoding gets past it.

use libfuzzer_sys::fuzz_target;
use tgmtl::artifacts::sha256_hex;
use tgmtl::checkpoint::{decode, CheckpointManifest};

fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let (head, blob) = (&data[..split], data.get(split + 1..).unwrap_or(&[]));
    let Ok(mut manifest) = serde_json::from_slice::<CheckpointManifest>(head) else { return };
    manifest.blob_sha256 = sha256_hex(blob);
    if let Ok(tensors) = decode(&manifest, blob) {
        let values: usize = tensors.iter().map(|(_, t)| t.len()).sum();
        assert_eq!(values * 8, blob.len());
    }
});
