#![no_main]

//! Input: manifest JSON, a zero byte, then the blob. The manifest checksum
//! is replaced by the blob's real one so decoding gets past it.

use libfuzzer_sys::fuzz_target;
use tgmtl::artifacts::sha256_hex;
use tgmtl::synthetic::{Dataset, DatasetManifest};

fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let (head, blob) = (&data[..split], data.get(split + 1..).unwrap_or(&[]));
    let Ok(mut manifest) = serde_json::from_slice::<DatasetManifest>(head) else { return };
    manifest.blob_sha256 = sha256_hex(blob);
    if let Ok(ds) = Dataset::from_parts(&manifest, blob) {
        let (m2, b2) = ds.to_parts();
        assert_eq!(b2, blob);
        assert_eq!(m2.n_train, manifest.n_train);
    }
});
