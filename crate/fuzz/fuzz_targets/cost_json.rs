#![no_main]

use libfuzzer_sys::fuzz_target;
use tgmtl::cost::CostFile;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(file) = CostFile::from_json(text) {
        file.table();
    }
});
