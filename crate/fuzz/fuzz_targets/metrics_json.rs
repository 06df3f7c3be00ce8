#![no_main]

use libfuzzer_sys::fuzz_target;
use tgmtl::report::Report;
use tgmtl::trainer::MetricsFile;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = MetricsFile::from_json(text) {
        if let Ok(r) = Report::build(&[m.clone(), m]) {
            r.to_csv().unwrap();
            r.series_csv();
        }
    }
});
