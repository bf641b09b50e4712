#![no_main]

use libfuzzer_sys::fuzz_target;
use wilson::metrics::MetricReport;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(r) = MetricReport::from_toml(text) {
        let _ = r.to_table(&Default::default());
        let _ = MetricReport::from_toml(&r.to_toml()).expect("rendered report parses");
    }
});
