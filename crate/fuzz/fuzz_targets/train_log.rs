#![no_main]

use libfuzzer_sys::fuzz_target;
use wilson::train_log::TrainLog;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(log) = TrainLog::from_csv(text) {
        let _ = TrainLog::from_csv(&log.to_csv()).expect("rendered log parses");
    }
});
