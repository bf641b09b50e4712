#![no_main]

use libfuzzer_sys::fuzz_target;
use wilson::taxonomy::IncrementalSchedule;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(s) = IncrementalSchedule::from_text(text) {
        let again = IncrementalSchedule::from_text(&s.to_text()).expect("rendered schedule parses");
        assert_eq!(again.steps(), s.steps());
    }
});
