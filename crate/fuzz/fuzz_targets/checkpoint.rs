#![no_main]

use libfuzzer_sys::fuzz_target;
use wilson::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let _ = ck.model();
        let bytes = ck.encode().expect("decoded checkpoint encodes");
        Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
    }
});
