#![no_main]

use libfuzzer_sys::fuzz_target;
use wilson::image::Mask;

fuzz_target!(|data: &[u8]| {
    let _ = Mask::decode_png(data);
});
