#![no_main]

use libfuzzer_sys::fuzz_target;
use wilson::grid::Grid;

fuzz_target!(|data: &[u8]| {
    if let Ok(g) = Grid::decode(data) {
        assert_eq!(g.encode(), data);
    }
});
