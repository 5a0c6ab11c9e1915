#![no_main]

use fblab_core::io::{boundary_from_csv, boundary_to_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(fb) = boundary_from_csv(text) {
        let back = boundary_from_csv(&boundary_to_csv(&fb)).expect("written boundary reparses");
        assert_eq!(back, fb);
    }
});
