#![no_main]

use fblab_core::ProblemSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = ProblemSpec::from_json_str(text) {
        let _ = spec.grid();
    }
});
