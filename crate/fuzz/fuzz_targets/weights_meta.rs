#![no_main]

use fblab_core::io::parse_json;
use fblab_core::run::WeightsMeta;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_json::<WeightsMeta>(text);
    }
});
