#![no_main]

use fblab_core::io::FieldHeader;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = FieldHeader::parse(text);
    }
});
