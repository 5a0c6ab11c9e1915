#![no_main]

use fblab_core::io::to_json_pretty;
use fblab_core::Config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = Config::from_json_str(text) {
        let again = Config::from_json_str(&to_json_pretty(&cfg)).expect("canonical form reparses");
        assert_eq!(again, cfg);
    }
});
