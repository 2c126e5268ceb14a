#![no_main]

use libfuzzer_sys::fuzz_target;
use pan_core::config::KvConfig;
use pan_core::experiment::PipelineConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(kv) = KvConfig::parse(text) {
        assert_eq!(KvConfig::parse(&kv.canonical()).unwrap(), kv);
        let _ = PipelineConfig::from_kv(&kv);
    }
});
