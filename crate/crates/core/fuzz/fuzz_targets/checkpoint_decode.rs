#![no_main]

use libfuzzer_sys::fuzz_target;
use pan_core::checkpoint::{model_from_checkpoint, Checkpoint};
use pan_core::cim::CimSnapshot;
use pan_core::codebook::Codebook;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        assert_eq!(ckpt.encode(), data);
        let _ = model_from_checkpoint(&ckpt);
        let _ = CimSnapshot::from_checkpoint(&ckpt);
        let _ = Codebook::from_checkpoint(&ckpt);
    }
});
