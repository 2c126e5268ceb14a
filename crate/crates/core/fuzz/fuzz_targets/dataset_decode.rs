#![no_main]

use libfuzzer_sys::fuzz_target;
use pan_core::data::decode_dataset;

// Input: u16 LE header length, header bytes, then the image blob.
fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let n = u16::from_le_bytes([data[0], data[1]]) as usize;
    let rest = &data[2..];
    let (header, blob) = rest.split_at(n.min(rest.len()));
    if let Ok(ds) = decode_dataset(header, blob) {
        assert_eq!(ds.samples.len(), ds.header.count);
    }
});
