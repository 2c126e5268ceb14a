#![no_main]

use libfuzzer_sys::fuzz_target;
use pan_core::data::{read_cifar10_binary, write_cifar10_binary};

fuzz_target!(|data: &[u8]| {
    if let Ok(images) = read_cifar10_binary(data) {
        // every accepted byte string is reproduced exactly
        assert_eq!(write_cifar10_binary(&images).unwrap(), data);
    }
});
