#![no_main]

use fedsim_core::ParamVector;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = ParamVector::from_bytes(data) {
        // Decoding is strict, so re-encoding reproduces the input exactly.
        assert_eq!(v.to_bytes(), data);
    }
    if let Ok((v, used)) = ParamVector::decode_prefix(data) {
        assert_eq!(used, 8 + 8 * v.len());
    }
});
