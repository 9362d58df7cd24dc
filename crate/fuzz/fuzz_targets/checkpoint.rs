#![no_main]

use fedsim_core::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        assert_eq!(Checkpoint::decode(&ckpt.encode()).unwrap(), ckpt);
    }
});
