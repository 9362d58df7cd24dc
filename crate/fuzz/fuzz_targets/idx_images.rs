#![no_main]

use fedsim_core::datasets::parse_idx_images;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(images) = parse_idx_images(data) {
        let per_image = images.rows * images.cols;
        assert!(images.pixels.iter().all(|p| p.len() == per_image));
        assert!(images.pixels.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }
});
