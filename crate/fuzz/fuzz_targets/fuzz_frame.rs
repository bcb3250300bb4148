#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(frame) = framefill::data::decode_frame_bytes(data) {
        let (h, w, c) = frame.dim();
        assert_eq!(c, 3);
        assert!(h >= 1 && w >= 1);
        assert!(frame.iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
