#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // All three container decoders must reject hostile input without
    // panicking; a successful decode must re-encode to the same bytes.
    if let Ok(bundle) = framefill::checkpoint::decode_bundle(data) {
        let bytes = framefill::checkpoint::encode_bundle(&bundle).unwrap();
        assert_eq!(bytes, data);
    }
    if let Ok(codec) = framefill::checkpoint::decode_codec(data) {
        assert_eq!(framefill::checkpoint::encode_codec(&codec), data);
    }
    if let Ok(denoiser) = framefill::checkpoint::decode_denoiser(data) {
        assert_eq!(framefill::checkpoint::encode_denoiser(&denoiser), data);
    }
});
