#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(manifest) = framefill::manifest::parse_manifest(text) {
        let json = serde_json::to_string(&manifest).unwrap();
        let again = framefill::manifest::parse_manifest(&json).unwrap();
        assert_eq!(manifest, again);
    }
});
