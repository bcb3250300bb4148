#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(report) = framefill::metrics::parse_report(text) {
        // A valid report serializes and reparses to itself.
        let json = serde_json::to_string(&report).unwrap();
        let again = framefill::metrics::parse_report(&json).unwrap();
        assert_eq!(report, again);
    }
});
