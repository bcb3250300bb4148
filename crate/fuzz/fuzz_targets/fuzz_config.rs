#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = framefill::config::Config::parse(text) {
        // Rendered output must reparse to the same map.
        let again = framefill::config::Config::parse(&cfg.render()).unwrap();
        assert_eq!(cfg.values(), again.values());
        let _ = cfg.usize_or("train.steps", 0);
        let _ = cfg.f64_or("train.lr", 0.0);
        let _ = cfg.usize_list_or("infer.intervals", &[5, 3, 1]);
    }
});
