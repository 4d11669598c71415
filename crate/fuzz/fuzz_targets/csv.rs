#![no_main]

use epem::io::{parse_csv, standardize, HeaderMode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    for mode in [HeaderMode::Auto, HeaderMode::Yes, HeaderMode::No] {
        if let Ok(d) = parse_csv(data, mode) {
            assert!(d.n() > 0 && d.dim() > 0);
            assert!(d.x.iter().all(|v| v.is_finite()));
            let _ = standardize(&d);
        }
    }
});
