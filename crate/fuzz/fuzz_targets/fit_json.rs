#![no_main]

use epem::io::parse_fit_json;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(doc) = parse_fit_json(text) {
            assert_eq!(doc.best_bic.labels.len(), doc.n);
        }
    }
});
