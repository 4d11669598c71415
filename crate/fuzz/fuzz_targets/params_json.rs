#![no_main]

use epem::io::{params_to_json, parse_params_json};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(params) = parse_params_json(text) {
        params.validate().expect("parsed parameters are valid");
        let again = parse_params_json(&params_to_json(&params).unwrap()).expect("round trip");
        assert_eq!(again.spec, params.spec);
    }
});
