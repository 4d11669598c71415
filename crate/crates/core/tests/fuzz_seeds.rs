//! Runs every checked-in fuzz seed through its parser.

use std::fs;
use std::path::PathBuf;

use epem::io::{params_to_json, parse_csv, parse_fit_json, parse_params_json, parse_truth_json, HeaderMode};
use epem::model::ModelName;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    assert!(!out.is_empty());
    out
}

#[test]
fn csv_seeds() {
    for (name, bytes) in seeds("csv") {
        let ok = parse_csv(bytes.as_slice(), HeaderMode::Auto).is_ok();
        let expect_ok = !(name.contains("ragged") || name.contains("nan"));
        assert_eq!(ok, expect_ok, "{name}");
    }
}

#[test]
fn params_seeds_round_trip() {
    for (name, bytes) in seeds("params_json") {
        let params = parse_params_json(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(parse_params_json(&params_to_json(&params).unwrap()).unwrap(), params);
    }
}

#[test]
fn model_name_seeds() {
    for (name, bytes) in seeds("model_name") {
        let text = String::from_utf8(bytes).unwrap();
        let parsed = text.parse::<ModelName>();
        assert_eq!(parsed.is_ok(), name != "seed-XYZ", "{name}");
    }
}

#[test]
fn truth_seeds() {
    for (name, bytes) in seeds("truth_json") {
        parse_truth_json(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn fit_seeds() {
    for (name, bytes) in seeds("fit_json") {
        parse_fit_json(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
