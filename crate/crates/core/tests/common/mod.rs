#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

// Resolves from both the core and the cli crate.
const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures");

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(FIXTURES).join(name)
}

/// Reads a `key = value` expectations file.
pub fn expected(name: &str) -> BTreeMap<String, String> {
    std::fs::read_to_string(fixture(name))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let (k, v) = l.split_once('=').unwrap();
            (k.trim().to_string(), v.trim().to_string())
        })
        .collect()
}

pub fn num(map: &BTreeMap<String, String>, key: &str) -> f64 {
    map.get(key).unwrap_or_else(|| panic!("missing {key}")).parse().unwrap()
}
