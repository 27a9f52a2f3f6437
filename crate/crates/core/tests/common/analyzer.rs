//! The boundary fixture and its verdicts, worked out by hand.

use std::path::{Path, PathBuf};

pub const AREA_BUDGET: f64 = 4.4;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// (name, candidate, target) for every row of `boundaries.csv` at the
/// default thresholds and an area budget of 4.4 mm².
pub const BOUNDARY_VERDICTS: [(&str, bool, bool); 12] = [
    ("base", true, true),
    ("mpki_at", false, false),
    ("mpki_above", true, true),
    ("dm_at", false, false),
    ("dm_above", true, true),
    ("ratio_at", true, true),
    ("ratio_above", true, false),
    ("area_at", true, true),
    ("area_above", true, false),
    ("not_largest", false, false),
    ("shared_at", true, true),
    ("shared_above", true, false),
];
