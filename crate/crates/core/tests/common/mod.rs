#![allow(dead_code)]

use std::path::PathBuf;

use isa_core::datagen::DatagenParams;
use isa_core::trainer::TrainConfig;

pub fn tiny_params(seed: u64) -> DatagenParams {
    DatagenParams {
        seed,
        ..DatagenParams::profile("tiny").unwrap()
    }
}

/// A few quick epochs at narrow widths.
pub fn quick_train(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        warmup_epochs: 1,
        batch_size: 16,
        hidden_self: 16,
        hidden_cross: 16,
        seed,
        ..TrainConfig::toy()
    }
}

/// Compares `actual` with the stored golden file. Set `ISA_BLESS=1` to
/// rewrite the file instead.
pub fn check_golden(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    if std::env::var_os("ISA_BLESS").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e} (run with ISA_BLESS=1 to create)", path.display()));
    if expected != actual {
        let line = expected
            .lines()
            .zip(actual.lines())
            .position(|(a, b)| a != b)
            .map_or_else(|| "length".to_string(), |i| format!("line {}", i + 1));
        panic!("{} differs from output at {line}", path.display());
    }
}
