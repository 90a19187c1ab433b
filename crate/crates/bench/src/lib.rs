//! Shared fixtures for the criterion benches.

use stepcascade_core::simworld::{SimWorld, SimWorldSpec};

/// Default simulated world with a fixed seed.
pub fn world() -> SimWorld {
    SimWorld::new(SimWorldSpec { seed: 17, ..Default::default() }).expect("default spec is valid")
}

/// `len` tokens cycling through `period` distinct words, the shape prompt
/// lookup does best on.
pub fn repetitive_tokens(len: usize, period: usize) -> Vec<String> {
    (0..len).map(|i| format!("w{}", i % period)).collect()
}
