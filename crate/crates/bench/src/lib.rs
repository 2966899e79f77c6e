//! Shared fixtures for the criterion benchmarks.

use iars_core::data::synth::{synth_generate, SyntheticGenConfig};
use iars_core::data::Sample;

/// Deterministic desk-scale samples.
pub fn samples(count: usize) -> Vec<Sample> {
    synth_generate(&SyntheticGenConfig {
        count,
        ..Default::default()
    })
    .expect("valid synthetic config")
}
