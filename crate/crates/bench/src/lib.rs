//! Shared fixtures for the benchmarks.

use volprecip_core::collocate::MatchRecord;
use volprecip_core::synthgen::{generate_dataset, SynthConfig};

/// Square synthetic records of side `side`.
pub fn records(side: usize, n: usize) -> Vec<MatchRecord> {
    generate_dataset(
        &SynthConfig {
            h: side,
            w: side,
            ..Default::default()
        },
        n,
    )
    .expect("valid synthetic config")
}
