//! Shared fixtures for the criterion benchmarks.

use mbhgcn::synthetic::{generate, SyntheticConfig};
use mbhgcn::Dataset;

/// A funnel dataset of the given size with a fixed seed.
pub fn fixture(users: usize, items: usize) -> Dataset {
    generate(&SyntheticConfig {
        users,
        items,
        clusters: 8,
        target_per_user: 4,
        extras_per_behavior: 6,
        noise: 0.1,
        seed: 1,
        ..SyntheticConfig::default()
    })
    .expect("valid fixture parameters")
}
