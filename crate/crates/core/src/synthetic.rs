//! Seeded datasets with planted cluster structure.
//!
//! Users and items are split into clusters. Each user's target interactions
//! come from their own cluster; every auxiliary behavior holds the next
//! behavior's items plus a few extra in-cluster items, and each extra is
//! replaced by a uniformly random item with probability `noise`. The result
//! is a view ⊇ cart ⊇ buy style funnel. With `target_in_aux < 1` each
//! target item enters the auxiliary behaviors only with that probability,
//! so the auxiliary data reflects the user's cluster rather than the exact
//! purchases.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{build_dataset, Dataset, InteractionRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    /// Labels, target last.
    pub behaviors: Vec<String>,
    pub target_per_user: usize,
    /// New items added at each step down the funnel.
    pub extras_per_behavior: usize,
    pub noise: f64,
    /// Probability that a target item is also recorded in the auxiliary
    /// behaviors.
    pub target_in_aux: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            users: 50,
            items: 30,
            clusters: 3,
            behaviors: ["view", "cart", "buy"].map(str::to_owned).to_vec(),
            target_per_user: 4,
            extras_per_behavior: 2,
            noise: 0.1,
            target_in_aux: 1.0,
            seed: 7,
        }
    }
}

pub fn generate_records(config: &SyntheticConfig) -> Result<Vec<InteractionRecord>> {
    if config.clusters == 0 || config.items < config.clusters {
        return Err(Error::config("clusters", "need 1 ≤ clusters ≤ items"));
    }
    if config.behaviors.is_empty() {
        return Err(Error::config(
            "behaviors",
            "at least one behavior is required",
        ));
    }
    for (field, p) in [
        ("noise", config.noise),
        ("target_in_aux", config.target_in_aux),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::config(field, "must lie in [0, 1]"));
        }
    }
    let cluster_items: Vec<Vec<usize>> = (0..config.clusters)
        .map(|c| {
            (0..config.items)
                .filter(|i| i % config.clusters == c)
                .collect()
        })
        .collect();
    let smallest = cluster_items.iter().map(Vec::len).min().unwrap_or(0);
    if config.target_per_user > smallest {
        return Err(Error::config(
            "target_per_user",
            "exceeds the smallest cluster",
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k_count = config.behaviors.len();
    let mut records = Vec::new();
    for u in 0..config.users {
        let own = &cluster_items[u % config.clusters];
        let targets: Vec<usize> = own
            .choose_multiple(&mut rng, config.target_per_user)
            .copied()
            .collect();
        let mut current: BTreeSet<usize> = targets
            .iter()
            .copied()
            .filter(|_| config.target_in_aux >= 1.0 || rng.random::<f64>() < config.target_in_aux)
            .collect();
        // Target interactions get increasing timestamps after all auxiliary ones.
        let base = 1_000_000;
        for (t, &i) in targets.iter().enumerate() {
            records.push(record(
                u,
                i,
                &config.behaviors[k_count - 1],
                base + t as u64,
            ));
        }
        for k in (0..k_count - 1).rev() {
            for _ in 0..config.extras_per_behavior {
                let item = if rng.random::<f64>() < config.noise {
                    rng.random_range(0..config.items)
                } else {
                    *own.choose(&mut rng).expect("clusters are non-empty")
                };
                current.insert(item);
            }
            for (t, &i) in current.iter().enumerate() {
                records.push(record(u, i, &config.behaviors[k], (k * 1000 + t) as u64));
            }
        }
    }
    Ok(records)
}

fn record(u: usize, i: usize, behavior: &str, timestamp: u64) -> InteractionRecord {
    InteractionRecord::new(&format!("u{u}"), &format!("i{i}"), behavior, timestamp)
}

pub fn generate(config: &SyntheticConfig) -> Result<Dataset> {
    build_dataset(&generate_records(config)?, &config.behaviors)
}
