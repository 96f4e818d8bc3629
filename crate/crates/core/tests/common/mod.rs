#![allow(dead_code)]

use mbhgcn::model::{forward, InteractionCounts};
use mbhgcn::training::{total_loss, RegScope, Triple};
use mbhgcn::{Dataset, GraphSet, ModelParams, Variant};
use rand::Rng;

/// Random dataset with every user holding at least one target edge so
/// triples can be formed. Holdouts are left empty.
pub fn random_dataset<R: Rng>(
    rng: &mut R,
    users: usize,
    items: usize,
    behaviors: usize,
    density: f64,
) -> Dataset {
    let mut edges = vec![Vec::new(); behaviors];
    for (k, list) in edges.iter_mut().enumerate() {
        for u in 0..users {
            for i in 0..items {
                if rng.random::<f64>() < density {
                    list.push((u, i));
                }
            }
            if k == behaviors - 1 && !list.iter().any(|&(v, _)| v == u) {
                list.push((u, rng.random_range(0..items)));
            }
        }
    }
    let mut ds = Dataset {
        behaviors: (0..behaviors).map(|k| format!("b{k}")).collect(),
        user_ids: (0..users).map(|u| format!("u{u}")).collect(),
        item_ids: (0..items).map(|i| format!("i{i}")).collect(),
        edges,
        item_counts: Vec::new(),
        valid: vec![None; users],
        test: vec![None; users],
    };
    ds.recompute_item_counts();
    ds
}

/// Random `(user, positive, negative)` triples per behavior; negatives are
/// any other item.
pub fn random_batches<R: Rng>(rng: &mut R, ds: &Dataset, size: usize) -> Vec<Vec<Triple>> {
    ds.edges
        .iter()
        .map(|edges| {
            if edges.is_empty() {
                return Vec::new();
            }
            (0..size)
                .map(|_| {
                    let (user, pos) = edges[rng.random_range(0..edges.len())];
                    let mut neg = rng.random_range(0..ds.num_items());
                    while neg == pos {
                        neg = rng.random_range(0..ds.num_items());
                    }
                    Triple { user, pos, neg }
                })
                .collect()
        })
        .collect()
}

pub fn loss_of(
    params: &ModelParams,
    graphs: &GraphSet,
    counts: &InteractionCounts,
    variant: &Variant,
    batches: &[Vec<Triple>],
    beta: f64,
    scope: RegScope,
) -> f64 {
    let trace = forward(params, graphs, counts, variant, None);
    total_loss(&trace, batches, params, beta, scope).total
}

/// `|a - b| / max(|a|, |b|, floor)`
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
