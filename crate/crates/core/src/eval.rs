//! Leave-one-out ranking evaluation.
//!
//! Each evaluated user's held-out item is ranked against every item the user
//! has not interacted with in the target behavior's training data. Ties are
//! counted against the held-out item.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::Dataset;
use crate::graph::GraphSet;
use crate::matrix::dot;
use crate::model::{forward, InteractionCounts, ModelParams};

/// Default cut-offs.
pub const DEFAULT_KS: [usize; 3] = [10, 20, 50];

/// 1-based rank of `test_item` among the non-excluded items, counting every
/// candidate whose score is at least the test item's score as above it.
/// `exclude` must be sorted.
pub fn rank_test_item(scores: &[f64], test_item: usize, exclude: &[usize]) -> usize {
    let target = scores[test_item];
    let above = scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != test_item && s >= target && exclude.binary_search(&j).is_err())
        .count();
    1 + above
}

pub fn hr_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

pub fn ndcg_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let gain: f64 = ranks
        .iter()
        .filter(|&&r| r <= k)
        .map(|&r| 1.0 / ((r + 1) as f64).log2())
        .sum();
    gain / ranks.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    /// Rank of the held-out item per evaluated user.
    pub per_user_rank: BTreeMap<usize, usize>,
    pub num_evaluated: usize,
}

impl EvalReport {
    pub fn from_ranks(per_user_rank: BTreeMap<usize, usize>, ks: &[usize]) -> Self {
        let ranks: Vec<usize> = per_user_rank.values().copied().collect();
        let mut ks = ks.to_vec();
        ks.sort_unstable();
        ks.dedup();
        EvalReport {
            hr: ks.iter().map(|&k| (k, hr_at_k(&ranks, k))).collect(),
            ndcg: ks.iter().map(|&k| (k, ndcg_at_k(&ranks, k))).collect(),
            ks,
            num_evaluated: ranks.len(),
            per_user_rank,
        }
    }

    /// `metric,K,value` lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,K,value\n");
        for k in &self.ks {
            let _ = writeln!(out, "HR,{k},{}", self.hr[k]);
        }
        for k in &self.ks {
            let _ = writeln!(out, "NDCG,{k},{}", self.ndcg[k]);
        }
        out
    }

    /// Aligned text table, one column per K.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<8}", "metric");
        for k in &self.ks {
            let _ = write!(out, "{:>10}", format!("@{k}"));
        }
        out.push('\n');
        for (name, values) in [("HR", &self.hr), ("NDCG", &self.ndcg)] {
            let _ = write!(out, "{name:<8}");
            for k in &self.ks {
                let _ = write!(out, "{:>10.4}", values[k]);
            }
            out.push('\n');
        }
        let _ = writeln!(out, "users evaluated: {}", self.num_evaluated);
        out
    }
}

/// Which held-out item is ranked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Holdout {
    Valid,
    Test,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Also drop the user's auxiliary-behavior training items from the
    /// candidate list.
    pub exclude_auxiliary: bool,
}

/// Sorted excluded items per user.
pub fn excluded_items(dataset: &Dataset, options: &EvalOptions) -> Vec<Vec<usize>> {
    let target = dataset.target();
    let mut lists = dataset.user_items(target);
    if options.exclude_auxiliary {
        for k in 0..target {
            for (list, aux) in lists.iter_mut().zip(dataset.user_items(k)) {
                list.extend(aux);
            }
        }
        for list in &mut lists {
            list.sort_unstable();
            list.dedup();
        }
    }
    lists
}

/// Ranks the held-out item of each selected user (all users with one when
/// `users` is `None`) using dropout-free target-task scores.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_with(
    params: &ModelParams,
    graphs: &GraphSet,
    counts: &InteractionCounts,
    dataset: &Dataset,
    holdout: Holdout,
    ks: &[usize],
    options: &EvalOptions,
    users: Option<&[usize]>,
) -> EvalReport {
    let held = match holdout {
        Holdout::Valid => &dataset.valid,
        Holdout::Test => &dataset.test,
    };
    let selected: Vec<usize> = match users {
        Some(list) => list
            .iter()
            .copied()
            .filter(|&u| held[u].is_some())
            .collect(),
        None => (0..dataset.num_users())
            .filter(|&u| held[u].is_some())
            .collect(),
    };
    if selected.is_empty() {
        return EvalReport::from_ranks(BTreeMap::new(), ks);
    }
    let trace = forward(params, graphs, counts, &params.variant, None);
    let target = dataset.target();
    let exclude = excluded_items(dataset, options);
    let users_emb = &trace.user_final[target];
    let items = &trace.item_final;
    let n = dataset.num_items();
    let ranks: Vec<(usize, usize)> = selected
        .par_iter()
        .map(|&u| {
            let eu = users_emb.row(u);
            let scores: Vec<f64> = (0..n).map(|i| dot(eu, items.row(i))).collect();
            let item = held[u].expect("selected users have a held-out item");
            (u, rank_test_item(&scores, item, &exclude[u]))
        })
        .collect();
    EvalReport::from_ranks(ranks.into_iter().collect(), ks)
}

/// Test-split evaluation over every test user.
pub fn evaluate(params: &ModelParams, dataset: &Dataset, ks: &[usize]) -> EvalReport {
    evaluate_split(params, dataset, Holdout::Test, ks, &EvalOptions::default())
}

pub fn evaluate_split(
    params: &ModelParams,
    dataset: &Dataset,
    holdout: Holdout,
    ks: &[usize],
    options: &EvalOptions,
) -> EvalReport {
    let graphs = GraphSet::build(dataset);
    let counts = InteractionCounts::from_dataset(dataset);
    evaluate_with(
        params, &graphs, &counts, dataset, holdout, ks, options, None,
    )
}

/// Test-split evaluation restricted to `cold_users`.
pub fn evaluate_cold_start(
    params: &ModelParams,
    cold_users: &[usize],
    dataset: &Dataset,
    ks: &[usize],
) -> EvalReport {
    let graphs = GraphSet::build(dataset);
    let counts = InteractionCounts::from_dataset(dataset);
    evaluate_with(
        params,
        &graphs,
        &counts,
        dataset,
        Holdout::Test,
        ks,
        &EvalOptions::default(),
        Some(cold_users),
    )
}
