//! Slow, literal reference implementations used to cross-check the
//! optimized paths. Nothing here shares code with [`crate::graph`] or
//! [`crate::eval`].

use std::collections::{BTreeMap, BTreeSet};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::GraphSet;
use crate::model::{forward, InteractionCounts, ModelParams};
use crate::training::Gradients;

/// Largest `M + N` accepted by the dense oracles.
pub const DENSE_LIMIT: usize = 200;

/// Largest item count accepted by [`brute_rank`].
pub const RANK_LIMIT: usize = 1000;

/// Dense `(M+N)²` adjacency with entry `1/√(|N_u|·|N_i|)` at `(u, M+i)` and
/// `(M+i, u)` for every distinct edge.
pub fn dense_adjacency(
    num_users: usize,
    num_items: usize,
    edges: &[(usize, usize)],
) -> Result<Vec<Vec<f64>>> {
    let size = num_users + num_items;
    if size > DENSE_LIMIT {
        return Err(Error::SizeLimitExceeded {
            size,
            limit: DENSE_LIMIT,
        });
    }
    let distinct: BTreeSet<(usize, usize)> = edges.iter().copied().collect();
    let mut user_deg = vec![0usize; num_users];
    let mut item_deg = vec![0usize; num_items];
    for &(u, i) in &distinct {
        user_deg[u] += 1;
        item_deg[i] += 1;
    }
    let mut adj = vec![vec![0.0; size]; size];
    for &(u, i) in &distinct {
        let c = 1.0 / ((user_deg[u] * item_deg[i]) as f64).sqrt();
        adj[u][num_users + i] = c;
        adj[num_users + i][u] = c;
    }
    Ok(adj)
}

/// Layers `0..=layers` of `adj · x` as nested row vectors.
pub fn dense_propagate(adj: &[Vec<f64>], input: &[Vec<f64>], layers: usize) -> Vec<Vec<Vec<f64>>> {
    let mut out = vec![input.to_vec()];
    for _ in 0..layers {
        let prev = out.last().unwrap();
        let cols = prev.first().map_or(0, Vec::len);
        let mut next = vec![vec![0.0; cols]; adj.len()];
        for (r, row) in adj.iter().enumerate() {
            for (s, &a) in row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for c in 0..cols {
                    next[r][c] += a * prev[s][c];
                }
            }
        }
        out.push(next);
    }
    out
}

/// `e = e⁰ + Σ_{l≥1} e^l / ((l+1)·‖e^l‖)` per row, over dense propagation.
pub fn dense_lightgcn(adj: &[Vec<f64>], input: &[Vec<f64>], layers: usize) -> Vec<Vec<f64>> {
    let all = dense_propagate(adj, input, layers);
    let mut out = all[0].clone();
    for (l, layer) in all.iter().enumerate().skip(1) {
        for (row, acc) in layer.iter().zip(out.iter_mut()) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            for (a, x) in acc.iter_mut().zip(row) {
                *a += x / norm / (l as f64 + 1.0);
            }
        }
    }
    out
}

/// Central differences `(f(θ+h) − f(θ−h)) / 2h` for every coordinate.
pub fn finite_diff<F>(mut f: F, theta: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut point = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            point[i] = theta[i] + step;
            let plus = f(&point);
            point[i] = theta[i] - step;
            let minus = f(&point);
            point[i] = theta[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Central-difference gradient of `loss` with respect to `P`, `Q` and `w`.
pub fn finite_diff_grad<F>(loss: F, params: &ModelParams, step: f64) -> Gradients
where
    F: Fn(&ModelParams) -> f64,
{
    let mut probe = params.clone();
    let mut grads = Gradients::zeros_like(params);
    let nudge = |probe: &mut ModelParams, get: &dyn Fn(&mut ModelParams) -> &mut f64| -> f64 {
        let orig = *get(probe);
        *get(probe) = orig + step;
        let plus = loss(probe);
        *get(probe) = orig - step;
        let minus = loss(probe);
        *get(probe) = orig;
        (plus - minus) / (2.0 * step)
    };
    for idx in 0..params.user_emb.as_slice().len() {
        grads.user_emb.as_mut_slice()[idx] =
            nudge(&mut probe, &|p| &mut p.user_emb.as_mut_slice()[idx]);
    }
    for idx in 0..params.item_emb.as_slice().len() {
        grads.item_emb.as_mut_slice()[idx] =
            nudge(&mut probe, &|p| &mut p.item_emb.as_mut_slice()[idx]);
    }
    for k in 0..params.behavior_weights.len() {
        grads.behavior_weights[k] = nudge(&mut probe, &|p| &mut p.behavior_weights[k]);
    }
    grads
}

/// Rank of each test user's held-out item, found by sorting all candidate
/// scores (target training items removed) with ties placed ahead of it.
pub fn brute_rank(params: &ModelParams, dataset: &Dataset) -> Result<BTreeMap<usize, usize>> {
    let n = dataset.num_items();
    if n > RANK_LIMIT {
        return Err(Error::SizeLimitExceeded {
            size: n,
            limit: RANK_LIMIT,
        });
    }
    let graphs = GraphSet::build(dataset);
    let counts = InteractionCounts::from_dataset(dataset);
    let trace = forward(params, &graphs, &counts, &params.variant, None);
    let target = dataset.target();
    let mut trained: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); dataset.num_users()];
    for &(u, i) in &dataset.edges[target] {
        trained[u].insert(i);
    }
    let mut ranks = BTreeMap::new();
    for (u, test) in dataset.test.iter().enumerate() {
        let Some(test) = *test else { continue };
        let mut candidates: Vec<(f64, bool)> = (0..n)
            .filter(|i| !trained[u].contains(i))
            .map(|i| (trace.score(target, u, i), i == test))
            .collect();
        // Descending score; on equal scores the held-out item goes last.
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let pos = candidates
            .iter()
            .position(|c| c.1)
            .expect("test item is a candidate");
        ranks.insert(u, pos + 1);
    }
    Ok(ranks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let g = finite_diff(|t| t.iter().map(|x| x * x).sum(), &[1.0, 2.0], 1e-5);
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_gradient_is_zero() {
        let g = finite_diff(|_| 3.5, &[1.0, -1.0, 0.0], 1e-5);
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn edgeless_dense_layers_vanish() {
        let adj = dense_adjacency(2, 3, &[]).unwrap();
        let input = vec![vec![1.0, 2.0]; 5];
        let layers = dense_propagate(&adj, &input, 2);
        assert!(layers[1]
            .iter()
            .chain(&layers[2])
            .flatten()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn single_edge_swaps() {
        let adj = dense_adjacency(1, 1, &[(0, 0)]).unwrap();
        let layers = dense_propagate(&adj, &[vec![1.0, 0.0], vec![0.0, 3.0]], 1);
        assert_eq!(layers[1], vec![vec![0.0, 3.0], vec![1.0, 0.0]]);
    }

    #[test]
    fn oversized_graphs_are_refused() {
        assert!(matches!(
            dense_adjacency(150, 51, &[]),
            Err(Error::SizeLimitExceeded {
                size: 201,
                limit: 200
            })
        ));
    }
}
