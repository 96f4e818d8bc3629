//! Symmetrically normalized user–item bipartite graphs.
//!
//! Nodes are laid out users first (`0..M`) then items (`M..M+N`) whenever an
//! embedding matrix covers both sides.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matrix::{axpy, Matrix};

/// Compressed bipartite adjacency stored in both directions, with the
/// per-edge coefficient `1 / sqrt(|N_u| * |N_i|)`.
///
/// A graph produced by [`NormalizedGraph::node_dropout`] keeps the degrees
/// and coefficients of its parent and carries a `message_scale` of
/// `1 / (1 - rate)` applied to every surviving message.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedGraph {
    num_users: usize,
    num_items: usize,
    user_ptr: Vec<usize>,
    user_adj: Vec<usize>,
    user_coeff: Vec<f64>,
    item_ptr: Vec<usize>,
    item_adj: Vec<usize>,
    item_coeff: Vec<f64>,
    user_degree: Vec<usize>,
    item_degree: Vec<usize>,
    message_scale: f64,
}

impl NormalizedGraph {
    /// Builds a graph from an edge list; duplicate pairs collapse to one edge.
    pub fn from_edges<I>(num_users: usize, num_items: usize, edges: I) -> Self
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut pairs: Vec<(usize, usize)> = edges.into_iter().collect();
        pairs.sort_unstable();
        pairs.dedup();

        let mut user_degree = vec![0usize; num_users];
        let mut item_degree = vec![0usize; num_items];
        for &(u, i) in &pairs {
            user_degree[u] += 1;
            item_degree[i] += 1;
        }
        Self::assemble(num_users, num_items, pairs, user_degree, item_degree, 1.0)
    }

    /// `pairs` must be sorted by `(user, item)` and free of duplicates.
    fn assemble(
        num_users: usize,
        num_items: usize,
        pairs: Vec<(usize, usize)>,
        user_degree: Vec<usize>,
        item_degree: Vec<usize>,
        message_scale: f64,
    ) -> Self {
        let coeff = |u: usize, i: usize| 1.0 / ((user_degree[u] * item_degree[i]) as f64).sqrt();

        let mut user_ptr = vec![0usize; num_users + 1];
        for &(u, _) in &pairs {
            user_ptr[u + 1] += 1;
        }
        for u in 0..num_users {
            user_ptr[u + 1] += user_ptr[u];
        }
        let user_adj: Vec<usize> = pairs.iter().map(|&(_, i)| i).collect();
        let user_coeff: Vec<f64> = pairs.iter().map(|&(u, i)| coeff(u, i)).collect();

        let mut by_item = pairs;
        by_item.sort_unstable_by_key(|&(u, i)| (i, u));
        let mut item_ptr = vec![0usize; num_items + 1];
        for &(_, i) in &by_item {
            item_ptr[i + 1] += 1;
        }
        for i in 0..num_items {
            item_ptr[i + 1] += item_ptr[i];
        }
        let item_adj: Vec<usize> = by_item.iter().map(|&(u, _)| u).collect();
        let item_coeff: Vec<f64> = by_item.iter().map(|&(u, i)| coeff(u, i)).collect();

        NormalizedGraph {
            num_users,
            num_items,
            user_ptr,
            user_adj,
            user_coeff,
            item_ptr,
            item_adj,
            item_coeff,
            user_degree,
            item_degree,
            message_scale,
        }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn num_edges(&self) -> usize {
        self.user_adj.len()
    }

    pub fn user_degree(&self, u: usize) -> usize {
        self.user_degree[u]
    }

    pub fn item_degree(&self, i: usize) -> usize {
        self.item_degree[i]
    }

    pub fn message_scale(&self) -> f64 {
        self.message_scale
    }

    /// Items adjacent to user `u`, ascending, with their coefficients.
    pub fn user_neighbors(&self, u: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.user_ptr[u]..self.user_ptr[u + 1];
        self.user_adj[range.clone()]
            .iter()
            .copied()
            .zip(self.user_coeff[range].iter().copied())
    }

    /// Users adjacent to item `i`, ascending, with their coefficients.
    pub fn item_neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.item_ptr[i]..self.item_ptr[i + 1];
        self.item_adj[range.clone()]
            .iter()
            .copied()
            .zip(self.item_coeff[range].iter().copied())
    }

    /// All edges as `(user, item, coefficient)`, sorted by user then item.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.num_users).flat_map(move |u| self.user_neighbors(u).map(move |(i, c)| (u, i, c)))
    }

    pub fn coeff(&self, u: usize, i: usize) -> Option<f64> {
        let range = self.user_ptr[u]..self.user_ptr[u + 1];
        self.user_adj[range.clone()]
            .binary_search(&i)
            .ok()
            .map(|pos| self.user_coeff[range.start + pos])
    }

    /// One propagation step over the stacked `(M + N) × d` embedding matrix:
    /// every user row becomes the coefficient-weighted sum of its items' rows
    /// and vice versa. Isolated nodes map to zero rows.
    ///
    /// The operator is symmetric, so it also serves as its own adjoint.
    pub fn propagate(&self, input: &Matrix) -> Matrix {
        assert_eq!(
            input.rows(),
            self.num_nodes(),
            "embedding rows must cover users and items"
        );
        let d = input.cols();
        let mut out = Matrix::zeros(self.num_nodes(), d);
        if d == 0 {
            return out;
        }
        let m = self.num_users;
        let scale = self.message_scale;
        let (users_out, items_out) = out.as_mut_slice().split_at_mut(m * d);
        users_out
            .par_chunks_mut(d)
            .enumerate()
            .for_each(|(u, row)| {
                for (i, c) in self.user_neighbors(u) {
                    axpy(c * scale, input.row(m + i), row);
                }
            });
        items_out
            .par_chunks_mut(d)
            .enumerate()
            .for_each(|(i, row)| {
                for (u, c) in self.item_neighbors(i) {
                    axpy(c * scale, input.row(u), row);
                }
            });
        out
    }

    /// Drops every node independently with probability `rate`.
    ///
    /// Random stream: `ChaCha8Rng::seed_from_u64(seed)`, one `f64` draw in
    /// `[0, 1)` per node in order users `0..M` then items `0..N`; a node is
    /// dropped when its draw is `< rate`. Edges touching a dropped node are
    /// removed; the remaining edges keep their original coefficients and the
    /// message scale is multiplied by `1 / (1 - rate)`.
    pub fn node_dropout(&self, rate: f64, seed: u64) -> Result<NormalizedGraph> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidRate(rate));
        }
        if rate == 0.0 {
            return Ok(self.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep: Vec<bool> = (0..self.num_nodes())
            .map(|_| rng.random::<f64>() >= rate)
            .collect();
        let m = self.num_users;
        let pairs: Vec<(usize, usize)> = self
            .edges()
            .filter(|&(u, i, _)| keep[u] && keep[m + i])
            .map(|(u, i, _)| (u, i))
            .collect();
        Ok(Self::assemble(
            self.num_users,
            self.num_items,
            pairs,
            self.user_degree.clone(),
            self.item_degree.clone(),
            self.message_scale / (1.0 - rate),
        ))
    }

    /// Debug dump: one `u i coeff` line per edge.
    pub fn dump_edges<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (u, i, c) in self.edges() {
            writeln!(out, "{u} {i} {c}")?;
        }
        Ok(())
    }
}

/// Graph of the training interactions of behavior `k` alone.
pub fn build_behavior_graph(dataset: &Dataset, k: usize) -> NormalizedGraph {
    NormalizedGraph::from_edges(
        dataset.num_users(),
        dataset.num_items(),
        dataset.edges[k].iter().copied(),
    )
}

/// Homogeneous graph over the union of all behaviors' training edges.
pub fn build_unified_graph(dataset: &Dataset) -> NormalizedGraph {
    NormalizedGraph::from_edges(
        dataset.num_users(),
        dataset.num_items(),
        dataset.edges.iter().flatten().copied(),
    )
}

/// The unified graph plus one graph per behavior.
#[derive(Clone, Debug)]
pub struct GraphSet {
    pub unified: NormalizedGraph,
    pub behaviors: Vec<NormalizedGraph>,
}

impl GraphSet {
    pub fn build(dataset: &Dataset) -> Self {
        GraphSet {
            unified: build_unified_graph(dataset),
            behaviors: (0..dataset.num_behaviors())
                .map(|k| build_behavior_graph(dataset, k))
                .collect(),
        }
    }

    /// Applies node dropout to every graph with independent per-graph seeds
    /// derived from `seed`.
    pub fn node_dropout(&self, rate: f64, seed: u64) -> Result<GraphSet> {
        let unified = self.unified.node_dropout(rate, seed)?;
        let behaviors = self
            .behaviors
            .iter()
            .enumerate()
            .map(|(k, g)| g.node_dropout(rate, seed.wrapping_add(k as u64 + 1)))
            .collect::<Result<_>>()?;
        Ok(GraphSet { unified, behaviors })
    }
}
