//! Parameters and forward pass of the hierarchical multi-behavior GCN.
//!
//! The forward pass runs in four stages:
//!
//! 1. **Global embeddings**: LightGCN-style propagation of the initial
//!    tables over the unified graph, combined as
//!    `e = e⁽⁰⁾ + Σ_{l≥1} α_l · e⁽ˡ⁾ / ‖e⁽ˡ⁾‖₂` with `α_l = 1 / (l + 1)`.
//! 2. **Behavior embeddings**: the same propagation and combination on each
//!    behavior graph, seeded with the global embeddings.
//! 3. **Aggregation**: per task `k`, a user's K behavior embeddings are mixed
//!    with softmax weights `δ = softmax(e_uᵏ·U / √d)`; an item's behavior
//!    embeddings are mixed with `γ_ik = w_k n_ik / Σ_m w_m n_im`.
//! 4. **Fusion**: aggregated embeddings plus global embeddings; scores are
//!    inner products.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{GraphSet, NormalizedGraph};
use crate::matrix::{axpy, dot, l2_norm, Matrix};

/// Standard deviation of the initial embedding entries.
pub const INIT_STD: f64 = 0.1;

/// Denominators of the item weights below this magnitude trigger the
/// documented fallback.
pub const GAMMA_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum UserAggregation {
    /// Plain sum of the behavior embeddings.
    Sum,
    /// Weights proportional to the user's interaction counts per behavior.
    Linear,
    /// Parameter-free softmax similarity weighting.
    #[default]
    Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ItemWeighting {
    /// `γ_ik = 1` for every behavior.
    Fixed,
    /// `γ_ik ∝ n_ik`, i.e. all `w_k` pinned to 1.
    CountsOnly,
    /// `γ_ik ∝ w_k n_ik` with learnable `w`.
    #[default]
    Learnable,
}

/// Which behavior embedding queries the softmax in adaptive aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DeltaQuery {
    /// The task's own behavior embedding.
    #[default]
    Task,
    /// Always the target behavior embedding.
    Target,
}

/// Ablation switches. `Variant::default()` is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub use_unified: bool,
    pub user_agg: UserAggregation,
    pub item_weighting: ItemWeighting,
    pub fuse_global: bool,
    pub multi_task: bool,
    pub delta_query: DeltaQuery,
}

impl Default for Variant {
    fn default() -> Self {
        Variant {
            use_unified: true,
            user_agg: UserAggregation::Adaptive,
            item_weighting: ItemWeighting::Learnable,
            fuse_global: true,
            multi_task: true,
            delta_query: DeltaQuery::Task,
        }
    }
}

impl std::str::FromStr for UserAggregation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "sum" => Ok(Self::Sum),
            "linear" => Ok(Self::Linear),
            "adaptive" => Ok(Self::Adaptive),
            _ => Err(format!("expected sum|linear|adaptive, got `{s}`")),
        }
    }
}

impl std::str::FromStr for ItemWeighting {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "fixed1" | "fixed" => Ok(Self::Fixed),
            "counts_only" | "counts" => Ok(Self::CountsOnly),
            "learnable" => Ok(Self::Learnable),
            _ => Err(format!("expected fixed1|counts_only|learnable, got `{s}`")),
        }
    }
}

impl std::str::FromStr for DeltaQuery {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "task" => Ok(Self::Task),
            "target" => Ok(Self::Target),
            _ => Err(format!("expected task|target, got `{s}`")),
        }
    }
}

impl std::fmt::Display for UserAggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::Linear => "linear",
            Self::Adaptive => "adaptive",
        })
    }
}

impl std::fmt::Display for ItemWeighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fixed => "fixed1",
            Self::CountsOnly => "counts_only",
            Self::Learnable => "learnable",
        })
    }
}

impl std::fmt::Display for DeltaQuery {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Task => "task",
            Self::Target => "target",
        })
    }
}

/// Layer weights `α_l = 1 / (l + 1)` for `l = 0..=layers`.
pub fn layer_weights(layers: usize) -> Vec<f64> {
    (0..=layers).map(|l| 1.0 / (l as f64 + 1.0)).collect()
}

/// Trainable state: user table `P` (M×d), item table `Q` (N×d) and one
/// item-behavior weight per behavior.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub user_emb: Matrix,
    pub item_emb: Matrix,
    pub behavior_weights: Vec<f64>,
    pub layers: usize,
    /// Ablation variant the parameters were trained for.
    pub variant: Variant,
}

impl ModelParams {
    /// Seeded initialization: embedding entries from `N(0, 0.1²)`, weights 1.
    pub fn init(
        num_users: usize,
        num_items: usize,
        num_behaviors: usize,
        dim: usize,
        layers: usize,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("dim", "must be at least 1"));
        }
        if layers == 0 {
            return Err(Error::config("layers", "must be at least 1"));
        }
        if num_behaviors == 0 {
            return Err(Error::config("behaviors", "must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let user_emb = Matrix::random_normal(num_users, dim, INIT_STD, &mut rng);
        let item_emb = Matrix::random_normal(num_items, dim, INIT_STD, &mut rng);
        Ok(ModelParams {
            user_emb,
            item_emb,
            behavior_weights: vec![1.0; num_behaviors],
            layers,
            variant: Variant::default(),
        })
    }

    pub fn dim(&self) -> usize {
        self.user_emb.cols()
    }

    pub fn num_users(&self) -> usize {
        self.user_emb.rows()
    }

    pub fn num_items(&self) -> usize {
        self.item_emb.rows()
    }

    pub fn num_behaviors(&self) -> usize {
        self.behavior_weights.len()
    }

    pub fn alpha(&self) -> Vec<f64> {
        layer_weights(self.layers)
    }

    pub fn is_finite(&self) -> bool {
        self.user_emb.is_finite()
            && self.item_emb.is_finite()
            && self.behavior_weights.iter().all(|w| w.is_finite())
    }

    /// `[P; Q]` as one `(M + N) × d` matrix.
    pub fn stacked(&self) -> Matrix {
        stack(&self.user_emb, &self.item_emb)
    }

    pub fn check_compatible(&self, dataset: &Dataset) -> Result<()> {
        let expect = (
            dataset.num_users(),
            dataset.num_items(),
            dataset.num_behaviors(),
        );
        let got = (self.num_users(), self.num_items(), self.num_behaviors());
        if expect != got {
            return Err(Error::Mismatch(format!(
                "model has (users, items, behaviors) = {got:?}, dataset has {expect:?}"
            )));
        }
        Ok(())
    }
}

pub fn stack(users: &Matrix, items: &Matrix) -> Matrix {
    assert_eq!(users.cols(), items.cols());
    let mut data = Vec::with_capacity((users.rows() + items.rows()) * users.cols());
    data.extend_from_slice(users.as_slice());
    data.extend_from_slice(items.as_slice());
    Matrix::from_vec(users.rows() + items.rows(), users.cols(), data)
}

pub fn split(stacked: &Matrix, num_users: usize) -> (Matrix, Matrix) {
    let d = stacked.cols();
    let (u, i) = stacked.as_slice().split_at(num_users * d);
    (
        Matrix::from_vec(num_users, d, u.to_vec()),
        Matrix::from_vec(stacked.rows() - num_users, d, i.to_vec()),
    )
}

/// Layers `0..=layers` of repeated propagation; layer 0 is `input` itself.
pub fn propagate(graph: &NormalizedGraph, input: &Matrix, layers: usize) -> Vec<Matrix> {
    let mut out = Vec::with_capacity(layers + 1);
    out.push(input.clone());
    for l in 1..=layers {
        let next = graph.propagate(&out[l - 1]);
        out.push(next);
    }
    out
}

/// `row = layer0 + Σ_{l≥1} alpha[l] · layer_l / ‖layer_l‖₂`; zero-norm rows
/// contribute nothing at that layer.
pub fn combine_layers(layers: &[Matrix], alpha: &[f64]) -> Matrix {
    combine_with_norms(layers, alpha).0
}

fn combine_with_norms(layers: &[Matrix], alpha: &[f64]) -> (Matrix, Vec<Vec<f64>>) {
    assert!(!layers.is_empty(), "layer 0 is required");
    assert!(alpha.len() >= layers.len(), "one alpha per layer");
    let mut combined = layers[0].clone();
    let mut norms = vec![Vec::new()];
    for (l, layer) in layers.iter().enumerate().skip(1) {
        let mut layer_norms = Vec::with_capacity(layer.rows());
        for r in 0..layer.rows() {
            let row = layer.row(r);
            let norm = l2_norm(row);
            if norm > 0.0 {
                axpy(alpha[l] / norm, row, combined.row_mut(r));
            }
            layer_norms.push(norm);
        }
        norms.push(layer_norms);
    }
    (combined, norms)
}

/// Row-level message dropout applied to every propagated layer.
pub struct MessageDropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl MessageDropout<'_> {
    /// Per-row factors: 0 with probability `rate`, otherwise `1/(1-rate)`.
    fn sample_mask(&mut self, rows: usize) -> Vec<f64> {
        let keep_scale = 1.0 / (1.0 - self.rate);
        (0..rows)
            .map(|_| {
                if self.rng.random::<f64>() < self.rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect()
    }
}

/// Intermediate values of one graph's propagation.
#[derive(Clone, Debug)]
pub struct Propagation {
    /// Layers `0..=L`; layers ≥ 1 are post-dropout.
    pub layers: Vec<Matrix>,
    /// Message-dropout row factors per layer (`None` for layer 0 or when
    /// dropout is off).
    pub masks: Vec<Option<Vec<f64>>>,
    /// Row norms per layer (empty for layer 0).
    pub norms: Vec<Vec<f64>>,
    pub combined: Matrix,
}

fn run_propagation(
    graph: &NormalizedGraph,
    input: Matrix,
    alpha: &[f64],
    layers: usize,
    dropout: &mut Option<MessageDropout<'_>>,
) -> Propagation {
    let mut out = Vec::with_capacity(layers + 1);
    let mut masks = Vec::with_capacity(layers + 1);
    out.push(input);
    masks.push(None);
    for l in 1..=layers {
        let mut next = graph.propagate(&out[l - 1]);
        let mask = dropout
            .as_mut()
            .filter(|d| d.rate > 0.0)
            .map(|d| d.sample_mask(next.rows()));
        if let Some(mask) = &mask {
            for (r, &f) in mask.iter().enumerate() {
                next.row_mut(r).iter_mut().for_each(|x| *x *= f);
            }
        }
        out.push(next);
        masks.push(mask);
    }
    let (combined, norms) = combine_with_norms(&out, alpha);
    Propagation {
        layers: out,
        masks,
        norms,
        combined,
    }
}

/// Global user and item embeddings on the unified graph.
pub fn global_embeddings(params: &ModelParams, unified: &NormalizedGraph) -> (Matrix, Matrix) {
    let layers = propagate(unified, &params.stacked(), params.layers);
    split(
        &combine_layers(&layers, &params.alpha()),
        params.num_users(),
    )
}

/// Behavior-specific stacked embeddings, each seeded with `global`.
pub fn behavior_embeddings(
    global: &Matrix,
    behavior_graphs: &[NormalizedGraph],
    layers: usize,
) -> Vec<Matrix> {
    let alpha = layer_weights(layers);
    behavior_graphs
        .iter()
        .map(|g| combine_layers(&propagate(g, global, layers), &alpha))
        .collect()
}

/// Softmax-similarity aggregation of one user's behavior embeddings.
/// Returns the aggregated vector and the weights `δ`.
pub fn user_adaptive_aggregate(behavior_vectors: &[&[f64]], query: usize) -> (Vec<f64>, Vec<f64>) {
    let d = behavior_vectors[0].len();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let q = behavior_vectors[query];
    let logits: Vec<f64> = behavior_vectors
        .iter()
        .map(|v| dot(q, v) * inv_sqrt_d)
        .collect();
    let delta = softmax(&logits);
    let mut out = vec![0.0; d];
    for (v, &w) in behavior_vectors.iter().zip(&delta) {
        axpy(w, v, &mut out);
    }
    (out, delta)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Item weights `γ_k = w_k n_k / Σ_m w_m n_m`.
///
/// Returns the weights and the denominator, or `None` in place of the
/// denominator when the fallback fired: uniform over behaviors with
/// `n_k > 0`, or uniform over all behaviors for an item without any
/// interaction.
pub fn item_gamma(counts: &[u32], weights: &[f64]) -> (Vec<f64>, Option<f64>) {
    let denom: f64 = counts
        .iter()
        .zip(weights)
        .map(|(&n, &w)| w * n as f64)
        .sum();
    if denom.abs() >= GAMMA_EPS {
        let gamma = counts
            .iter()
            .zip(weights)
            .map(|(&n, &w)| w * n as f64 / denom)
            .collect();
        return (gamma, Some(denom));
    }
    let active = counts.iter().filter(|&&n| n > 0).count();
    let gamma = if active > 0 {
        counts
            .iter()
            .map(|&n| if n > 0 { 1.0 / active as f64 } else { 0.0 })
            .collect()
    } else {
        vec![1.0 / counts.len() as f64; counts.len()]
    };
    (gamma, None)
}

/// Count-weighted aggregation of one item's behavior embeddings.
pub fn item_weighted_aggregate(
    behavior_vectors: &[&[f64]],
    counts: &[u32],
    weights: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (gamma, _) = item_gamma(counts, weights);
    let mut out = vec![0.0; behavior_vectors[0].len()];
    for (v, &g) in behavior_vectors.iter().zip(&gamma) {
        axpy(g, v, &mut out);
    }
    (out, gamma)
}

pub fn fuse_global(aggregated: &[f64], global: &[f64]) -> Vec<f64> {
    aggregated.iter().zip(global).map(|(a, g)| a + g).collect()
}

pub fn score(user: &[f64], item: &[f64]) -> f64 {
    dot(user, item)
}

/// Per-entity interaction counts consumed by the aggregation stage.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionCounts {
    /// `item[i][k]`
    pub item: Vec<Vec<u32>>,
    /// `user[u][k]`, used by linear user aggregation.
    pub user: Vec<Vec<u32>>,
}

impl InteractionCounts {
    pub fn from_dataset(dataset: &Dataset) -> Self {
        InteractionCounts {
            item: dataset.item_counts.clone(),
            user: dataset.user_counts(),
        }
    }
}

/// Every intermediate of a forward pass, as needed by the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub variant: Variant,
    pub num_users: usize,
    pub num_behaviors: usize,
    /// Propagation on the unified graph (absent without the unified stage).
    pub global: Option<Propagation>,
    /// Stacked global embeddings `e^g` (the raw tables without the unified stage).
    pub global_emb: Matrix,
    /// Per-behavior propagation; `behaviors[k].combined` holds `e^k`.
    pub behaviors: Vec<Propagation>,
    /// `user_weights[(u * K + task) * K + j]`: weight of behavior `j` in
    /// task `task` for user `u` (δ for adaptive aggregation).
    pub user_weights: Vec<f64>,
    /// Aggregated user embeddings per task, each M×d.
    pub user_agg: Vec<Matrix>,
    /// `item_gamma[i * K + k]`
    pub item_gamma: Vec<f64>,
    /// Denominator of `γ` per item, `None` where the fallback fired.
    pub item_gamma_denom: Vec<Option<f64>>,
    pub item_agg: Matrix,
    /// Final user embeddings per task, each M×d.
    pub user_final: Vec<Matrix>,
    pub item_final: Matrix,
}

impl ForwardTrace {
    pub fn delta(&self, user: usize, task: usize) -> &[f64] {
        let k = self.num_behaviors;
        let start = (user * k + task) * k;
        &self.user_weights[start..start + k]
    }

    pub fn gamma(&self, item: usize) -> &[f64] {
        let k = self.num_behaviors;
        &self.item_gamma[item * k..(item + 1) * k]
    }

    pub fn score(&self, task: usize, user: usize, item: usize) -> f64 {
        dot(self.user_final[task].row(user), self.item_final.row(item))
    }

    pub fn global_user(&self, u: usize) -> &[f64] {
        self.global_emb.row(u)
    }

    pub fn behavior_user(&self, k: usize, u: usize) -> &[f64] {
        self.behaviors[k].combined.row(u)
    }
}

/// Runs the full pipeline. With `dropout` set, message dropout masks are
/// drawn in the order: unified layers 1..L, then each behavior's layers.
pub fn forward(
    params: &ModelParams,
    graphs: &GraphSet,
    counts: &InteractionCounts,
    variant: &Variant,
    dropout: Option<MessageDropout<'_>>,
) -> ForwardTrace {
    let m = params.num_users();
    let n = params.num_items();
    let k_count = params.num_behaviors();
    let d = params.dim();
    let layers = params.layers;
    let alpha = params.alpha();
    let mut dropout = dropout;
    assert_eq!(graphs.behaviors.len(), k_count, "one graph per behavior");

    let input = params.stacked();
    let (global, global_emb) = if variant.use_unified {
        let prop = run_propagation(&graphs.unified, input, &alpha, layers, &mut dropout);
        let emb = prop.combined.clone();
        (Some(prop), emb)
    } else {
        (None, input)
    };

    let behaviors: Vec<Propagation> = graphs
        .behaviors
        .iter()
        .map(|g| run_propagation(g, global_emb.clone(), &alpha, layers, &mut dropout))
        .collect();

    // User aggregation, per task.
    let mut user_weights = vec![0.0; m * k_count * k_count];
    let mut user_agg = vec![Matrix::zeros(m, d); k_count];
    let mut vectors: Vec<&[f64]> = Vec::with_capacity(k_count);
    for u in 0..m {
        vectors.clear();
        vectors.extend(behaviors.iter().map(|b| b.combined.row(u)));
        let linear = match variant.user_agg {
            UserAggregation::Linear => Some(linear_user_weights(&counts.user[u])),
            _ => None,
        };
        for task in 0..k_count {
            let weights: Vec<f64> = match variant.user_agg {
                UserAggregation::Adaptive => {
                    let query = match variant.delta_query {
                        DeltaQuery::Task => task,
                        DeltaQuery::Target => k_count - 1,
                    };
                    user_adaptive_aggregate(&vectors, query).1
                }
                UserAggregation::Sum => vec![1.0; k_count],
                UserAggregation::Linear => linear.clone().unwrap_or_default(),
            };
            let row = user_agg[task].row_mut(u);
            for (v, &w) in vectors.iter().zip(&weights) {
                axpy(w, v, row);
            }
            let start = (u * k_count + task) * k_count;
            user_weights[start..start + k_count].copy_from_slice(&weights);
        }
    }

    // Item aggregation.
    let mut item_gamma = vec![0.0; n * k_count];
    let mut item_gamma_denom = vec![None; n];
    let mut item_agg = Matrix::zeros(n, d);
    let ones = vec![1.0; k_count];
    for i in 0..n {
        let (gamma, denom) = match variant.item_weighting {
            ItemWeighting::Fixed => (vec![1.0; k_count], None),
            ItemWeighting::CountsOnly => self::item_gamma(&counts.item[i], &ones),
            ItemWeighting::Learnable => self::item_gamma(&counts.item[i], &params.behavior_weights),
        };
        let row = item_agg.row_mut(i);
        for (b, &g) in behaviors.iter().zip(&gamma) {
            axpy(g, b.combined.row(m + i), row);
        }
        item_gamma[i * k_count..(i + 1) * k_count].copy_from_slice(&gamma);
        item_gamma_denom[i] = denom;
    }

    // Fusion.
    let mut user_final = user_agg.clone();
    let mut item_final = item_agg.clone();
    if variant.fuse_global {
        for fin in &mut user_final {
            for u in 0..m {
                axpy(1.0, global_emb.row(u), fin.row_mut(u));
            }
        }
        for i in 0..n {
            axpy(1.0, global_emb.row(m + i), item_final.row_mut(i));
        }
    }

    ForwardTrace {
        variant: *variant,
        num_users: m,
        num_behaviors: k_count,
        global,
        global_emb,
        behaviors,
        user_weights,
        user_agg,
        item_gamma,
        item_gamma_denom,
        item_agg,
        user_final,
        item_final,
    }
}

/// Count-proportional user weights; uniform when the user has no training
/// interactions at all.
pub fn linear_user_weights(counts: &[u32]) -> Vec<f64> {
    let total: u32 = counts.iter().sum();
    if total == 0 {
        return vec![1.0 / counts.len() as f64; counts.len()];
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn alpha_is_harmonic() {
        assert_eq!(layer_weights(3), vec![1.0, 0.5, 1.0 / 3.0, 0.25]);
    }

    #[test]
    fn single_edge_propagation_copies_neighbor() {
        let g = NormalizedGraph::from_edges(1, 1, [(0, 0)]);
        let input = Matrix::from_rows(&[vec![1.0, 2.0], vec![7.0, -3.0]]);
        let layers = propagate(&g, &input, 1);
        assert_eq!(layers[1].row(0), &[7.0, -3.0]);
        assert_eq!(layers[1].row(1), &[1.0, 2.0]);
    }

    #[test]
    fn two_neighbor_propagation_is_scaled_sum() {
        let g = NormalizedGraph::from_edges(1, 2, [(0, 0), (0, 1)]);
        let input = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![5.0]]);
        let layers = propagate(&g, &input, 1);
        assert!(close(layers[1].row(0)[0], 6.0 / 2f64.sqrt(), 1e-15));
    }

    #[test]
    fn combine_unit_normalizes_then_scales() {
        let layers = [
            Matrix::from_rows(&[vec![0.0, 0.0]]),
            Matrix::from_rows(&[vec![3.0, 4.0]]),
        ];
        let out = combine_layers(&layers, &layer_weights(1));
        assert!(close(out.row(0)[0], 0.3, 1e-15));
        assert!(close(out.row(0)[1], 0.4, 1e-15));
    }

    #[test]
    fn combine_ignores_zero_layers() {
        let layers = [
            Matrix::from_rows(&[vec![1.5, -2.0]]),
            Matrix::zeros(1, 2),
            Matrix::zeros(1, 2),
        ];
        assert_eq!(
            combine_layers(&layers, &layer_weights(2)).row(0),
            &[1.5, -2.0]
        );
    }

    #[test]
    fn combine_two_layers_by_hand() {
        // (1,0) + (1/2)(0,1) + (1/3)(1,0) = (4/3, 1/2)
        let layers = [
            Matrix::from_rows(&[vec![1.0, 0.0]]),
            Matrix::from_rows(&[vec![0.0, 2.0]]),
            Matrix::from_rows(&[vec![2.0, 0.0]]),
        ];
        let out = combine_layers(&layers, &layer_weights(2));
        assert!(close(out.row(0)[0], 4.0 / 3.0, 1e-15));
        assert!(close(out.row(0)[1], 0.5, 1e-15));
    }

    #[test]
    fn edgeless_graph_leaves_global_embeddings_at_init() {
        let params = ModelParams::init(3, 2, 1, 4, 2, 5).unwrap();
        let g = NormalizedGraph::from_edges(3, 2, std::iter::empty());
        let (u, i) = global_embeddings(&params, &g);
        assert_eq!(u, params.user_emb);
        assert_eq!(i, params.item_emb);
    }

    #[test]
    fn edgeless_behavior_embedding_equals_global() {
        let params = ModelParams::init(2, 2, 1, 3, 2, 1).unwrap();
        let g = NormalizedGraph::from_edges(2, 2, std::iter::empty());
        let global = params.stacked();
        assert_eq!(behavior_embeddings(&global, &[g], 2)[0], global);
    }

    #[test]
    fn zero_layers_are_rejected() {
        assert!(matches!(
            ModelParams::init(1, 1, 1, 4, 0, 0),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            ModelParams::init(1, 1, 1, 0, 2, 0),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn identical_behavior_vectors_give_uniform_delta() {
        let v = [0.3, -1.2, 0.7];
        let vectors: Vec<&[f64]> = vec![&v, &v, &v];
        let (out, delta) = user_adaptive_aggregate(&vectors, 1);
        for w in &delta {
            assert!(close(*w, 1.0 / 3.0, 1e-12));
        }
        for (a, b) in out.iter().zip(&v) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn scalar_two_behavior_softmax() {
        // δ = softmax(1, 3) computed independently as 1/(1+e^{±2}).
        let expect0 = 1.0 / (1.0 + 2f64.exp());
        let expect1 = 1.0 / (1.0 + (-2f64).exp());
        let (a, b) = ([1.0], [3.0]);
        let (out, delta) = user_adaptive_aggregate(&[&a, &b], 0);
        assert!(close(delta[0], expect0, 1e-12));
        assert!(close(delta[1], expect1, 1e-12));
        assert!(close(delta[0], 0.1192, 1e-4) && close(delta[1], 0.8808, 1e-4));
        assert!(close(out[0], expect0 + 3.0 * expect1, 1e-12));
        assert!(close(out[0], 2.7616, 1e-4));
    }

    #[test]
    fn equal_scores_give_uniform_delta() {
        // The query (1,1) has the same dot product with (1,0) and (0,1).
        let (a, b, query) = ([1.0, 0.0], [0.0, 1.0], [1.0, 1.0]);
        let (_, delta) = user_adaptive_aggregate(&[&a, &b, &query], 2);
        assert_eq!(delta[0], delta[1]);
    }

    #[test]
    fn gamma_follows_counts() {
        let (gamma, denom) = item_gamma(&[3, 1], &[1.0, 1.0]);
        assert_eq!(gamma, vec![0.75, 0.25]);
        assert_eq!(denom, Some(4.0));
        let (gamma, _) = item_gamma(&[5, 5, 5], &[1.0, 1.0, 1.0]);
        assert!(gamma.iter().all(|&g| close(g, 1.0 / 3.0, 1e-15)));
    }

    #[test]
    fn gamma_fallbacks() {
        let (gamma, denom) = item_gamma(&[0, 0], &[1.0, 1.0]);
        assert_eq!((gamma, denom), (vec![0.5, 0.5], None));
        let (gamma, denom) = item_gamma(&[2, 2, 0], &[1.0, -1.0, 1.0]);
        assert_eq!((gamma, denom), (vec![0.5, 0.5, 0.0], None));
    }

    #[test]
    fn item_aggregate_without_interactions_is_mean() {
        let (a, b) = ([2.0, 0.0], [0.0, 4.0]);
        let (out, _) = item_weighted_aggregate(&[&a, &b], &[0, 0], &[1.0, 1.0]);
        assert_eq!(out, vec![1.0, 2.0]);
    }

    #[test]
    fn fusion_and_score() {
        assert_eq!(fuse_global(&[0.0, 0.0], &[1.0, 2.0]), vec![1.0, 2.0]);
        assert_eq!(fuse_global(&[1.0, 2.0], &[3.0, -1.0]), vec![4.0, 1.0]);
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(score(&[1.0, 2.0], &[3.0, 4.0]), 11.0);
        assert_eq!(score(&[0.6, 0.8], &[0.6, 0.8]), 1.0);
    }

    fn edgeless_setup(k: usize) -> (ModelParams, GraphSet, InteractionCounts) {
        let params = ModelParams::init(3, 4, k, 5, 2, 11).unwrap();
        let empty = NormalizedGraph::from_edges(3, 4, std::iter::empty());
        let graphs = GraphSet {
            unified: empty.clone(),
            behaviors: vec![empty; k],
        };
        let counts = InteractionCounts {
            item: vec![vec![0; k]; 4],
            user: vec![vec![0; k]; 3],
        };
        (params, graphs, counts)
    }

    #[test]
    fn full_variant_on_edgeless_graphs_doubles_init() {
        let (params, graphs, counts) = edgeless_setup(3);
        let trace = forward(&params, &graphs, &counts, &Variant::default(), None);
        for task in 0..3 {
            for u in 0..3 {
                for (a, b) in trace.user_final[task]
                    .row(u)
                    .iter()
                    .zip(params.user_emb.row(u))
                {
                    assert!(close(*a, 2.0 * b, 1e-14));
                }
            }
        }
        for i in 0..4 {
            for (a, b) in trace.item_final.row(i).iter().zip(params.item_emb.row(i)) {
                assert!(close(*a, 2.0 * b, 1e-14));
            }
        }
    }

    #[test]
    fn sum_variant_adds_behavior_embeddings() {
        let (params, graphs, counts) = edgeless_setup(2);
        let variant = Variant {
            user_agg: UserAggregation::Sum,
            fuse_global: false,
            ..Variant::default()
        };
        let trace = forward(&params, &graphs, &counts, &variant, None);
        for (a, b) in trace.user_agg[0].row(1).iter().zip(params.user_emb.row(1)) {
            assert!(close(*a, 2.0 * b, 1e-14));
        }
    }

    #[test]
    fn no_unified_seeds_behaviors_with_raw_tables() {
        let params = ModelParams::init(2, 2, 2, 3, 1, 3).unwrap();
        let g = NormalizedGraph::from_edges(2, 2, [(0, 0), (1, 1), (0, 1)]);
        let graphs = GraphSet {
            unified: g.clone(),
            behaviors: vec![g.clone(), g],
        };
        let counts = InteractionCounts {
            item: vec![vec![1, 1]; 2],
            user: vec![vec![1, 1]; 2],
        };
        let variant = Variant {
            use_unified: false,
            ..Variant::default()
        };
        let trace = forward(&params, &graphs, &counts, &variant, None);
        assert!(trace.global.is_none());
        assert_eq!(trace.global_emb, params.stacked());
        assert_eq!(trace.behaviors[0].layers[0], params.stacked());
    }

    #[test]
    fn message_dropout_masks_are_recorded() {
        let params = ModelParams::init(4, 4, 1, 2, 2, 3).unwrap();
        let g = NormalizedGraph::from_edges(4, 4, (0..4).map(|i| (i, i)));
        let graphs = GraphSet {
            unified: g.clone(),
            behaviors: vec![g],
        };
        let counts = InteractionCounts {
            item: vec![vec![1]; 4],
            user: vec![vec![1]; 4],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let trace = forward(
            &params,
            &graphs,
            &counts,
            &Variant::default(),
            Some(MessageDropout {
                rate: 0.5,
                rng: &mut rng,
            }),
        );
        let mask = trace.behaviors[0].masks[1].as_ref().unwrap();
        assert!(mask.iter().all(|&f| f == 0.0 || f == 2.0));
        for (r, &f) in mask.iter().enumerate() {
            if f == 0.0 {
                assert!(trace.behaviors[0].layers[1]
                    .row(r)
                    .iter()
                    .all(|&x| x == 0.0));
            }
        }
    }
}
