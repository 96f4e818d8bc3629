//! Multi-task BPR training.
//!
//! Each behavior is a task with its own mini-batch of `(user, positive,
//! negative)` triples; the joint objective is the unweighted sum of the
//! per-task mean BPR losses plus `beta · ‖Θ‖₂²`. Gradients are derived by
//! hand: the backward pass mirrors [`crate::model::forward`] stage by stage
//! and reuses the symmetric propagation operator as its own adjoint.

use std::borrow::Cow;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate_with, EvalOptions, Holdout};
use crate::graph::{GraphSet, NormalizedGraph};
use crate::matrix::{axpy, dot, Matrix};
use crate::model::{
    forward, DeltaQuery, ForwardTrace, InteractionCounts, ItemWeighting, MessageDropout,
    ModelParams, Propagation, UserAggregation, Variant,
};

/// Adam decay rates and stabilizer.
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// How many triples each task receives per step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TaskSchedule {
    /// Every task draws `batch_size` positives per step.
    #[default]
    Equal,
    /// Task `k` draws `batch_size · |E_k| / |E_target|` positives (at least 1).
    Proportional,
}

/// Which parameters the L2 penalty covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RegScope {
    /// All of `P`, `Q` and `w`.
    #[default]
    Full,
    /// Rows of `P`/`Q` touched by the batch (per occurrence, divided by the
    /// batch length) plus `w`.
    Batch,
}

impl std::str::FromStr for TaskSchedule {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "equal" => Ok(Self::Equal),
            "proportional" => Ok(Self::Proportional),
            _ => Err(format!("expected equal|proportional, got `{s}`")),
        }
    }
}

impl std::str::FromStr for RegScope {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "full" => Ok(Self::Full),
            "batch" => Ok(Self::Batch),
            _ => Err(format!("expected full|batch, got `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub layers: usize,
    pub learning_rate: f64,
    /// L2 coefficient.
    pub beta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub node_dropout: f64,
    pub message_dropout: f64,
    pub seed: u64,
    pub negatives_per_positive: usize,
    pub task_schedule: TaskSchedule,
    pub reg_scope: RegScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 64,
            layers: 2,
            learning_rate: 1e-3,
            beta: 1e-4,
            batch_size: 1024,
            epochs: 100,
            patience: 10,
            node_dropout: 0.1,
            message_dropout: 0.1,
            seed: 2023,
            negatives_per_positive: 1,
            task_schedule: TaskSchedule::Equal,
            reg_scope: RegScope::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be a positive number"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.dim == 0 {
            return Err(Error::config("dim", "must be at least 1"));
        }
        if self.layers == 0 {
            return Err(Error::config("layers", "must be at least 1"));
        }
        if self.negatives_per_positive == 0 {
            return Err(Error::config("negatives", "must be at least 1"));
        }
        for (field, rate) in [
            ("node_dropout", self.node_dropout),
            ("message_dropout", self.message_dropout),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// Adjoints of every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub user_emb: Matrix,
    pub item_emb: Matrix,
    pub behavior_weights: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            user_emb: Matrix::zeros(params.num_users(), params.dim()),
            item_emb: Matrix::zeros(params.num_items(), params.dim()),
            behavior_weights: vec![0.0; params.num_behaviors()],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.user_emb.is_finite()
            && self.item_emb.is_finite()
            && self.behavior_weights.iter().all(|g| g.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triple {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

/// Uniform positive sampling with rejection-sampled negatives.
#[derive(Clone, Debug)]
pub struct Sampler {
    num_items: usize,
    edges: Vec<Vec<(usize, usize)>>,
    /// `user_items[k][u]`, sorted.
    user_items: Vec<Vec<Vec<usize>>>,
}

impl Sampler {
    pub fn new(dataset: &Dataset) -> Self {
        Sampler {
            num_items: dataset.num_items(),
            edges: dataset.edges.clone(),
            user_items: (0..dataset.num_behaviors())
                .map(|k| dataset.user_items(k))
                .collect(),
        }
    }

    pub fn num_edges(&self, k: usize) -> usize {
        self.edges[k].len()
    }

    /// A uniformly random item the user has not interacted with in `k`.
    pub fn negative<R: Rng + ?Sized>(&self, k: usize, user: usize, rng: &mut R) -> Result<usize> {
        let seen = &self.user_items[k][user];
        if seen.len() >= self.num_items {
            return Err(Error::NoNegativesAvailable { user, behavior: k });
        }
        loop {
            let j = rng.random_range(0..self.num_items);
            if seen.binary_search(&j).is_err() {
                return Ok(j);
            }
        }
    }

    /// Draws `batch_size` positives uniformly from `edges[k]`, each paired
    /// with `negatives` negatives. Positives whose user has interacted with
    /// every item are skipped with a warning.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        k: usize,
        batch_size: usize,
        negatives: usize,
        rng: &mut R,
    ) -> Vec<Triple> {
        let edges = &self.edges[k];
        if edges.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(batch_size * negatives);
        for _ in 0..batch_size {
            let (user, pos) = edges[rng.random_range(0..edges.len())];
            for _ in 0..negatives {
                match self.negative(k, user, rng) {
                    Ok(neg) => out.push(Triple { user, pos, neg }),
                    Err(err) => {
                        log::warn!("skipping positive: {err}");
                        break;
                    }
                }
            }
        }
        out
    }
}

/// `-ln σ(pos - neg)`, evaluated as `softplus(neg - pos)`.
pub fn bpr_loss(pos_score: f64, neg_score: f64) -> f64 {
    softplus(neg_score - pos_score)
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean BPR loss per task, 0 for tasks without a batch.
    pub per_task: Vec<f64>,
    pub regularization: f64,
}

fn weights_trainable(variant: &Variant) -> bool {
    variant.item_weighting == ItemWeighting::Learnable
}

fn regularization(params: &ModelParams, batches: &[Vec<Triple>], reg_scope: RegScope) -> f64 {
    let w_term = if weights_trainable(&params.variant) {
        params.behavior_weights.iter().map(|w| w * w).sum()
    } else {
        0.0
    };
    let emb_term = match reg_scope {
        RegScope::Full => params.user_emb.squared_norm() + params.item_emb.squared_norm(),
        RegScope::Batch => batches
            .iter()
            .filter(|b| !b.is_empty())
            .map(|batch| {
                let sq = |row: &[f64]| dot(row, row);
                let sum: f64 = batch
                    .iter()
                    .map(|t| {
                        sq(params.user_emb.row(t.user))
                            + sq(params.item_emb.row(t.pos))
                            + sq(params.item_emb.row(t.neg))
                    })
                    .sum();
                sum / batch.len() as f64
            })
            .sum(),
    };
    emb_term + w_term
}

/// Sum over tasks (in behavior order) of the mean batch BPR loss, plus
/// `beta` times the squared L2 norm selected by `reg_scope`.
pub fn total_loss(
    trace: &ForwardTrace,
    batches: &[Vec<Triple>],
    params: &ModelParams,
    beta: f64,
    reg_scope: RegScope,
) -> LossBreakdown {
    let per_task: Vec<f64> = batches
        .iter()
        .enumerate()
        .map(|(task, batch)| {
            if batch.is_empty() {
                return 0.0;
            }
            let sum: f64 = batch
                .iter()
                .map(|t| {
                    bpr_loss(
                        trace.score(task, t.user, t.pos),
                        trace.score(task, t.user, t.neg),
                    )
                })
                .sum();
            sum / batch.len() as f64
        })
        .collect();
    let regularization = beta * regularization(params, batches, reg_scope);
    let mut total = 0.0;
    for loss in &per_task {
        total += loss;
    }
    total += regularization;
    LossBreakdown {
        total,
        per_task,
        regularization,
    }
}

/// Exact gradients of [`total_loss`] with respect to `P`, `Q` and `w`.
///
/// `graphs` must be the (possibly node-dropped) graphs used to produce
/// `trace`; message-dropout masks are read from the trace.
pub fn backward(
    trace: &ForwardTrace,
    graphs: &GraphSet,
    counts: &InteractionCounts,
    batches: &[Vec<Triple>],
    params: &ModelParams,
    beta: f64,
    reg_scope: RegScope,
) -> Gradients {
    let variant = &trace.variant;
    let m = params.num_users();
    let n = params.num_items();
    let k_count = params.num_behaviors();
    let d = params.dim();
    let alpha = params.alpha();

    // Scores → final embeddings.
    let mut d_user_final = vec![Matrix::zeros(m, d); k_count];
    let mut d_item_final = Matrix::zeros(n, d);
    for (task, batch) in batches.iter().enumerate() {
        if batch.is_empty() {
            continue;
        }
        let inv_len = 1.0 / batch.len() as f64;
        let users = &trace.user_final[task];
        for t in batch {
            let eu = users.row(t.user);
            let ei = trace.item_final.row(t.pos);
            let ej = trace.item_final.row(t.neg);
            let margin = dot(eu, ei) - dot(eu, ej);
            // d loss / d margin
            let g = -inv_len * sigmoid(-margin);
            let du = d_user_final[task].row_mut(t.user);
            axpy(g, ei, du);
            axpy(-g, ej, du);
            axpy(g, eu, d_item_final.row_mut(t.pos));
            axpy(-g, eu, d_item_final.row_mut(t.neg));
        }
    }

    // Fusion: the global embeddings receive every final adjoint.
    let mut d_global = Matrix::zeros(m + n, d);
    if variant.fuse_global {
        for du in &d_user_final {
            for u in 0..m {
                axpy(1.0, du.row(u), d_global.row_mut(u));
            }
        }
        for i in 0..n {
            axpy(1.0, d_item_final.row(i), d_global.row_mut(m + i));
        }
    }

    // Aggregation → behavior embeddings.
    let mut d_behavior = vec![Matrix::zeros(m + n, d); k_count];
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut d_delta = vec![0.0; k_count];
    for (task, du_all) in d_user_final.iter().enumerate() {
        for u in 0..m {
            let g = du_all.row(u);
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let weights = trace.delta(u, task);
            for (j, &w) in weights.iter().enumerate() {
                axpy(w, g, d_behavior[j].row_mut(u));
            }
            if variant.user_agg != UserAggregation::Adaptive {
                continue;
            }
            // Softmax backward: ds_j = δ_j (dδ_j - Σ_m δ_m dδ_m), then the
            // logits s_j = <e_q, e_j>/√d feed both e_q and e_j.
            let query = match variant.delta_query {
                DeltaQuery::Task => task,
                DeltaQuery::Target => k_count - 1,
            };
            for (j, dd) in d_delta.iter_mut().enumerate() {
                *dd = dot(g, trace.behavior_user(j, u));
            }
            let mean: f64 = weights.iter().zip(&d_delta).map(|(w, dd)| w * dd).sum();
            for j in 0..k_count {
                let ds = weights[j] * (d_delta[j] - mean) * inv_sqrt_d;
                if ds == 0.0 {
                    continue;
                }
                axpy(ds, trace.behavior_user(query, u), d_behavior[j].row_mut(u));
                axpy(ds, trace.behavior_user(j, u), d_behavior[query].row_mut(u));
            }
        }
    }

    let mut d_weights = vec![0.0; k_count];
    let mut d_gamma = vec![0.0; k_count];
    for i in 0..n {
        let g = d_item_final.row(i);
        if g.iter().all(|&x| x == 0.0) {
            continue;
        }
        let gamma = trace.gamma(i);
        for (k, &w) in gamma.iter().enumerate() {
            axpy(w, g, d_behavior[k].row_mut(m + i));
        }
        if !weights_trainable(variant) {
            continue;
        }
        if let Some(denom) = trace.item_gamma_denom[i] {
            // γ_k = w_k n_k / S  ⇒  ∂L/∂w_m = n_m / S · (dγ_m − Σ_k γ_k dγ_k)
            for (k, dg) in d_gamma.iter_mut().enumerate() {
                *dg = dot(g, trace.behaviors[k].combined.row(m + i));
            }
            let mean: f64 = gamma.iter().zip(&d_gamma).map(|(a, b)| a * b).sum();
            for (k, dw) in d_weights.iter_mut().enumerate() {
                let n_ik = counts.item[i][k] as f64;
                *dw += n_ik / denom * (d_gamma[k] - mean);
            }
        }
    }

    // Behavior propagations → their shared input.
    for (k, (prop, graph)) in trace.behaviors.iter().zip(&graphs.behaviors).enumerate() {
        let d_input = propagation_backward(prop, graph, &d_behavior[k], &alpha);
        d_global.add_scaled(&d_input, 1.0);
    }

    let d_stacked = match &trace.global {
        Some(prop) => propagation_backward(prop, &graphs.unified, &d_global, &alpha),
        None => d_global,
    };
    let (mut d_user, mut d_item) = crate::model::split(&d_stacked, m);

    // Regularization.
    if beta > 0.0 {
        match reg_scope {
            RegScope::Full => {
                d_user.add_scaled(&params.user_emb, 2.0 * beta);
                d_item.add_scaled(&params.item_emb, 2.0 * beta);
            }
            RegScope::Batch => {
                for batch in batches.iter().filter(|b| !b.is_empty()) {
                    let c = 2.0 * beta / batch.len() as f64;
                    for t in batch {
                        axpy(c, params.user_emb.row(t.user), d_user.row_mut(t.user));
                        axpy(c, params.item_emb.row(t.pos), d_item.row_mut(t.pos));
                        axpy(c, params.item_emb.row(t.neg), d_item.row_mut(t.neg));
                    }
                }
            }
        }
        if weights_trainable(variant) {
            for (dw, w) in d_weights.iter_mut().zip(&params.behavior_weights) {
                *dw += 2.0 * beta * w;
            }
        }
    }

    Gradients {
        user_emb: d_user,
        item_emb: d_item,
        behavior_weights: d_weights,
    }
}

/// Back-propagates an adjoint of `prop.combined` to the layer-0 input.
fn propagation_backward(
    prop: &Propagation,
    graph: &NormalizedGraph,
    d_combined: &Matrix,
    alpha: &[f64],
) -> Matrix {
    let top = prop.layers.len() - 1;
    // Adjoint of each layer through its L2-normalized term:
    // z = y/‖y‖  ⇒  dy = (dz − z (z·dz)) / ‖y‖.
    let normalized_adjoint = |l: usize| -> Matrix {
        let layer = &prop.layers[l];
        let mut out = Matrix::zeros(layer.rows(), layer.cols());
        for r in 0..layer.rows() {
            let norm = prop.norms[l][r];
            if norm == 0.0 {
                continue;
            }
            let y = layer.row(r);
            let dz = d_combined.row(r);
            let proj = dot(y, dz) / norm;
            let row = out.row_mut(r);
            for ((o, &yv), &dzv) in row.iter_mut().zip(y).zip(dz) {
                *o = alpha[l] * (dzv - yv / norm * proj) / norm;
            }
        }
        out
    };

    let mut acc = normalized_adjoint(top);
    for l in (1..=top).rev() {
        // layer_l = mask_l ⊙ (A · layer_{l-1})
        if let Some(mask) = &prop.masks[l] {
            for (r, &f) in mask.iter().enumerate() {
                acc.row_mut(r).iter_mut().for_each(|x| *x *= f);
            }
        }
        let mut prev = graph.propagate(&acc);
        if l > 1 {
            prev.add_scaled(&normalized_adjoint(l - 1), 1.0);
        } else {
            prev.add_scaled(d_combined, 1.0);
        }
        acc = prev;
    }
    acc
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m_user: Vec<f64>,
    v_user: Vec<f64>,
    m_item: Vec<f64>,
    v_item: Vec<f64>,
    m_w: Vec<f64>,
    v_w: Vec<f64>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let nu = params.user_emb.as_slice().len();
        let ni = params.item_emb.as_slice().len();
        let nw = params.behavior_weights.len();
        AdamState {
            step: 0,
            m_user: vec![0.0; nu],
            v_user: vec![0.0; nu],
            m_item: vec![0.0; ni],
            v_item: vec![0.0; ni],
            m_w: vec![0.0; nw],
            v_w: vec![0.0; nw],
        }
    }
}

/// One bias-corrected Adam update over a flat parameter slice.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    step: u64,
) {
    let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
    for (((p, &g), mi), vi) in params
        .iter_mut()
        .zip(grads)
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut AdamState, lr: f64) {
    state.step += 1;
    let t = state.step;
    adam_update(
        params.user_emb.as_mut_slice(),
        grads.user_emb.as_slice(),
        &mut state.m_user,
        &mut state.v_user,
        lr,
        t,
    );
    adam_update(
        params.item_emb.as_mut_slice(),
        grads.item_emb.as_slice(),
        &mut state.m_item,
        &mut state.v_item,
        lr,
        t,
    );
    if weights_trainable(&params.variant) {
        adam_update(
            &mut params.behavior_weights,
            &grads.behavior_weights,
            &mut state.m_w,
            &mut state.v_w,
            lr,
            t,
        );
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total_loss: f64,
    pub per_task: Vec<f64>,
    pub val_hr10: f64,
    pub val_ndcg10: f64,
    pub elapsed_ms: u128,
}

impl EpochRecord {
    /// `epoch,total_loss,<per-task losses>,val_HR@10,val_NDCG@10,elapsed_ms`
    pub fn csv_line(&self) -> String {
        let mut fields = vec![self.epoch.to_string(), self.total_loss.to_string()];
        fields.extend(self.per_task.iter().map(f64::to_string));
        fields.push(self.val_hr10.to_string());
        fields.push(self.val_ndcg10.to_string());
        fields.push(self.elapsed_ms.to_string());
        fields.join(",")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned (0 = initial parameters).
    pub best_epoch: usize,
    pub best_val_hr10: f64,
}

impl TrainLog {
    pub fn csv_header(behaviors: &[String]) -> String {
        let mut fields = vec!["epoch".to_owned(), "total_loss".to_owned()];
        fields.extend(behaviors.iter().map(|b| format!("loss_{b}")));
        fields.extend(["val_HR@10", "val_NDCG@10", "elapsed_ms"].map(str::to_owned));
        fields.join(",")
    }

    pub fn to_csv(&self, behaviors: &[String]) -> String {
        let mut out = Self::csv_header(behaviors);
        out.push('\n');
        for record in &self.epochs {
            out.push_str(&record.csv_line());
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Stalled,
    Stop,
}

/// Patience-based stopping on a metric where larger is better. Only strict
/// improvements count, so ties keep the earlier epoch.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> Progress {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            Progress::Improved
        } else if epoch - self.best_epoch >= self.patience {
            Progress::Stop
        } else {
            Progress::Stalled
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Everything needed to run forward passes on one dataset.
#[derive(Clone, Debug)]
pub struct TrainingContext {
    pub graphs: GraphSet,
    pub counts: InteractionCounts,
    pub sampler: Sampler,
}

impl TrainingContext {
    pub fn new(dataset: &Dataset) -> Self {
        TrainingContext {
            graphs: GraphSet::build(dataset),
            counts: InteractionCounts::from_dataset(dataset),
            sampler: Sampler::new(dataset),
        }
    }
}

/// Trains from a seeded initialization and returns the parameters of the
/// best validation HR@10 epoch.
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    variant: &Variant,
) -> Result<(ModelParams, TrainLog)> {
    train_with(dataset, config, variant, |_| {})
}

/// Like [`train`], invoking `on_epoch` after every epoch.
pub fn train_with<F>(
    dataset: &Dataset,
    config: &TrainConfig,
    variant: &Variant,
    mut on_epoch: F,
) -> Result<(ModelParams, TrainLog)>
where
    F: FnMut(&EpochRecord),
{
    config.validate()?;
    let target = dataset.target();
    if dataset.edges[target].is_empty() {
        return Err(Error::EmptyTargetBehavior(
            dataset.behaviors[target].clone(),
        ));
    }
    let mut params = ModelParams::init(
        dataset.num_users(),
        dataset.num_items(),
        dataset.num_behaviors(),
        config.dim,
        config.layers,
        config.seed,
    )?;
    params.variant = *variant;
    let mut log = TrainLog::default();
    if config.epochs == 0 {
        return Ok((params, log));
    }

    let ctx = TrainingContext::new(dataset);
    let k_count = dataset.num_behaviors();
    let tasks: Vec<usize> = if variant.multi_task {
        (0..k_count).collect()
    } else {
        vec![target]
    };
    let target_edges = ctx.sampler.num_edges(target);
    let steps = target_edges.div_ceil(config.batch_size);
    let task_batch = |k: usize| -> usize {
        match config.task_schedule {
            TaskSchedule::Equal => config.batch_size,
            TaskSchedule::Proportional => {
                let scaled = config.batch_size as f64 * ctx.sampler.num_edges(k) as f64
                    / target_edges as f64;
                (scaled.round() as usize).max(1)
            }
        }
    };
    let has_validation = !dataset.valid_users().is_empty();
    if !has_validation {
        log::warn!("dataset has no validation users; early stopping disabled");
    }

    let mut rng =
        ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5eed);
    let mut adam = AdamState::new(&params);
    let mut best = params.clone();
    let mut stopper = EarlyStopping::new(config.patience);
    let start = Instant::now();

    for epoch in 1..=config.epochs {
        let graphs: Cow<'_, GraphSet> = if config.node_dropout > 0.0 {
            let seed = config
                .seed
                .wrapping_add((epoch as u64).wrapping_mul(1_000_003));
            Cow::Owned(ctx.graphs.node_dropout(config.node_dropout, seed)?)
        } else {
            Cow::Borrowed(&ctx.graphs)
        };

        let mut epoch_total = 0.0;
        let mut epoch_tasks = vec![0.0; k_count];
        for _ in 0..steps {
            let mut batches = vec![Vec::new(); k_count];
            for &k in &tasks {
                batches[k] = ctx.sampler.sample_batch(
                    k,
                    task_batch(k),
                    config.negatives_per_positive,
                    &mut rng,
                );
            }
            let dropout = (config.message_dropout > 0.0).then_some(MessageDropout {
                rate: config.message_dropout,
                rng: &mut rng,
            });
            let trace = forward(&params, &graphs, &ctx.counts, variant, dropout);
            let loss = total_loss(&trace, &batches, &params, config.beta, config.reg_scope);
            let grads = backward(
                &trace,
                &graphs,
                &ctx.counts,
                &batches,
                &params,
                config.beta,
                config.reg_scope,
            );
            adam_step(&mut params, &grads, &mut adam, config.learning_rate);
            epoch_total += loss.total;
            for (acc, l) in epoch_tasks.iter_mut().zip(&loss.per_task) {
                *acc += l;
            }
        }
        let steps_f = steps as f64;
        epoch_tasks.iter_mut().for_each(|l| *l /= steps_f);

        let (val_hr10, val_ndcg10) = if has_validation {
            let report = evaluate_with(
                &params,
                &ctx.graphs,
                &ctx.counts,
                dataset,
                Holdout::Valid,
                &[10],
                &EvalOptions::default(),
                None,
            );
            (report.hr[&10], report.ndcg[&10])
        } else {
            (0.0, 0.0)
        };
        let record = EpochRecord {
            epoch,
            total_loss: epoch_total / steps_f,
            per_task: epoch_tasks,
            val_hr10,
            val_ndcg10,
            elapsed_ms: start.elapsed().as_millis(),
        };
        log::info!("{}", record.csv_line());
        on_epoch(&record);
        log.epochs.push(record);

        if !has_validation {
            best = params.clone();
            log.best_epoch = epoch;
            continue;
        }
        match stopper.observe(epoch, val_hr10) {
            Progress::Improved => {
                best = params.clone();
                log.best_epoch = epoch;
                log.best_val_hr10 = val_hr10;
            }
            Progress::Stalled => {}
            Progress::Stop => {
                log::info!("early stop at epoch {epoch}; best epoch {}", log.best_epoch);
                break;
            }
        }
    }
    Ok((best, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, InteractionRecord};

    #[test]
    fn bpr_reference_values() {
        assert!((bpr_loss(0.3, 0.3) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bpr_loss(40.0, 0.0) < 1e-15);
        assert!(bpr_loss(40.0, 0.0) > 0.0);
        // -ln σ(1) = ln(1 + e^{-1})
        let expect = (1.0 + (-1f64).exp()).ln();
        assert!((bpr_loss(1.0, 0.0) - expect).abs() < 1e-15);
        assert!((bpr_loss(1.0, 0.0) - 0.313262).abs() < 1e-6);
        assert!(bpr_loss(-800.0, 0.0).is_finite());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!((sigmoid(800.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(
            matches!(bad.validate(), Err(Error::Config { ref field, .. }) if field == "learning_rate")
        );
        let bad = TrainConfig {
            message_dropout: 1.0,
            ..TrainConfig::default()
        };
        assert!(
            matches!(bad.validate(), Err(Error::Config { ref field, .. }) if field == "message_dropout")
        );
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    fn tiny_dataset() -> Dataset {
        let r = |u: &str, i: &str, b: &str, t| InteractionRecord::new(u, i, b, t);
        let records = [
            r("u0", "i0", "buy", 1),
            r("u0", "i1", "view", 1),
            r("u1", "i1", "buy", 1),
            r("u1", "i0", "view", 2),
        ];
        build_dataset(&records, &["view".to_string(), "buy".to_string()]).unwrap()
    }

    #[test]
    fn only_remaining_item_is_the_negative() {
        let ds = tiny_dataset();
        let sampler = Sampler::new(&ds);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert_eq!(sampler.negative(1, 0, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn saturated_users_are_skipped() {
        let r = |u: &str, i: &str, t| InteractionRecord::new(u, i, "buy", t);
        let ds = build_dataset(
            &[r("u", "a", 1), r("u", "b", 2), r("v", "a", 3)],
            &["buy".to_string()],
        )
        .unwrap();
        // Item b is held out as u's test item, so u's training set is {a}
        // and v's is {a}; both have negatives. Make u saturated directly.
        let mut sampler = Sampler::new(&ds);
        sampler.user_items[0][0] = vec![0, 1];
        assert!(matches!(
            sampler.negative(0, 0, &mut ChaCha8Rng::seed_from_u64(1)),
            Err(Error::NoNegativesAvailable {
                user: 0,
                behavior: 0
            })
        ));
        let batch = sampler.sample_batch(0, 20, 1, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(batch.iter().all(|t| t.user != 0));
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![1.0, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 0.1, 1);
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_scalar_recurrence() {
        // Independent re-statement of the recurrence for g = 1, lr = 0.01.
        let (lr, b1, b2, eps) = (0.01f64, 0.9f64, 0.999f64, 1e-8f64);
        let mut expect = 0.5f64;
        let (mut m_ref, mut v_ref) = (0.0f64, 0.0f64);
        let mut p = vec![0.5];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        for t in 1..=3u64 {
            m_ref = b1 * m_ref + (1.0 - b1);
            v_ref = b2 * v_ref + (1.0 - b2);
            let mh = m_ref / (1.0 - b1.powi(t as i32));
            let vh = v_ref / (1.0 - b2.powi(t as i32));
            expect -= lr * mh / (vh.sqrt() + eps);
            adam_update(&mut p, &[1.0], &mut m, &mut v, lr, t);
            assert!((p[0] - expect).abs() < 1e-15);
        }
        // With a constant gradient every bias-corrected step is ≈ lr.
        assert!((p[0] - (0.5 - 3.0 * lr)).abs() < 1e-9);
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_lr() {
        let mut p = vec![0.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        let mut last = 0.0;
        for t in 1..=2000u64 {
            let before = p[0];
            adam_update(&mut p, &[3.7], &mut m, &mut v, 0.05, t);
            last = before - p[0];
        }
        assert!((last - 0.05).abs() < 1e-6);
    }

    #[test]
    fn worsening_curve_with_patience_one_stops_after_two_evaluations() {
        let mut stopper = EarlyStopping::new(1);
        let decisions: Vec<Progress> = [0.5, 0.4, 0.3]
            .iter()
            .enumerate()
            .map(|(e, &m)| stopper.observe(e + 1, m))
            .take_while(|p| *p != Progress::Stop)
            .collect();
        assert_eq!(decisions, vec![Progress::Improved]);
        assert_eq!(stopper.best_epoch(), 1);
    }

    #[test]
    fn ties_keep_the_earlier_epoch() {
        let mut stopper = EarlyStopping::new(3);
        assert_eq!(stopper.observe(1, 0.5), Progress::Improved);
        assert_eq!(stopper.observe(2, 0.5), Progress::Stalled);
        assert_eq!(stopper.observe(3, 0.6), Progress::Improved);
        assert_eq!(stopper.observe(6, 0.6), Progress::Stop);
        assert_eq!(stopper.best_epoch(), 3);
    }

    #[test]
    fn zero_epochs_return_initial_params() {
        let ds = tiny_dataset();
        let config = TrainConfig {
            epochs: 0,
            dim: 4,
            ..TrainConfig::default()
        };
        let (params, log) = train(&ds, &config, &Variant::default()).unwrap();
        let init = ModelParams::init(2, 2, 2, 4, 2, config.seed).unwrap();
        assert_eq!(params, init);
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn regularizer_only_gradient() {
        let ds = tiny_dataset();
        let ctx = TrainingContext::new(&ds);
        let params = ModelParams::init(2, 2, 2, 3, 2, 4).unwrap();
        let trace = forward(&params, &ctx.graphs, &ctx.counts, &params.variant, None);
        let batches = vec![Vec::new(), Vec::new()];
        let beta = 0.25;
        let grads = backward(
            &trace,
            &ctx.graphs,
            &ctx.counts,
            &batches,
            &params,
            beta,
            RegScope::Full,
        );
        let mut expect = params.user_emb.clone();
        expect.scale(2.0 * beta);
        assert!(grads.user_emb.max_abs_diff(&expect) < 1e-15);
        let loss = total_loss(&trace, &batches, &params, beta, RegScope::Full);
        assert_eq!(loss.per_task, vec![0.0, 0.0]);
    }
}
