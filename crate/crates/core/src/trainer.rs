//! Neighborhood-aware joint-distribution OT training.
//!
//! Each mini-batch pairs `m` source and `m` target instances. The gamma step
//! solves unbalanced OT on a cost built from the *fixed* sentence embeddings
//! and ground-truth labels, with non-neighbor cells raised to the batch
//! maximum. The model step then holds the plan fixed and descends
//!
//! ```text
//! sum_ij gamma_ij (alpha |g(xs_i) - g(xt_j)|^2 + beta CE(f(g(xs_i)), yt_j))
//!   + theta_s mean_i CE(f(g(xs_i)), ys_i) + theta_t mean_j CE(f(g(xt_j)), yt_j)
//! ```
//!
//! with gradients derived by hand below.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{LabelCost, Method, TrainConfig};
use crate::data::{make_uniform_measure, Dataset, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::eval::f1_hate;
use crate::model::{softmax, Adam, ModelParams};
use crate::neighbors::{
    build_index, compute_neighbors, neighborhood_mask, preselect_sources, NeighborSet, UNIT_NORM_TOL,
};
use crate::ot::{generalized_kl, neg_entropy, sinkhorn_unbalanced, squared_l2_cost, CostMatrix, TransportPlan};

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// `m` source and `m` target instances with their sentence embeddings as rows.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPair {
    pub src_x: Array2<f64>,
    pub src_y: Vec<u8>,
    pub src_ids: Vec<u64>,
    pub tgt_x: Array2<f64>,
    pub tgt_y: Vec<u8>,
    pub tgt_ids: Vec<u64>,
}

fn gather(d: &Dataset, rows: &[usize]) -> (Array2<f64>, Vec<u8>, Vec<u64>) {
    let inst = d.instances();
    let x = Array2::from_shape_fn((rows.len(), d.dim()), |(r, c)| inst[rows[r]].embedding[c]);
    let y = rows.iter().map(|&r| inst[r].label).collect();
    let ids = rows.iter().map(|&r| inst[r].id).collect();
    (x, y, ids)
}

impl BatchPair {
    /// Builds a batch from row positions into `source` and `target`.
    pub fn from_rows(source: &Dataset, src_rows: &[usize], target: &Dataset, tgt_rows: &[usize]) -> Result<Self> {
        if src_rows.len() != tgt_rows.len() {
            return Err(Error::LengthMismatch(src_rows.len(), tgt_rows.len()));
        }
        if source.dim() != target.dim() {
            return Err(Error::Shape("source and target dimensions differ".into()));
        }
        let (src_x, src_y, src_ids) = gather(source, src_rows);
        let (tgt_x, tgt_y, tgt_ids) = gather(target, tgt_rows);
        Ok(BatchPair {
            src_x,
            src_y,
            src_ids,
            tgt_x,
            tgt_y,
            tgt_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.src_y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src_y.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let m = self.src_y.len();
        if m == 0 {
            return Err(Error::InvalidSize("empty batch".into()));
        }
        if self.tgt_y.len() != m
            || self.src_x.nrows() != m
            || self.tgt_x.nrows() != m
            || self.src_ids.len() != m
            || self.tgt_ids.len() != m
        {
            return Err(Error::Shape("batch halves have unequal sizes".into()));
        }
        if self.src_x.ncols() != self.tgt_x.ncols() {
            return Err(Error::Shape("batch halves have different dimensions".into()));
        }
        Ok(())
    }
}

/// Terms of the training objective.
///
/// `total = theta_s * source_ce + theta_t * target_ce + ot_transport + ot_entropy + ot_kl`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean source cross-entropy (unweighted).
    pub source_ce: f64,
    /// Mean target cross-entropy (unweighted).
    pub target_ce: f64,
    pub ot_transport: f64,
    pub ot_entropy: f64,
    pub ot_kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The same breakdown with every OT term set to zero and `total` recomputed.
    pub fn without_ot(&self, theta_s: f64, theta_t: f64) -> Self {
        LossBreakdown {
            source_ce: self.source_ce,
            target_ce: self.target_ce,
            total: theta_s * self.source_ce + theta_t * self.target_ce,
            ..LossBreakdown::default()
        }
    }

    fn accumulate(&mut self, other: &LossBreakdown) {
        self.source_ce += other.source_ce;
        self.target_ce += other.target_ce;
        self.ot_transport += other.ot_transport;
        self.ot_entropy += other.ot_entropy;
        self.ot_kl += other.ot_kl;
        self.total += other.total;
    }

    fn scaled(&self, s: f64) -> Self {
        LossBreakdown {
            source_ce: self.source_ce * s,
            target_ce: self.target_ce * s,
            ot_transport: self.ot_transport * s,
            ot_entropy: self.ot_entropy * s,
            ot_kl: self.ot_kl * s,
            total: self.total * s,
        }
    }
}

/// `alpha * ed * [use_ed] + beta * lc * [use_lc]`.
pub fn jdot_cost(
    ed: &CostMatrix,
    lc: &CostMatrix,
    alpha: f64,
    beta: f64,
    use_ed: bool,
    use_lc: bool,
) -> Result<CostMatrix> {
    if ed.shape() != lc.shape() {
        return Err(Error::Shape(format!("ED is {:?}, LC is {:?}", ed.shape(), lc.shape())));
    }
    let out = match (use_ed, use_lc) {
        (false, false) => return Err(Error::DegenerateCost),
        (true, false) => ed.entries() * alpha,
        (false, true) => lc.entries() * beta,
        (true, true) => ed.entries() * alpha + lc.entries() * beta,
    };
    CostMatrix::new(out)
}

/// Label-consistency cost between ground-truth labels.
pub fn label_cost_matrix(src_y: &[u8], tgt_y: &[u8], kind: LabelCost) -> Result<CostMatrix> {
    let lc = Array2::from_shape_fn((src_y.len(), tgt_y.len()), |(i, j)| {
        kind.between(src_y[i], tgt_y[j], NUM_CLASSES)
    });
    CostMatrix::new(lc)
}

fn rows(x: &Array2<f64>) -> Vec<&[f64]> {
    x.rows()
        .into_iter()
        .map(|r| r.to_slice().expect("standard layout"))
        .collect()
}

/// Intermediate results of the gamma step.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaStep {
    pub plan: TransportPlan,
    /// The cost handed to the solver (after masking, if any).
    pub cost: CostMatrix,
    pub fully_masked_targets: usize,
}

/// Cost from fixed sentence embeddings and true labels, optionally masked, then
/// solved with unbalanced Sinkhorn.
pub fn gamma_step_detailed(batch: &BatchPair, neighbors: Option<&NeighborSet>, cfg: &TrainConfig) -> Result<GammaStep> {
    batch.validate()?;
    let ed = squared_l2_cost(&rows(&batch.src_x), &rows(&batch.tgt_x))?;
    let lc = label_cost_matrix(&batch.src_y, &batch.tgt_y, cfg.label_cost)?;
    let mut cost = jdot_cost(&ed, &lc, cfg.alpha, cfg.beta, cfg.use_ed, cfg.use_lc)?;
    let mut fully_masked_targets = 0;
    if let Some(nb) = neighbors {
        let masked = neighborhood_mask(&cost, nb, &batch.src_ids, &batch.tgt_ids)?;
        fully_masked_targets = masked.fully_masked_targets;
        cost = masked.cost;
    }
    let a = make_uniform_measure(batch.len())?;
    let plan = sinkhorn_unbalanced(&cost, &a, &a, &cfg.ot_params())?;
    Ok(GammaStep {
        plan,
        cost,
        fully_masked_targets,
    })
}

pub fn gamma_step(batch: &BatchPair, neighbors: Option<&NeighborSet>, cfg: &TrainConfig) -> Result<TransportPlan> {
    gamma_step_detailed(batch, neighbors, cfg).map(|g| g.plan)
}

/// Weights of the differentiable objective.
#[derive(Debug, Clone, Copy)]
struct Weights {
    alpha: f64,
    beta: f64,
    theta_s: f64,
    theta_t: f64,
}

impl Weights {
    fn from_cfg(cfg: &TrainConfig) -> Self {
        Weights {
            alpha: if cfg.use_ed { cfg.alpha } else { 0.0 },
            beta: if cfg.use_lc { cfg.beta } else { 0.0 },
            theta_s: cfg.theta_s,
            theta_t: cfg.theta_t,
        }
    }
}

/// Cross-entropy of each row against `labels`, and its gradient w.r.t. the logits.
fn ce_rows(probs: &Array2<f64>, labels: &[u8]) -> (Vec<f64>, Array2<f64>) {
    let mut grad = probs.clone();
    let mut ce = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        let p = probs[[i, y as usize]];
        // NaN takes the unclamped branch so it surfaces in the loss.
        if p <= PROB_FLOOR {
            ce.push(-PROB_FLOOR.ln());
            grad.row_mut(i).fill(0.0);
        } else {
            ce.push(-p.ln());
            grad[[i, y as usize]] -= 1.0;
        }
    }
    (ce, grad)
}

fn probs_of(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.axis_iter_mut(Axis(0)) {
        let s = softmax(row.as_slice().expect("standard layout"));
        row.assign(&Array1::from(s));
    }
    p
}

/// Loss value and exact gradients of the differentiable objective.
///
/// Either half may be empty (zero rows); `gamma`, when given, must be
/// `n_src x n_tgt`.
fn forward_backward(
    params: &ModelParams,
    src_x: ArrayView2<f64>,
    src_y: &[u8],
    tgt_x: ArrayView2<f64>,
    tgt_y: &[u8],
    gamma: Option<&Array2<f64>>,
    w: Weights,
) -> Result<(ModelParams, LossBreakdown)> {
    let (ns, nt) = (src_y.len(), tgt_y.len());
    let zs = params.encode_batch(src_x)?;
    let zt = params.encode_batch(tgt_x)?;
    let ps = probs_of(&params.logits_batch(zs.view())?);
    let pt = probs_of(&params.logits_batch(zt.view())?);

    let mut d_ls = Array2::<f64>::zeros(ps.dim());
    let mut d_lt = Array2::<f64>::zeros(pt.dim());
    let mut d_zs = Array2::<f64>::zeros(zs.dim());
    let mut d_zt = Array2::<f64>::zeros(zt.dim());
    let mut bd = LossBreakdown::default();

    if ns > 0 {
        let (ce, g) = ce_rows(&ps, src_y);
        bd.source_ce = ce.iter().sum::<f64>() / ns as f64;
        d_ls.scaled_add(w.theta_s / ns as f64, &g);
    }
    if nt > 0 {
        let (ce, g) = ce_rows(&pt, tgt_y);
        bd.target_ce = ce.iter().sum::<f64>() / nt as f64;
        d_lt.scaled_add(w.theta_t / nt as f64, &g);
    }

    if let Some(gamma) = gamma {
        if gamma.dim() != (ns, nt) {
            return Err(Error::Shape(format!("plan is {:?}, batch is {ns}x{nt}", gamma.dim())));
        }
        let mut transport = 0.0;
        if w.alpha != 0.0 {
            for i in 0..ns {
                for j in 0..nt {
                    let g = gamma[[i, j]];
                    if g == 0.0 {
                        continue;
                    }
                    let mut dist = 0.0;
                    for h in 0..zs.ncols() {
                        let diff = zs[[i, h]] - zt[[j, h]];
                        dist += diff * diff;
                        d_zs[[i, h]] += 2.0 * w.alpha * g * diff;
                        d_zt[[j, h]] -= 2.0 * w.alpha * g * diff;
                    }
                    transport += w.alpha * g * dist;
                }
            }
        }
        if w.beta != 0.0 {
            for i in 0..ns {
                for j in 0..nt {
                    let g = gamma[[i, j]];
                    if g == 0.0 {
                        continue;
                    }
                    let y = tgt_y[j] as usize;
                    let p = ps[[i, y]];
                    if p <= PROB_FLOOR {
                        transport += w.beta * g * -PROB_FLOOR.ln();
                    } else {
                        transport += w.beta * g * -p.ln();
                        for c in 0..ps.ncols() {
                            let onehot = if c == y { 1.0 } else { 0.0 };
                            d_ls[[i, c]] += w.beta * g * (ps[[i, c]] - onehot);
                        }
                    }
                }
            }
        }
        bd.ot_transport = transport;
    }

    bd.total = w.theta_s * bd.source_ce + w.theta_t * bd.target_ce + bd.ot_transport;

    // logits = z V^T + c
    d_zs += &d_ls.dot(&params.cls_w);
    d_zt += &d_lt.dot(&params.cls_w);
    let grads = ModelParams {
        cls_w: d_ls.t().dot(&zs) + d_lt.t().dot(&zt),
        cls_b: d_ls.sum_axis(Axis(0)) + d_lt.sum_axis(Axis(0)),
        // z = x W^T + b
        enc_w: d_zs.t().dot(&src_x) + d_zt.t().dot(&tgt_x),
        enc_b: d_zs.sum_axis(Axis(0)) + d_zt.sum_axis(Axis(0)),
    };
    Ok((grads, bd))
}

fn check_finite(bd: LossBreakdown) -> Result<LossBreakdown> {
    let parts = [
        bd.source_ce,
        bd.target_ce,
        bd.ot_transport,
        bd.ot_entropy,
        bd.ot_kl,
        bd.total,
    ];
    if parts.iter().all(|x| x.is_finite()) {
        Ok(bd)
    } else {
        Err(Error::Numerical {
            breakdown: Box::new(bd),
        })
    }
}

/// Gradients of the fixed-plan objective and its value.
///
/// The plan is a constant here, so the entropy and KL terms are reported as 0;
/// [`total_loss`] adds them back.
pub fn model_step(
    params: &ModelParams,
    gamma: &TransportPlan,
    batch: &BatchPair,
    cfg: &TrainConfig,
) -> Result<(ModelParams, LossBreakdown)> {
    batch.validate()?;
    let (grads, bd) = forward_backward(
        params,
        batch.src_x.view(),
        &batch.src_y,
        batch.tgt_x.view(),
        &batch.tgt_y,
        Some(&gamma.plan),
        Weights::from_cfg(cfg),
    )?;
    Ok((grads, check_finite(bd)?))
}

/// Entropy and KL-relaxation terms of `gamma` under uniform batch measures.
pub fn plan_regularizers(gamma: &TransportPlan, cfg: &TrainConfig) -> Result<(f64, f64)> {
    let (n, m) = gamma.plan.dim();
    let a = make_uniform_measure(n)?;
    let b = make_uniform_measure(m)?;
    let entropy = cfg.epsilon * neg_entropy(gamma.plan.iter().copied());
    let rows = gamma.row_sums();
    let cols = gamma.col_sums();
    let kl = cfg.lambda
        * (generalized_kl(rows.as_slice().unwrap(), a.weights())
            + generalized_kl(cols.as_slice().unwrap(), b.weights()));
    Ok((entropy, kl))
}

/// Every term of the full objective, including the plan regularizers.
pub fn total_loss(
    batch: &BatchPair,
    gamma: &TransportPlan,
    params: &ModelParams,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let (_, mut bd) = match model_step(params, gamma, batch, cfg) {
        Ok(v) => v,
        Err(Error::Numerical { breakdown }) => (params.zeros_like(), *breakdown),
        Err(e) => return Err(e),
    };
    let (entropy, kl) = plan_regularizers(gamma, cfg)?;
    bd.ot_entropy = entropy;
    bd.ot_kl = kl;
    bd.total += entropy + kl;
    check_finite(bd)
}

/// Weighted source and target cross-entropy, no OT terms.
pub fn mixed_loss(batch: &BatchPair, params: &ModelParams, cfg: &TrainConfig) -> Result<LossBreakdown> {
    mixed_step(batch, params, cfg).map(|(_, bd)| bd)
}

fn mixed_step(batch: &BatchPair, params: &ModelParams, cfg: &TrainConfig) -> Result<(ModelParams, LossBreakdown)> {
    batch.validate()?;
    let (grads, bd) = forward_backward(
        params,
        batch.src_x.view(),
        &batch.src_y,
        batch.tgt_x.view(),
        &batch.tgt_y,
        None,
        Weights::from_cfg(cfg),
    )?;
    Ok((grads, check_finite(bd)?))
}

/// Plain mean cross-entropy on one labeled block.
fn supervised_step(params: &ModelParams, x: ArrayView2<f64>, y: &[u8]) -> Result<(ModelParams, LossBreakdown)> {
    let empty = Array2::zeros((0, x.ncols()));
    let w = Weights {
        alpha: 0.0,
        beta: 0.0,
        theta_s: 0.0,
        theta_t: 1.0,
    };
    let (grads, bd) = forward_backward(params, empty.view(), &[], x, y, None, w)?;
    Ok((grads, check_finite(bd)?))
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat parameter index where the worst error occurred.
    pub worst_index: usize,
    pub passed: bool,
}

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of the relative error, so that entries whose true
/// gradient is ~0 are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

/// Compares `analytic` with central differences of the fixed-plan objective.
pub fn compare_gradients(
    params: &ModelParams,
    batch: &BatchPair,
    gamma: &TransportPlan,
    cfg: &TrainConfig,
    analytic: &ModelParams,
    tol: f64,
) -> Result<GradCheckReport> {
    let flat = params.to_flat();
    let grad = analytic.to_flat();
    let mut probe = params.clone();
    let mut worst = (0.0f64, 0usize);
    for k in 0..flat.len() {
        let mut shifted = flat.clone();
        shifted[k] = flat[k] + FD_STEP;
        probe.set_from_flat(&shifted);
        let plus = model_step(&probe, gamma, batch, cfg)?.1.total;
        shifted[k] = flat[k] - FD_STEP;
        probe.set_from_flat(&shifted);
        let minus = model_step(&probe, gamma, batch, cfg)?.1.total;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let denom = grad[k].abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        let rel = (grad[k] - numeric).abs() / denom;
        if rel > worst.0 {
            worst = (rel, k);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        passed: worst.0 < tol,
    })
}

/// Checks [`model_step`]'s gradients against central differences.
pub fn grad_check(
    params: &ModelParams,
    batch: &BatchPair,
    gamma: &TransportPlan,
    cfg: &TrainConfig,
    tol: f64,
) -> Result<GradCheckReport> {
    let (analytic, _) = model_step(params, gamma, batch, cfg)?;
    compare_gradients(params, batch, gamma, cfg, &analytic, tol)
}

/// Splits used by [`train`]. All embeddings must be unit-normalized.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub source: Option<Dataset>,
    pub target_train: Dataset,
    pub target_val: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based; seq_ft numbers its source phase first.
    pub epoch: usize,
    pub phase: Phase,
    pub loss: LossBreakdown,
    /// Validation hate-F1 after the epoch (NaN-free; 0 when not evaluated).
    pub val_f1: f64,
    /// Batches whose masking left at least one target without neighbors.
    pub fully_masked_targets: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Source,
    Target,
    Joint,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation hate-F1.
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    /// Source ids used for training (the preselected subset where applicable).
    pub source_pool: Vec<u64>,
}

/// Draws mini-batches: source rows without replacement per epoch (reshuffled),
/// target rows uniformly with replacement.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    source_rows: Vec<usize>,
    n_target: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(source_rows: Vec<usize>, n_target: usize, batch_size: usize, seed: u64) -> Self {
        BatchSampler {
            source_rows,
            n_target,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// One epoch of `(source rows, target rows)` pairs of equal length.
    pub fn epoch(&mut self) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut order = self.source_rows.clone();
        order.shuffle(&mut self.rng);
        order
            .chunks(self.batch_size)
            .map(|chunk| {
                let tgt = (0..chunk.len())
                    .map(|_| self.rng.random_range(0..self.n_target))
                    .collect();
                (chunk.to_vec(), tgt)
            })
            .collect()
    }

    /// One shuffled pass over `0..n` in chunks, for single-domain phases.
    pub fn single_pass(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        order.chunks(self.batch_size).map(|c| c.to_vec()).collect()
    }
}

/// Hate-F1 of `params` on `d`.
pub fn evaluate_f1(params: &ModelParams, d: &Dataset) -> Result<f64> {
    Ok(f1_hate(&predict(params, d)?, &d.labels())?.f1)
}

pub fn predict(params: &ModelParams, d: &Dataset) -> Result<Vec<u8>> {
    let x = Array2::from_shape_fn((d.len(), d.dim()), |(i, j)| d.instances()[i].embedding[j]);
    params.predict_batch(x.view())
}

const SAMPLER_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

fn single_domain_epoch(
    params: &mut ModelParams,
    opt: &mut Adam,
    sampler: &mut BatchSampler,
    d: &Dataset,
) -> Result<LossBreakdown> {
    let batches = sampler.single_pass(d.len());
    let mut acc = LossBreakdown::default();
    for rows in &batches {
        let (x, y, _) = gather(d, rows);
        let (grads, bd) = supervised_step(params, x.view(), &y)?;
        opt.step(params, &grads);
        acc.accumulate(&bd);
    }
    Ok(acc.scaled(1.0 / batches.len() as f64))
}

/// Trains one method end to end with model selection on target validation F1.
pub fn train(data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_neighbors(data, cfg, None)
}

/// As [`train`], reusing precomputed target-train neighbor lists (which must
/// have been computed with `cfg.k`).
pub fn train_with_neighbors(
    data: &TrainData,
    cfg: &TrainConfig,
    neighbors: Option<&NeighborSet>,
) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    if let Some(theta_s) = cfg.method.forced_theta_s() {
        cfg.theta_s = theta_s;
    }
    cfg.validate()?;
    let method = cfg.method;
    let source = match (&data.source, method.needs_source()) {
        (Some(s), _) => Some(s),
        (None, true) => return Err(Error::Config(format!("{method} needs a source split"))),
        (None, false) => None,
    };
    for d in [Some(&data.target_train), Some(&data.target_val), source]
        .into_iter()
        .flatten()
    {
        if d.is_empty() {
            return Err(Error::Config(format!("{} split is empty", d.role().as_str())));
        }
        if !d.is_normalized(UNIT_NORM_TOL) {
            return Err(Error::Precondition(format!(
                "{} split is not unit-normalized",
                d.role().as_str()
            )));
        }
        if d.dim() != data.target_train.dim() {
            return Err(Error::Config("splits disagree on embedding dimension".into()));
        }
    }

    let needs_neighbors = method.is_ot() || method.uses_preselect();
    let owned;
    let neighbors = match (needs_neighbors, neighbors) {
        (false, _) => None,
        (true, Some(n)) => Some(n),
        (true, None) => {
            let index = build_index(source.expect("checked above"))?;
            owned = compute_neighbors(&index, &data.target_train, cfg.k)?;
            Some(&owned)
        }
    };

    let (source_pool_ids, source_rows): (Vec<u64>, Vec<usize>) = match source {
        None => (Vec::new(), Vec::new()),
        Some(s) if method.uses_preselect() => {
            let keep: std::collections::HashSet<u64> = preselect_sources(neighbors.expect("preselect needs neighbors"))
                .into_iter()
                .collect();
            s.instances()
                .iter()
                .enumerate()
                .filter(|(_, inst)| keep.contains(&inst.id))
                .map(|(row, inst)| (inst.id, row))
                .unzip()
        }
        Some(s) => (s.ids(), (0..s.len()).collect()),
    };

    let dim = data.target_train.dim();
    let mut params = ModelParams::init(dim, cfg.hidden_dim, NUM_CLASSES, cfg.seed);
    let mut opt = Adam::new(params.num_params(), cfg.learning_rate);
    let mut sampler = BatchSampler::new(
        source_rows,
        data.target_train.len(),
        cfg.batch_size,
        cfg.seed ^ SAMPLER_STREAM,
    );

    let mut history = Vec::new();
    let mut epoch_no = 0;

    if method == Method::SeqFt {
        let s = source.expect("checked above");
        for _ in 0..cfg.source_epochs {
            epoch_no += 1;
            let loss = single_domain_epoch(&mut params, &mut opt, &mut sampler, s)?;
            history.push(EpochRecord {
                epoch: epoch_no,
                phase: Phase::Source,
                loss,
                val_f1: evaluate_f1(&params, &data.target_val)?,
                fully_masked_targets: 0,
            });
        }
    }

    let mut best: Option<(f64, usize, ModelParams)> = None;
    for _ in 0..cfg.epochs {
        epoch_no += 1;
        let (loss, phase, masked) = match method {
            Method::TargetFt | Method::SeqFt => (
                single_domain_epoch(&mut params, &mut opt, &mut sampler, &data.target_train)?,
                Phase::Target,
                0,
            ),
            _ => joint_epoch(
                &mut params,
                &mut opt,
                &mut sampler,
                source.expect("checked"),
                data,
                &cfg,
                neighbors,
            )?,
        };
        let val_f1 = evaluate_f1(&params, &data.target_val)?;
        history.push(EpochRecord {
            epoch: epoch_no,
            phase,
            loss,
            val_f1,
            fully_masked_targets: masked,
        });
        if best.as_ref().is_none_or(|(f, _, _)| val_f1 > *f) {
            best = Some((val_f1, epoch_no, params.clone()));
        }
    }
    let (best_val_f1, best_epoch, params) = best.expect("epochs >= 1");
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
        best_val_f1,
        source_pool: source_pool_ids,
    })
}

fn joint_epoch(
    params: &mut ModelParams,
    opt: &mut Adam,
    sampler: &mut BatchSampler,
    source: &Dataset,
    data: &TrainData,
    cfg: &TrainConfig,
    neighbors: Option<&NeighborSet>,
) -> Result<(LossBreakdown, Phase, usize)> {
    let batches = sampler.epoch();
    let mut acc = LossBreakdown::default();
    let mut masked = 0;
    for (src_rows, tgt_rows) in &batches {
        let batch = BatchPair::from_rows(source, src_rows, &data.target_train, tgt_rows)?;
        let (grads, bd) = if cfg.method.is_ot() {
            let step = gamma_step_detailed(&batch, neighbors, cfg)?;
            masked += (step.fully_masked_targets > 0) as usize;
            let (grads, mut bd) = model_step(params, &step.plan, &batch, cfg)?;
            let (entropy, kl) = plan_regularizers(&step.plan, cfg)?;
            bd.ot_entropy = entropy;
            bd.ot_kl = kl;
            bd.total += entropy + kl;
            (grads, bd)
        } else {
            mixed_step(&batch, params, cfg)?
        };
        opt.step(params, &grads);
        acc.accumulate(&bd);
    }
    Ok((acc.scaled(1.0 / batches.len() as f64), Phase::Joint, masked))
}
