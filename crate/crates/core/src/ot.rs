//! Entropic optimal transport over dense mini-batch cost matrices.
//!
//! Both solvers minimize
//!
//! ```text
//! <gamma, C> + eps * sum_ij gamma_ij ln gamma_ij
//!            + lambda * (KL(gamma 1 | a) + KL(gamma^T 1 | b))
//! ```
//!
//! where KL is the generalized divergence `sum p ln(p/q) - p + q` and the
//! balanced solver enforces the marginals exactly instead of penalizing them.
//! Updates run as plain kernel scaling for `eps >= LOG_DOMAIN_THRESHOLD` and
//! on log-domain dual potentials below it (or whenever scaling under/overflows).

use itertools::Itertools;
use ndarray::{Array1, Array2};

use crate::data::DiscreteMeasure;
use crate::error::{Error, Result};

/// Below this entropy coefficient the solvers switch to log-domain updates.
pub const LOG_DOMAIN_THRESHOLD: f64 = 0.05;

/// Largest side accepted by [`brute_force_balanced`].
pub const BRUTE_FORCE_MAX: usize = 8;

/// Dense `m_s x m_t` matrix of non-negative finite costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Array2<f64>);

impl CostMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::Shape("cost matrix has an empty side".into()));
        }
        if let Some(c) = entries.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
            return Err(Error::Domain(format!("cost entry {c} is not finite and non-negative")));
        }
        Ok(CostMatrix(entries))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Shape("ragged cost rows".into()));
        }
        let flat = rows.iter().flatten().copied().collect();
        let arr = Array2::from_shape_vec((n, m), flat).map_err(|e| Error::Shape(e.to_string()))?;
        CostMatrix::new(arr)
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Coupling between the two sides of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl TransportPlan {
    /// An all-zero plan, treated as converged.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        TransportPlan {
            plan: Array2::zeros((rows, cols)),
            converged: true,
            iterations: 0,
        }
    }

    pub fn row_sums(&self) -> Array1<f64> {
        self.plan.sum_axis(ndarray::Axis(1))
    }

    pub fn col_sums(&self) -> Array1<f64> {
        self.plan.sum_axis(ndarray::Axis(0))
    }

    pub fn total_mass(&self) -> f64 {
        self.plan.sum()
    }

    /// `<gamma, C>`.
    pub fn transport_cost(&self, c: &CostMatrix) -> f64 {
        (&self.plan * c.entries()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OTParams {
    pub epsilon: f64,
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for OTParams {
    fn default() -> Self {
        OTParams {
            epsilon: 0.2,
            lambda: 0.5,
            tol: 1e-6,
            max_iter: 1000,
        }
    }
}

impl OTParams {
    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Domain(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::Domain(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.tol.is_nan() || self.tol <= 0.0 || self.max_iter == 0 {
            return Err(Error::Domain("tol and max_iter must be positive".into()));
        }
        Ok(())
    }
}

/// Gibbs kernel entry `exp(-c / eps)`.
#[inline]
pub fn gibbs_kernel(c: f64, eps: f64) -> f64 {
    (-c / eps).exp()
}

/// Pairwise squared Euclidean distances between the rows of `a` and `b`.
pub fn squared_l2_cost<A: AsRef<[f64]>, B: AsRef<[f64]>>(a: &[A], b: &[B]) -> Result<CostMatrix> {
    let dim = a
        .first()
        .map(|v| v.as_ref().len())
        .ok_or_else(|| Error::Shape("empty source side".into()))?;
    if a.iter().any(|v| v.as_ref().len() != dim) || b.iter().any(|v| v.as_ref().len() != dim) {
        return Err(Error::Shape("vectors do not share one dimension".into()));
    }
    let mut out = Array2::zeros((a.len(), b.len()));
    for (i, u) in a.iter().enumerate() {
        for (j, v) in b.iter().enumerate() {
            out[[i, j]] = u.as_ref().iter().zip(v.as_ref()).map(|(x, y)| (x - y) * (x - y)).sum();
        }
    }
    CostMatrix::new(out)
}

fn check_shapes(c: &CostMatrix, a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<()> {
    let (n, m) = c.shape();
    if a.len() != n || b.len() != m {
        return Err(Error::Shape(format!(
            "cost is {n}x{m} but measures have {} and {} atoms",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// l1 distance between the plan's marginals and `(a, b)`.
pub fn marginal_violation(gamma: &TransportPlan, a: &DiscreteMeasure, b: &DiscreteMeasure) -> f64 {
    let rows: f64 = gamma
        .row_sums()
        .iter()
        .zip(a.weights())
        .map(|(r, w)| (r - w).abs())
        .sum();
    let cols: f64 = gamma
        .col_sums()
        .iter()
        .zip(b.weights())
        .map(|(s, w)| (s - w).abs())
        .sum();
    rows + cols
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn sup_change(old: &[f64], new: &[f64]) -> f64 {
    old.iter()
        .zip(new)
        .map(|(x, y)| if x == y { 0.0 } else { (x - y).abs() })
        .fold(0.0, f64::max)
}

/// Which update rule a solver call uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scheme {
    Scaling,
    LogDomain,
}

fn scheme_for(eps: f64) -> Scheme {
    if eps < LOG_DOMAIN_THRESHOLD {
        Scheme::LogDomain
    } else {
        Scheme::Scaling
    }
}

/// Balanced entropic OT: `gamma = diag(u) exp(-C/eps) diag(v)` with marginals `a`, `b`.
///
/// Stops once the l1 marginal violation drops to `p.tol`; otherwise returns the
/// last iterate with `converged = false`.
pub fn sinkhorn_balanced(
    c: &CostMatrix,
    a: &DiscreteMeasure,
    b: &DiscreteMeasure,
    p: &OTParams,
) -> Result<TransportPlan> {
    check_shapes(c, a, b)?;
    if !(p.epsilon.is_finite() && p.epsilon > 0.0) || p.max_iter == 0 {
        return Err(Error::Domain("epsilon and max_iter must be positive".into()));
    }
    let (sum_a, sum_b) = (a.total_mass(), b.total_mass());
    if (sum_a - 1.0).abs() > 1e-9 || (sum_b - 1.0).abs() > 1e-9 {
        return Err(Error::Balance { sum_a, sum_b });
    }
    if scheme_for(p.epsilon) == Scheme::Scaling {
        if let Some(plan) = balanced_scaling(c, a, b, p) {
            return Ok(plan);
        }
    }
    Ok(balanced_log(c, a, b, p))
}

fn balanced_scaling(c: &CostMatrix, a: &DiscreteMeasure, b: &DiscreteMeasure, p: &OTParams) -> Option<TransportPlan> {
    let (n, m) = c.shape();
    let k = c.entries().mapv(|x| gibbs_kernel(x, p.epsilon));
    let (a, b) = (a.weights(), b.weights());
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < p.max_iter {
        iterations += 1;
        for i in 0..n {
            let kv: f64 = (0..m).map(|j| k[[i, j]] * v[j]).sum();
            u[i] = a[i] / kv;
        }
        for j in 0..m {
            let ku: f64 = (0..n).map(|i| k[[i, j]] * u[i]).sum();
            v[j] = b[j] / ku;
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return None;
        }
        let row_err: f64 = (0..n)
            .map(|i| {
                let r: f64 = (0..m).map(|j| u[i] * k[[i, j]] * v[j]).sum();
                (r - a[i]).abs()
            })
            .sum();
        if row_err <= p.tol {
            converged = true;
            break;
        }
    }
    let plan = Array2::from_shape_fn((n, m), |(i, j)| u[i] * k[[i, j]] * v[j]);
    plan.iter().all(|x| x.is_finite()).then_some(TransportPlan {
        plan,
        converged,
        iterations,
    })
}

fn balanced_log(c: &CostMatrix, a: &DiscreteMeasure, b: &DiscreteMeasure, p: &OTParams) -> TransportPlan {
    let (n, m) = c.shape();
    let eps = p.epsilon;
    let cost = c.entries();
    let log_a: Vec<f64> = a.weights().iter().map(|w| w.ln()).collect();
    let log_b: Vec<f64> = b.weights().iter().map(|w| w.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < p.max_iter {
        iterations += 1;
        for i in 0..n {
            let lse = logsumexp((0..m).map(|j| (g[j] - cost[[i, j]]) / eps));
            f[i] = eps * (log_a[i] - lse);
        }
        for j in 0..m {
            let lse = logsumexp((0..n).map(|i| (f[i] - cost[[i, j]]) / eps));
            g[j] = eps * (log_b[j] - lse);
        }
        let row_err: f64 = (0..n)
            .map(|i| {
                let r: f64 = (0..m).map(|j| ((f[i] + g[j] - cost[[i, j]]) / eps).exp()).sum();
                (r - a.weights()[i]).abs()
            })
            .sum();
        if row_err <= p.tol {
            converged = true;
            break;
        }
    }
    TransportPlan {
        plan: plan_from_potentials(cost, &f, &g, eps),
        converged,
        iterations,
    }
}

fn plan_from_potentials(cost: &Array2<f64>, f: &[f64], g: &[f64], eps: f64) -> Array2<f64> {
    Array2::from_shape_fn(cost.dim(), |(i, j)| {
        let x = ((f[i] + g[j] - cost[[i, j]]) / eps).exp();
        if x.is_nan() {
            0.0
        } else {
            x
        }
    })
}

/// Unbalanced entropic OT with KL-relaxed marginals, weight `p.lambda` on both sides.
///
/// Scaling iterations `u = (a / K v)^t`, `v = (b / K^T u)^t` with
/// `t = lambda / (lambda + eps)` and kernel `exp(-(C + eps) / eps)`; the `+ eps`
/// shift makes the fixed point minimize the objective with the plain
/// `sum gamma ln gamma` entropy. Stops once the dual potentials
/// `eps ln u`, `eps ln v` move by less than `p.tol` in sup norm.
pub fn sinkhorn_unbalanced(
    c: &CostMatrix,
    a: &DiscreteMeasure,
    b: &DiscreteMeasure,
    p: &OTParams,
) -> Result<TransportPlan> {
    check_shapes(c, a, b)?;
    p.validate()?;
    if scheme_for(p.epsilon) == Scheme::Scaling {
        if let Some(plan) = unbalanced_scaling(c, a, b, p) {
            return Ok(plan);
        }
    }
    Ok(unbalanced_log(c, a, b, p))
}

fn unbalanced_scaling(c: &CostMatrix, a: &DiscreteMeasure, b: &DiscreteMeasure, p: &OTParams) -> Option<TransportPlan> {
    let (n, m) = c.shape();
    let eps = p.epsilon;
    let t = p.lambda / (p.lambda + eps);
    let k = c.entries().mapv(|x| gibbs_kernel(x + eps, eps));
    let (a, b) = (a.weights(), b.weights());
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < p.max_iter {
        iterations += 1;
        for i in 0..n {
            let kv: f64 = (0..m).map(|j| k[[i, j]] * v[j]).sum();
            u[i] = if a[i] == 0.0 { 0.0 } else { (a[i] / kv).powf(t) };
        }
        for j in 0..m {
            let ku: f64 = (0..n).map(|i| k[[i, j]] * u[i]).sum();
            v[j] = if b[j] == 0.0 { 0.0 } else { (b[j] / ku).powf(t) };
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return None;
        }
        let f_new: Vec<f64> = u.iter().map(|x| eps * x.ln()).collect();
        let g_new: Vec<f64> = v.iter().map(|x| eps * x.ln()).collect();
        let change = sup_change(&f, &f_new).max(sup_change(&g, &g_new));
        f = f_new;
        g = g_new;
        if change <= p.tol {
            converged = true;
            break;
        }
    }
    let plan = Array2::from_shape_fn((n, m), |(i, j)| u[i] * k[[i, j]] * v[j]);
    plan.iter().all(|x| x.is_finite()).then_some(TransportPlan {
        plan,
        converged,
        iterations,
    })
}

fn unbalanced_log(c: &CostMatrix, a: &DiscreteMeasure, b: &DiscreteMeasure, p: &OTParams) -> TransportPlan {
    let (n, m) = c.shape();
    let eps = p.epsilon;
    let t = p.lambda / (p.lambda + eps);
    let shifted = c.entries().mapv(|x| x + eps);
    let log_a: Vec<f64> = a.weights().iter().map(|w| w.ln()).collect();
    let log_b: Vec<f64> = b.weights().iter().map(|w| w.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < p.max_iter {
        iterations += 1;
        let f_new: Vec<f64> = (0..n)
            .map(|i| {
                let lse = logsumexp((0..m).map(|j| (g[j] - shifted[[i, j]]) / eps));
                t * eps * (log_a[i] - lse)
            })
            .collect();
        let g_new: Vec<f64> = (0..m)
            .map(|j| {
                let lse = logsumexp((0..n).map(|i| (f_new[i] - shifted[[i, j]]) / eps));
                t * eps * (log_b[j] - lse)
            })
            .collect();
        let change = sup_change(&f, &f_new).max(sup_change(&g, &g_new));
        f = f_new;
        g = g_new;
        if change <= p.tol {
            converged = true;
            break;
        }
    }
    TransportPlan {
        plan: plan_from_potentials(&shifted, &f, &g, eps),
        converged,
        iterations,
    }
}

/// The three parts of the regularized objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveTerms {
    /// `<gamma, C>`
    pub transport: f64,
    /// `eps * sum gamma ln gamma`
    pub entropy: f64,
    /// `lambda * (KL(gamma 1 | a) + KL(gamma^T 1 | b))`
    pub kl: f64,
}

impl ObjectiveTerms {
    pub fn total(&self) -> f64 {
        self.transport + self.entropy + self.kl
    }
}

/// `sum x ln x` with `0 ln 0 = 0`.
pub fn neg_entropy(values: impl IntoIterator<Item = f64>) -> f64 {
    values
        .into_iter()
        .map(|x| if x == 0.0 { 0.0 } else { x * x.ln() })
        .sum()
}

/// Generalized KL divergence `sum p ln(p/q) - p + q` (0 ln 0 = 0, +inf when
/// `p > 0` meets `q = 0`).
pub fn generalized_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&x, &y)| {
            if x == 0.0 {
                y
            } else if y == 0.0 {
                f64::INFINITY
            } else {
                x * (x / y).ln() - x + y
            }
        })
        .sum()
}

pub fn ot_objective_terms(
    gamma: &TransportPlan,
    c: &CostMatrix,
    a: &DiscreteMeasure,
    b: &DiscreteMeasure,
    p: &OTParams,
) -> Result<ObjectiveTerms> {
    check_shapes(c, a, b)?;
    if gamma.plan.dim() != c.shape() {
        return Err(Error::Shape(format!(
            "plan is {:?} but cost is {:?}",
            gamma.plan.dim(),
            c.shape()
        )));
    }
    if let Some(x) = gamma.plan.iter().find(|x| x.is_nan() || **x < 0.0) {
        return Err(Error::Domain(format!("transport plan entry {x} is negative")));
    }
    let rows = gamma.row_sums();
    let cols = gamma.col_sums();
    Ok(ObjectiveTerms {
        transport: gamma.transport_cost(c),
        entropy: p.epsilon * neg_entropy(gamma.plan.iter().copied()),
        kl: p.lambda
            * (generalized_kl(rows.as_slice().unwrap(), a.weights())
                + generalized_kl(cols.as_slice().unwrap(), b.weights())),
    })
}

/// Transport cost plus entropy plus KL relaxation.
pub fn ot_objective(
    gamma: &TransportPlan,
    c: &CostMatrix,
    a: &DiscreteMeasure,
    b: &DiscreteMeasure,
    p: &OTParams,
) -> Result<f64> {
    ot_objective_terms(gamma, c, a, b, p).map(|t| t.total())
}

/// Exact balanced OT with uniform marginals by enumerating permutation matrices.
///
/// Permutations are visited in lexicographic order and only a strictly
/// cheaper one replaces the incumbent.
pub fn brute_force_balanced(c: &CostMatrix) -> Result<TransportPlan> {
    let (n, m) = c.shape();
    if n != m {
        return Err(Error::Shape(format!("brute force needs a square cost, got {n}x{m}")));
    }
    if n > BRUTE_FORCE_MAX {
        return Err(Error::SizeLimit(format!(
            "brute force enumerates n! plans; n = {n} exceeds {BRUTE_FORCE_MAX}"
        )));
    }
    let cost = c.entries();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..n).permutations(n) {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, perm));
        }
    }
    let (_, perm) = best.expect("n >= 1");
    let mut plan = Array2::zeros((n, n));
    for (i, j) in perm.into_iter().enumerate() {
        plan[[i, j]] = 1.0 / n as f64;
    }
    Ok(TransportPlan {
        plan,
        converged: true,
        iterations: 0,
    })
}
