//! Stochastic variational inference with inducing points at the
//! latent-process level.
//!
//! The posterior over inducing variables is `q(u) = N(mu, S)` with
//! `S = L L^T` parameterized by its Cholesky factor. Training alternates
//! Adam ascent on `(mu, L)` (E-step) with Adam ascent on the kernel,
//! mixing, and likelihood hyperparameters (M-step), optionally on
//! minibatches with per-task rescaling of the expected log-likelihood.
//!
//! All optimization runs on one flat unconstrained parameter vector:
//! positive quantities (Cholesky diagonals, lengthscales, noise variances)
//! are stored as logs. Gradients are assembled from closed-form adjoints of
//! the marginal moments; `K_uu` is factorized once per hyperparameter state
//! and reused across a whole E-step.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::kernels::{self, EqParams, PreparedSupport};
use crate::likelihoods::{GaussHermiteRule, LikelihoodKind, DEFAULT_GH_ORDER};
use crate::lmc::{self, InducingSet, LatentIndexMap, LmcParams};
use crate::supports::{Support, DEFAULT_QUAD_RESOLUTION};

/// Gaussian variational posterior over the inducing variables, held as a
/// mean vector and the lower Cholesky factor of its covariance.
#[derive(Debug, Clone)]
pub struct VariationalState {
    mu: DVector<f64>,
    l: DMatrix<f64>,
}

impl VariationalState {
    pub fn new(mu: DVector<f64>, l: DMatrix<f64>) -> Result<Self> {
        if l.nrows() != l.ncols() || l.nrows() != mu.len() {
            return Err(Error::DimensionMismatch {
                expected: mu.len(),
                found: l.nrows(),
            });
        }
        let mut l = l;
        l.fill_upper_triangle(0.0, 1);
        for d in 0..l.nrows() {
            if !(l[(d, d)] > 0.0) || !l[(d, d)].is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "Cholesky factor needs a positive finite diagonal, got {} at {d}",
                    l[(d, d)]
                )));
            }
        }
        Ok(Self { mu, l })
    }

    /// `q(u) = p(u)`: zero mean, `S = K_uu`, so the KL term starts at zero.
    pub fn prior(kuu: &DMatrix<f64>) -> Result<Self> {
        let chol = cholesky_or_err(kuu.clone(), 0.0)?;
        Self::new(DVector::zeros(kuu.nrows()), chol.l())
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn chol_factor(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// `S = L L^T`.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }
}

/// Optimizer and loop settings for [`fit`].
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Observations per minibatch; anything >= N runs full batch.
    pub minibatch: usize,
    pub e_steps: usize,
    pub m_steps: usize,
    pub cycles: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Stop when the relative change of the full-batch ELBO between cycles
    /// falls below this.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            minibatch: usize::MAX,
            e_steps: 10,
            m_steps: 10,
            cycles: 200,
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            tolerance: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.minibatch == 0 || self.cycles == 0 {
            return Err(Error::InvalidParameter(
                "minibatch and cycles must be positive".into(),
            ));
        }
        if self.e_steps == 0 && self.m_steps == 0 {
            return Err(Error::InvalidParameter(
                "at least one of e_steps/m_steps must be positive".into(),
            ));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
            ("tolerance", self.tolerance),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must lie in [0, 1), got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// How to initialize the mixing matrices `A_q`.
#[derive(Debug, Clone)]
pub enum MixingInit {
    /// Entries i.i.d. `N(0, 0.5^2)` from the training seed.
    RandomNormal,
    Fixed(Vec<DMatrix<f64>>),
}

/// Model structure handed to [`fit`]: initial kernels, ranks, inducing
/// inputs (fixed during optimization), and numerical settings.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub kernels: Vec<EqParams>,
    pub ranks: Vec<usize>,
    pub inducing: InducingSet,
    pub quad_resolution: usize,
    pub jitter: f64,
    pub gh_order: usize,
    pub mixing_init: MixingInit,
}

impl ModelSpec {
    pub fn new(kernels: Vec<EqParams>, ranks: Vec<usize>, inducing: InducingSet) -> Self {
        Self {
            kernels,
            ranks,
            inducing,
            quad_resolution: DEFAULT_QUAD_RESOLUTION,
            jitter: lmc::DEFAULT_JITTER,
            gh_order: DEFAULT_GH_ORDER,
            mixing_init: MixingInit::RandomNormal,
        }
    }
}

/// A trained (or initialized) model: every piece needed to evaluate the
/// bound and predict.
#[derive(Debug, Clone)]
pub struct Model {
    pub lmc: LmcParams,
    pub likelihoods: Vec<LikelihoodKind>,
    pub index_map: LatentIndexMap,
    pub inducing: InducingSet,
    pub state: VariationalState,
    pub quad_resolution: usize,
    pub jitter: f64,
    pub gh: GaussHermiteRule,
}

impl Model {
    pub fn kuu(&self) -> Result<DMatrix<f64>> {
        lmc::build_kuu(&self.inducing, &self.lmc, self.jitter)
    }

    pub fn input_dim(&self) -> usize {
        self.lmc.input_dim()
    }
}

/// Marginal moments of `q(f)` per observation row and latent slot, plus
/// bookkeeping about variance clamping.
#[derive(Debug, Clone)]
pub struct QfMarginals {
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
    /// Number of variances that came out negative (by roundoff) and were
    /// clamped to zero.
    pub clamped: usize,
    /// Most negative raw variance seen before clamping.
    pub min_raw_variance: f64,
}

fn cholesky_or_err(m: DMatrix<f64>, jitter: f64) -> Result<Cholesky<f64, Dyn>> {
    let size = m.nrows();
    let mut min_diag = f64::INFINITY;
    let mut max_diag = f64::NEG_INFINITY;
    for d in 0..size {
        min_diag = min_diag.min(m[(d, d)]);
        max_diag = max_diag.max(m[(d, d)]);
    }
    Cholesky::new(m).ok_or(Error::CholeskyFailed {
        size,
        jitter,
        min_diag,
        max_diag,
    })
}

/// `KL(q(u) || p(u))` with `p(u) = N(0, K_uu)`, evaluated through Cholesky
/// factors of both matrices.
pub fn kl_qu_pu(state: &VariationalState, kuu: &DMatrix<f64>) -> Result<f64> {
    let chol = cholesky_or_err(kuu.clone(), 0.0)?;
    Ok(kl_from_chol(state, &chol))
}

fn kl_from_chol(state: &VariationalState, chol: &Cholesky<f64, Dyn>) -> f64 {
    let t = state.dim() as f64;
    // tr(K^-1 S) = ||Lk^-1 L||_F^2
    let lk = chol.l();
    let x = lk
        .solve_lower_triangular(&state.l)
        .expect("Cholesky factor is nonsingular");
    let trace = x.norm_squared();
    let alpha = chol.solve(&state.mu);
    let maha = state.mu.dot(&alpha);
    let logdet_k: f64 = (0..lk.nrows()).map(|d| lk[(d, d)].ln()).sum::<f64>() * 2.0;
    let logdet_s: f64 = (0..state.l.nrows())
        .map(|d| state.l[(d, d)].ln())
        .sum::<f64>()
        * 2.0;
    0.5 * (trace + maha - t + logdet_k - logdet_s)
}

// ---------------------------------------------------------------------------
// Flat parameter vector

/// Index layout of the flat unconstrained parameter vector:
/// `[mu | vech(L) (log diag) | per-q log lengthscales | per-q A entries |
/// per-task log noise]`.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub t: usize,
    tril: usize,
    ell_offsets: Vec<usize>,
    dims: usize,
    mixing_offsets: Vec<usize>,
    mixing_shape: Vec<(usize, usize)>,
    noise_offsets: Vec<Option<usize>>,
    total: usize,
}

impl ParamLayout {
    pub fn for_model(model: &Model) -> Self {
        let t = model.state.dim();
        let tril = t * (t + 1) / 2;
        let dims = model.lmc.input_dim();
        let mut next = t + tril;
        let mut ell_offsets = Vec::new();
        for _ in 0..model.lmc.num_kernels() {
            ell_offsets.push(next);
            next += dims;
        }
        let mut mixing_offsets = Vec::new();
        let mut mixing_shape = Vec::new();
        for q in 0..model.lmc.num_kernels() {
            let a = model.lmc.mixing_matrix(q);
            mixing_offsets.push(next);
            mixing_shape.push((a.nrows(), a.ncols()));
            next += a.nrows() * a.ncols();
        }
        let mut noise_offsets = Vec::new();
        for kind in &model.likelihoods {
            if matches!(kind, LikelihoodKind::Gaussian { .. }) {
                noise_offsets.push(Some(next));
                next += 1;
            } else {
                noise_offsets.push(None);
            }
        }
        Self {
            t,
            tril,
            ell_offsets,
            dims,
            mixing_offsets,
            mixing_shape,
            noise_offsets,
            total: next,
        }
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn idx_l(&self, r: usize, c: usize) -> usize {
        debug_assert!(c <= r);
        self.t + r * (r + 1) / 2 + c
    }

    fn idx_ell(&self, q: usize, d: usize) -> usize {
        self.ell_offsets[q] + d
    }

    fn idx_a(&self, q: usize, j: usize, i: usize) -> usize {
        let (_, cols) = self.mixing_shape[q];
        self.mixing_offsets[q] + j * cols + i
    }

    /// True on coordinates updated during the E-step (`mu` and `L`).
    pub fn variational_mask(&self) -> Vec<bool> {
        (0..self.total).map(|i| i < self.t + self.tril).collect()
    }

    /// True on coordinates updated during the M-step (hyperparameters).
    pub fn hyper_mask(&self) -> Vec<bool> {
        (0..self.total).map(|i| i >= self.t + self.tril).collect()
    }

    pub fn pack(&self, model: &Model) -> DVector<f64> {
        let mut out = DVector::zeros(self.total);
        for i in 0..self.t {
            out[i] = model.state.mu[i];
        }
        for r in 0..self.t {
            for c in 0..=r {
                let v = model.state.l[(r, c)];
                out[self.idx_l(r, c)] = if r == c { v.ln() } else { v };
            }
        }
        for q in 0..model.lmc.num_kernels() {
            for d in 0..self.dims {
                out[self.idx_ell(q, d)] = model.lmc.kernel(q).lengthscales()[d].ln();
            }
            let a = model.lmc.mixing_matrix(q);
            for j in 0..a.nrows() {
                for i in 0..a.ncols() {
                    out[self.idx_a(q, j, i)] = a[(j, i)];
                }
            }
        }
        for (d, kind) in model.likelihoods.iter().enumerate() {
            if let (Some(off), LikelihoodKind::Gaussian { noise_variance }) =
                (self.noise_offsets[d], kind)
            {
                out[off] = noise_variance.ln();
            }
        }
        out
    }

    pub fn apply(&self, model: &mut Model, params: &DVector<f64>) -> Result<()> {
        if params.len() != self.total {
            return Err(Error::DimensionMismatch {
                expected: self.total,
                found: params.len(),
            });
        }
        let mu = DVector::from_fn(self.t, |i, _| params[i]);
        let mut l = DMatrix::zeros(self.t, self.t);
        for r in 0..self.t {
            for c in 0..=r {
                let v = params[self.idx_l(r, c)];
                l[(r, c)] = if r == c { v.exp() } else { v };
            }
        }
        model.state = VariationalState::new(mu, l)?;
        for q in 0..model.lmc.num_kernels() {
            for d in 0..self.dims {
                model
                    .lmc
                    .kernel_mut(q)
                    .set_lengthscale(d, params[self.idx_ell(q, d)].exp())?;
            }
            let (rows, cols) = self.mixing_shape[q];
            let a = model.lmc.mixing_mut(q);
            for j in 0..rows {
                for i in 0..cols {
                    a[(j, i)] = params[self.idx_a(q, j, i)];
                }
            }
        }
        for (d, kind) in model.likelihoods.iter_mut().enumerate() {
            if let (Some(off), LikelihoodKind::Gaussian { noise_variance }) =
                (self.noise_offsets[d], kind)
            {
                *noise_variance = params[off].exp();
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Adam

/// Step-size and decay settings of the Adam optimizer.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl From<&TrainConfig> for AdamParams {
    fn from(c: &TrainConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
        }
    }
}

/// First and second moment accumulators, zero-initialized.
#[derive(Debug, Clone)]
pub struct AdamMoments {
    pub first: DVector<f64>,
    pub second: DVector<f64>,
    pub steps: usize,
}

impl AdamMoments {
    pub fn new(len: usize) -> Self {
        Self {
            first: DVector::zeros(len),
            second: DVector::zeros(len),
            steps: 0,
        }
    }
}

/// One bias-corrected Adam ascent step, restricted to `mask` when given.
pub fn adam_step(
    params: &mut DVector<f64>,
    grad: &DVector<f64>,
    moments: &mut AdamMoments,
    cfg: &AdamParams,
    mask: Option<&[bool]>,
) {
    moments.steps += 1;
    let t = moments.steps as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        if let Some(m) = mask {
            if !m[i] {
                continue;
            }
        }
        let g = grad[i];
        moments.first[i] = cfg.beta1 * moments.first[i] + (1.0 - cfg.beta1) * g;
        moments.second[i] = cfg.beta2 * moments.second[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = moments.first[i] / bc1;
        let vhat = moments.second[i] / bc2;
        params[i] += cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
    }
}

// ---------------------------------------------------------------------------
// Observation bookkeeping and kernel caches

#[derive(Debug, Clone)]
struct ObsRef<'a> {
    task: usize,
    y: f64,
    support: &'a Support,
}

fn collect_obs<'a>(data: &'a [TaskDataset]) -> Result<(Vec<ObsRef<'a>>, Vec<usize>)> {
    if data.is_empty() {
        return Err(Error::InvalidParameter("no task datasets given".into()));
    }
    let mut obs = Vec::new();
    let mut counts = Vec::with_capacity(data.len());
    for (task, ds) in data.iter().enumerate() {
        ds.validate()?;
        if ds.rows.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "task {} has no observations",
                ds.name
            )));
        }
        for (s, y) in &ds.rows {
            if !y.is_finite() {
                return Err(Error::InvalidObservation(format!(
                    "task {} has a non-finite observation",
                    ds.name
                )));
            }
            obs.push(ObsRef {
                task,
                y: *y,
                support: s,
            });
        }
        counts.push(ds.rows.len());
    }
    let dim = obs[0].support.dim();
    if obs.iter().any(|o| o.support.dim() != dim) {
        return Err(Error::InvalidParameter(
            "all tasks must share the input dimension".into(),
        ));
    }
    Ok((obs, counts))
}

/// Geometry that never changes during a fit: prepared supports and the
/// latent-slot expansion of each observation.
struct Prepared<'a> {
    obs: Vec<ObsRef<'a>>,
    task_counts: Vec<usize>,
    preps: Vec<PreparedSupport<'a>>,
}

impl<'a> Prepared<'a> {
    fn build(data: &'a [TaskDataset], quad_resolution: usize) -> Result<Self> {
        let (obs, task_counts) = collect_obs(data)?;
        let preps = obs
            .iter()
            .map(|o| kernels::prepare(o.support, quad_resolution))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            obs,
            task_counts,
            preps,
        })
    }
}

/// Kernel matrices for one hyperparameter state.
struct KernelCache {
    chol: Cholesky<f64, Dyn>,
    /// Per latent kernel: N_obs x M mixing-free cross Gram.
    raw_cross: Vec<DMatrix<f64>>,
    /// Per latent kernel: mixing-free prior variance of each observation
    /// support.
    raw_diag: Vec<Vec<f64>>,
}

impl KernelCache {
    fn build(model: &Model, prep: &Prepared) -> Result<Self> {
        let kuu = model.kuu()?;
        let chol = cholesky_or_err(kuu, model.jitter)?;
        let n = prep.obs.len();
        let m = model.inducing.len();
        let mut raw_cross = Vec::with_capacity(model.lmc.num_kernels());
        let mut raw_diag = Vec::with_capacity(model.lmc.num_kernels());
        for q in 0..model.lmc.num_kernels() {
            let ells = model.lmc.kernel(q).lengthscales();
            let mut cross = DMatrix::zeros(n, m);
            let mut diag = Vec::with_capacity(n);
            for (i, p) in prep.preps.iter().enumerate() {
                for (mm, z) in model.inducing.points().iter().enumerate() {
                    cross[(i, mm)] = kernels::k_prepared(p, &PreparedSupport::Point(z), ells);
                }
                diag.push(kernels::k_prepared(p, p, ells));
            }
            raw_cross.push(cross);
            raw_diag.push(diag);
        }
        Ok(Self {
            chol,
            raw_cross,
            raw_diag,
        })
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct ClampStats {
    count: usize,
    min_raw: f64,
}

impl ClampStats {
    fn new() -> Self {
        Self {
            count: 0,
            min_raw: f64::INFINITY,
        }
    }
    fn see(&mut self, raw: f64) -> f64 {
        self.min_raw = self.min_raw.min(raw);
        if raw < 0.0 {
            self.count += 1;
            0.0
        } else {
            raw
        }
    }
}

// ---------------------------------------------------------------------------
// ELBO and gradients

struct BatchEval {
    value: f64,
    grad: Option<DVector<f64>>,
}

/// Latent-row expansion of a batch: row `r` belongs to observation
/// `obs_of[r]` and latent function `slot_of[r]`.
struct LatentBatch {
    obs_idx: Vec<usize>,
    obs_of: Vec<usize>,
    slot_of: Vec<usize>,
}

impl LatentBatch {
    fn build(model: &Model, prep: &Prepared, batch: &[usize]) -> Self {
        let mut obs_of = Vec::new();
        let mut slot_of = Vec::new();
        for (pos, &n) in batch.iter().enumerate() {
            let task = prep.obs[n].task;
            for &j in model.index_map.slots_of(task) {
                obs_of.push(pos);
                slot_of.push(j);
            }
        }
        LatentBatch {
            obs_idx: batch.to_vec(),
            obs_of,
            slot_of,
        }
    }

    fn rows(&self) -> usize {
        self.slot_of.len()
    }
}

#[allow(clippy::too_many_arguments)]
fn eval_batch(
    model: &Model,
    prep: &Prepared,
    cache: &KernelCache,
    batch: &[usize],
    scales: &[f64],
    want_variational: bool,
    want_hyper: bool,
    layout: &ParamLayout,
    clamps: &mut ClampStats,
) -> Result<BatchEval> {
    let lat = LatentBatch::build(model, prep, batch);
    let b = lat.rows();
    let t = model.state.dim();
    let m = model.inducing.len();
    let q_count = model.lmc.num_kernels();
    let dims = model.lmc.input_dim();

    // K_fu rows for the batch, from the cached raw matrices.
    let mut kfu = DMatrix::zeros(b, t);
    let mut kff = vec![0.0; b];
    for r in 0..b {
        let n = lat.obs_idx[lat.obs_of[r]];
        let j = lat.slot_of[r];
        for q in 0..q_count {
            let a = model.lmc.mixing_matrix(q);
            for i in 0..a.ncols() {
                let w = a[(j, i)];
                let off = model.lmc.inducing_col(q, i, 0, m);
                for mm in 0..m {
                    kfu[(r, off + mm)] += w * cache.raw_cross[q][(n, mm)];
                }
            }
            kff[r] += model.lmc.b_entry(q, j, j) * cache.raw_diag[q][n];
        }
    }

    // a_n = K_uu^-1 k_n, marginal moments
    let a_mat = cache.chol.solve(&kfu.transpose()); // T x B
    let mean_f = a_mat.transpose() * &model.state.mu; // B
    let w_mat = model.state.l.transpose() * &a_mat; // T x B
    let mut var_f = vec![0.0; b];
    let mut var_clamped = vec![false; b];
    for r in 0..b {
        let mut v = kff[r];
        for tt in 0..t {
            v -= kfu[(r, tt)] * a_mat[(tt, r)];
            v += w_mat[(tt, r)] * w_mat[(tt, r)];
        }
        let seen = clamps.see(v);
        var_clamped[r] = seen != v;
        var_f[r] = seen;
    }

    // Expected log-likelihood per observation, and adjoints per latent row.
    let mut value = 0.0;
    let mut g_mean = vec![0.0; b];
    let mut g_var = vec![0.0; b];
    let mut g_noise: Vec<f64> = vec![0.0; model.likelihoods.len()];
    let mut r = 0;
    for (pos, &n) in lat.obs_idx.iter().enumerate() {
        let task = prep.obs[n].task;
        let kind = &model.likelihoods[task];
        let slots = kind.slots();
        let ms: Vec<f64> = (0..slots).map(|s| mean_f[r + s]).collect();
        let vs: Vec<f64> = (0..slots).map(|s| var_f[r + s]).collect();
        let w = scales[pos];
        let ell = kind.expected_loglik_with_grads(prep.obs[n].y, &ms, &vs, &model.gh)?;
        value += w * ell.value;
        for s in 0..slots {
            g_mean[r + s] = w * ell.dmean[s];
            g_var[r + s] = if var_clamped[r + s] {
                0.0
            } else {
                w * ell.dvar[s]
            };
        }
        if let Some(dn) = ell.dlog_noise {
            g_noise[task] += w * dn;
        }
        r += slots;
    }

    let kl = kl_from_chol(&model.state, &cache.chol);
    value -= kl;

    if !want_variational && !want_hyper {
        return Ok(BatchEval { value, grad: None });
    }

    let mut grad = DVector::zeros(layout.len());
    let gm = DVector::from_vec(g_mean);
    let gv = DVector::from_vec(g_var);
    let alpha = cache.chol.solve(&model.state.mu); // K^-1 mu

    // A (w gm) and A diag(w gv) A^T show up in both masks
    let a_gm = &a_mat * &gm; // T
    let mut a_scaled = a_mat.clone();
    for rr in 0..b {
        let s = gv[rr];
        for tt in 0..t {
            a_scaled[(tt, rr)] *= s;
        }
    }
    let g_s = &a_scaled * a_mat.transpose(); // T x T, symmetric

    if want_variational {
        // d/d mu
        let dmu = &a_gm - &alpha;
        for i in 0..t {
            grad[i] = dmu[i];
        }
        // d/d L = 2 G_S L - (K^-1 L - L^-T)
        let kinv_l = cache.chol.solve(&model.state.l);
        let two_gsl = 2.0 * (&g_s * &model.state.l);
        for rr in 0..t {
            for cc in 0..=rr {
                let mut g = two_gsl[(rr, cc)] - kinv_l[(rr, cc)];
                if rr == cc {
                    g += 1.0 / model.state.l[(rr, rr)];
                    g *= model.state.l[(rr, rr)]; // log-diagonal chain rule
                }
                grad[layout.idx_l(rr, cc)] = g;
            }
        }
    }

    if want_hyper {
        // u_n = K^-1 S a_n
        let p_mat = &model.state.l * &w_mat; // S a_n
        let u_mat = cache.chol.solve(&p_mat); // T x B

        // G_fu[r, :] = gm_r alpha^T + gv_r (2 u_r - 2 a_r)^T   (w folded in)
        let mut g_fu = DMatrix::zeros(b, t);
        for rr in 0..b {
            for tt in 0..t {
                g_fu[(rr, tt)] = gm[rr] * alpha[tt]
                    + gv[rr] * 2.0 * (u_mat[(tt, rr)] - a_mat[(tt, rr)]);
            }
        }

        // G_uu = -(A gm) alpha^T + G_S - U diag(gv) A^T - A diag(gv) U^T
        //        - 1/2 (C - C S C - alpha alpha^T)
        let mut g_uu = g_s.clone();
        for rr in 0..t {
            for cc in 0..t {
                g_uu[(rr, cc)] -= a_gm[rr] * alpha[cc];
            }
        }
        let mut u_scaled = u_mat.clone();
        for rr in 0..b {
            let s = gv[rr];
            for tt in 0..t {
                u_scaled[(tt, rr)] *= s;
            }
        }
        g_uu -= &u_scaled * a_mat.transpose();
        g_uu -= &a_scaled * u_mat.transpose();
        let c_inv = cache.chol.inverse();
        let s_cov = model.state.covariance();
        let csc = cache.chol.solve(&(&s_cov * &c_inv));
        for rr in 0..t {
            for cc in 0..t {
                g_uu[(rr, cc)] -=
                    0.5 * (c_inv[(rr, cc)] - csc[(rr, cc)] - alpha[rr] * alpha[cc]);
            }
        }

        // mixing-matrix gradients from the cached raw matrices
        for q in 0..q_count {
            let a = model.lmc.mixing_matrix(q);
            for rr in 0..b {
                let n = lat.obs_idx[lat.obs_of[rr]];
                let j = lat.slot_of[rr];
                for i in 0..a.ncols() {
                    let off = model.lmc.inducing_col(q, i, 0, m);
                    let mut acc = 0.0;
                    for mm in 0..m {
                        acc += g_fu[(rr, off + mm)] * cache.raw_cross[q][(n, mm)];
                    }
                    acc += gv[rr] * 2.0 * a[(j, i)] * cache.raw_diag[q][n];
                    grad[layout.idx_a(q, j, i)] += acc;
                }
            }
        }

        // lengthscale gradients: derivative Grams on the batch
        let unique_obs = &lat.obs_idx;
        for q in 0..q_count {
            let ells = model.lmc.kernel(q).lengthscales().to_vec();
            let a = model.lmc.mixing_matrix(q);

            // d cross / d ell and d diag / d ell on the batch rows
            let nb = unique_obs.len();
            let mut dcross = vec![DMatrix::zeros(nb, m); dims];
            let mut ddiag = vec![vec![0.0; nb]; dims];
            let mut buf = vec![0.0; dims];
            for (bi, &n) in unique_obs.iter().enumerate() {
                let pn = &prep.preps[n];
                for (mm, z) in model.inducing.points().iter().enumerate() {
                    buf.iter_mut().for_each(|x| *x = 0.0);
                    kernels::k_prepared_grad(pn, &PreparedSupport::Point(z), &ells, &mut buf);
                    for d in 0..dims {
                        dcross[d][(bi, mm)] = buf[d];
                    }
                }
                buf.iter_mut().for_each(|x| *x = 0.0);
                kernels::k_prepared_grad(pn, pn, &ells, &mut buf);
                for d in 0..dims {
                    ddiag[d][bi] = buf[d];
                }
            }

            // d K_q / d ell over the inducing points
            let mut dgram = vec![DMatrix::zeros(m, m); dims];
            for i in 0..m {
                for jj in i..m {
                    buf.iter_mut().for_each(|x| *x = 0.0);
                    kernels::k_prepared_grad(
                        &PreparedSupport::Point(&model.inducing.points()[i]),
                        &PreparedSupport::Point(&model.inducing.points()[jj]),
                        &ells,
                        &mut buf,
                    );
                    for d in 0..dims {
                        dgram[d][(i, jj)] = buf[d];
                        dgram[d][(jj, i)] = buf[d];
                    }
                }
            }

            for d in 0..dims {
                let mut acc = 0.0;
                // data-inducing term
                for rr in 0..b {
                    let bi = lat.obs_of[rr];
                    let j = lat.slot_of[rr];
                    for i in 0..a.ncols() {
                        let off = model.lmc.inducing_col(q, i, 0, m);
                        let w = a[(j, i)];
                        for mm in 0..m {
                            acc += g_fu[(rr, off + mm)] * w * dcross[d][(bi, mm)];
                        }
                    }
                    // prior-variance term
                    acc += gv[rr] * model.lmc.b_entry(q, j, j) * ddiag[d][bi];
                }
                // inducing-inducing term, one identical block per realization
                for i in 0..model.lmc.rank(q) {
                    let off = model.lmc.inducing_col(q, i, 0, m);
                    for rr in 0..m {
                        for cc in 0..m {
                            acc += g_uu[(off + rr, off + cc)] * dgram[d][(rr, cc)];
                        }
                    }
                }
                // log-lengthscale chain rule
                grad[layout.idx_ell(q, d)] = acc * ells[d];
            }
        }

        for (task, off) in layout.noise_offsets.iter().enumerate() {
            if let Some(off) = off {
                grad[*off] = g_noise[task];
            }
        }
    }

    Ok(BatchEval {
        value,
        grad: Some(grad),
    })
}

fn full_batch_scales(prep: &Prepared) -> (Vec<usize>, Vec<f64>) {
    let n = prep.obs.len();
    ((0..n).collect(), vec![1.0; n])
}

fn batch_scales(prep: &Prepared, batch: &[usize]) -> Vec<f64> {
    let tasks = prep.task_counts.len();
    let mut in_batch = vec![0usize; tasks];
    for &n in batch {
        in_batch[prep.obs[n].task] += 1;
    }
    batch
        .iter()
        .map(|&n| {
            let task = prep.obs[n].task;
            prep.task_counts[task] as f64 / in_batch[task] as f64
        })
        .collect()
}

/// Full-batch ELBO of a model on the given datasets.
pub fn elbo_full(model: &Model, data: &[TaskDataset]) -> Result<f64> {
    let prep = Prepared::build(data, model.quad_resolution)?;
    let cache = KernelCache::build(model, &prep)?;
    let (batch, scales) = full_batch_scales(&prep);
    let layout = ParamLayout::for_model(model);
    let mut clamps = ClampStats::new();
    Ok(eval_batch(
        model, &prep, &cache, &batch, &scales, false, false, &layout, &mut clamps,
    )?
    .value)
}

/// Minibatch ELBO estimate: per-task expected log-likelihoods are rescaled
/// by `N_d / (batch rows of task d)`; the KL term enters in full.
pub fn elbo_minibatch(model: &Model, data: &[TaskDataset], batch: &[usize]) -> Result<f64> {
    let prep = Prepared::build(data, model.quad_resolution)?;
    if batch.is_empty() || batch.iter().any(|&n| n >= prep.obs.len()) {
        return Err(Error::IndexOutOfRange(
            "minibatch indices out of range".into(),
        ));
    }
    let cache = KernelCache::build(model, &prep)?;
    let scales = batch_scales(&prep, batch);
    let layout = ParamLayout::for_model(model);
    let mut clamps = ClampStats::new();
    Ok(eval_batch(
        model, &prep, &cache, batch, &scales, false, false, &layout, &mut clamps,
    )?
    .value)
}

/// Full-batch ELBO and its gradient in the flat layout of
/// [`ParamLayout::for_model`].
pub fn elbo_with_gradients(model: &Model, data: &[TaskDataset]) -> Result<(f64, DVector<f64>)> {
    let prep = Prepared::build(data, model.quad_resolution)?;
    let cache = KernelCache::build(model, &prep)?;
    let (batch, scales) = full_batch_scales(&prep);
    let layout = ParamLayout::for_model(model);
    let mut clamps = ClampStats::new();
    let eval = eval_batch(
        model, &prep, &cache, &batch, &scales, true, true, &layout, &mut clamps,
    )?;
    Ok((eval.value, eval.grad.expect("gradient requested")))
}

/// Marginal moments of `q(f)` at arbitrary (task, support) rows.
pub fn qf_marginals(rows: &[(usize, &Support)], model: &Model) -> Result<QfMarginals> {
    let mut latent_rows = Vec::new();
    for (task, s) in rows {
        if *task >= model.likelihoods.len() {
            return Err(Error::IndexOutOfRange(format!(
                "task {task} out of range ({} tasks)",
                model.likelihoods.len()
            )));
        }
        if s.dim() != model.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.input_dim(),
                found: s.dim(),
            });
        }
        for &j in model.index_map.slots_of(*task) {
            latent_rows.push((j, *s));
        }
    }
    let kfu = lmc::build_kfu(
        &latent_rows,
        &model.inducing,
        &model.lmc,
        model.quad_resolution,
    )?;
    let kff = lmc::kff_diag(&latent_rows, &model.lmc, model.quad_resolution)?;
    let kuu = model.kuu()?;
    let chol = cholesky_or_err(kuu, model.jitter)?;

    let a_mat = chol.solve(&kfu.transpose());
    let mean_all = a_mat.transpose() * model.state.mu();
    let w_mat = model.state.chol_factor().transpose() * &a_mat;

    let mut clamps = ClampStats::new();
    let mut mean = Vec::with_capacity(rows.len());
    let mut var = Vec::with_capacity(rows.len());
    let mut r = 0;
    for (task, _) in rows {
        let slots = model.likelihoods[*task].slots();
        let mut ms = Vec::with_capacity(slots);
        let mut vs = Vec::with_capacity(slots);
        for _ in 0..slots {
            let mut v = kff[r];
            for tt in 0..model.state.dim() {
                v -= kfu[(r, tt)] * a_mat[(tt, r)];
                v += w_mat[(tt, r)] * w_mat[(tt, r)];
            }
            ms.push(mean_all[r]);
            vs.push(clamps.see(v));
            r += 1;
        }
        mean.push(ms);
        var.push(vs);
    }
    Ok(QfMarginals {
        mean,
        var,
        clamped: clamps.count,
        min_raw_variance: if clamps.min_raw.is_finite() {
            clamps.min_raw
        } else {
            0.0
        },
    })
}

// ---------------------------------------------------------------------------
// Training loop

/// One recorded optimization step: the minibatch ELBO estimate at the point
/// where the gradient was taken. Step indices count E-steps first, then
/// M-steps, within each cycle.
#[derive(Debug, Clone, Copy)]
pub struct TraceStep {
    pub cycle: usize,
    pub step: usize,
    pub elbo: f64,
}

/// Output of [`fit`].
#[derive(Debug)]
pub struct FitResult {
    pub model: Model,
    pub trace: Vec<TraceStep>,
    /// Full-batch ELBO at the end of each cycle.
    pub cycle_elbo: Vec<f64>,
    pub initial_elbo: f64,
    pub final_elbo: f64,
    pub clamped_variances: usize,
    pub min_raw_variance: f64,
}

/// Per-task queues that hand out stratified minibatches, reshuffling each
/// exhausted queue (an epoch) deterministically.
struct BatchSampler {
    queues: Vec<Vec<usize>>,
    pos: Vec<usize>,
    per_task: Vec<usize>,
    full: Option<Vec<usize>>,
}

impl BatchSampler {
    fn new(prep: &Prepared, minibatch: usize, rng: &mut ChaCha12Rng) -> Self {
        let n: usize = prep.task_counts.iter().sum();
        if minibatch >= n {
            return Self {
                queues: Vec::new(),
                pos: Vec::new(),
                per_task: Vec::new(),
                full: Some((0..n).collect()),
            };
        }
        let mut queues = Vec::with_capacity(prep.task_counts.len());
        let mut start = 0;
        let mut per_task = Vec::with_capacity(prep.task_counts.len());
        for &count in &prep.task_counts {
            let mut q: Vec<usize> = (start..start + count).collect();
            q.shuffle(rng);
            queues.push(q);
            start += count;
            let share = (minibatch as f64 * count as f64 / n as f64).round() as usize;
            per_task.push(share.clamp(1, count));
        }
        Self {
            queues,
            pos: vec![0; prep.task_counts.len()],
            per_task,
            full: None,
        }
    }

    fn next(&mut self, rng: &mut ChaCha12Rng) -> Vec<usize> {
        if let Some(full) = &self.full {
            return full.clone();
        }
        let mut batch = Vec::new();
        for task in 0..self.queues.len() {
            let want = self.per_task[task];
            let mut got = 0;
            while got < want {
                if self.pos[task] == self.queues[task].len() {
                    self.queues[task].shuffle(rng);
                    self.pos[task] = 0;
                }
                batch.push(self.queues[task][self.pos[task]]);
                self.pos[task] += 1;
                got += 1;
            }
        }
        batch
    }
}

/// Variational-EM training: alternates `e_steps` Adam updates of
/// `(mu, L)` with `m_steps` Adam updates of the hyperparameters per cycle,
/// drawing a fresh stratified minibatch per update, until the cycle budget
/// or the relative full-batch ELBO change drops below the tolerance.
pub fn fit(data: &[TaskDataset], config: &TrainConfig, spec: &ModelSpec) -> Result<FitResult> {
    config.validate()?;
    let (obs, _) = collect_obs(data)?;
    let dim = obs[0].support.dim();
    drop(obs);
    if spec.kernels.is_empty() || spec.kernels.len() != spec.ranks.len() {
        return Err(Error::InvalidParameter(
            "model spec needs one rank per kernel".into(),
        ));
    }
    if spec.kernels.iter().any(|k| k.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: spec.kernels[0].dim(),
        });
    }
    if spec.inducing.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: spec.inducing.dim(),
        });
    }

    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let slots: Vec<usize> = data.iter().map(|d| d.likelihood.slots()).collect();
    let index_map = LatentIndexMap::from_slot_counts(&slots)?;
    let j = index_map.total();
    let lmc_params = match &spec.mixing_init {
        MixingInit::RandomNormal => {
            LmcParams::with_random_mixing(spec.kernels.clone(), j, &spec.ranks, &mut rng)?
        }
        MixingInit::Fixed(mixing) => LmcParams::new(spec.kernels.clone(), mixing.clone())?,
    };
    let kuu = lmc::build_kuu(&spec.inducing, &lmc_params, spec.jitter)?;
    let state = VariationalState::prior(&kuu)?;
    let mut model = Model {
        lmc: lmc_params,
        likelihoods: data.iter().map(|d| d.likelihood.clone()).collect(),
        index_map,
        inducing: spec.inducing.clone(),
        state,
        quad_resolution: spec.quad_resolution,
        jitter: spec.jitter,
        gh: GaussHermiteRule::new(spec.gh_order)?,
    };

    let prep = Prepared::build(data, model.quad_resolution)?;
    let mut cache = KernelCache::build(&model, &prep)?;
    let layout = ParamLayout::for_model(&model);
    let mut params = layout.pack(&model);
    let var_mask = layout.variational_mask();
    let hyp_mask = layout.hyper_mask();
    let adam_cfg = AdamParams::from(config);
    let mut e_moments = AdamMoments::new(layout.len());
    let mut m_moments = AdamMoments::new(layout.len());
    let mut sampler = BatchSampler::new(&prep, config.minibatch, &mut rng);
    let mut clamps = ClampStats::new();

    let (full_idx, full_scales) = full_batch_scales(&prep);
    let initial_elbo = eval_batch(
        &model,
        &prep,
        &cache,
        &full_idx,
        &full_scales,
        false,
        false,
        &layout,
        &mut clamps,
    )?
    .value;

    let mut trace = Vec::new();
    let mut cycle_elbo = Vec::new();
    let mut prev = initial_elbo;
    'outer: for cycle in 0..config.cycles {
        for step in 0..config.e_steps + config.m_steps {
            let e_phase = step < config.e_steps;
            if !e_phase && step > config.e_steps {
                // previous M update changed the hyperparameters
                cache = KernelCache::build(&model, &prep)?;
            }
            let batch = sampler.next(&mut rng);
            let scales = batch_scales(&prep, &batch);
            let eval = eval_batch(
                &model,
                &prep,
                &cache,
                &batch,
                &scales,
                e_phase,
                !e_phase,
                &layout,
                &mut clamps,
            )?;
            let grad = eval.grad.expect("gradient requested");
            if !eval.value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteElbo {
                    cycle,
                    step,
                    value: eval.value,
                    param_norm: params.norm(),
                });
            }
            trace.push(TraceStep {
                cycle,
                step,
                elbo: eval.value,
            });
            if e_phase {
                adam_step(&mut params, &grad, &mut e_moments, &adam_cfg, Some(&var_mask));
            } else {
                adam_step(&mut params, &grad, &mut m_moments, &adam_cfg, Some(&hyp_mask));
            }
            layout.apply(&mut model, &params)?;
        }
        if config.m_steps > 0 {
            cache = KernelCache::build(&model, &prep)?;
        }
        let full = eval_batch(
            &model,
            &prep,
            &cache,
            &full_idx,
            &full_scales,
            false,
            false,
            &layout,
            &mut clamps,
        )?
        .value;
        if !full.is_finite() {
            return Err(Error::NonFiniteElbo {
                cycle,
                step: config.e_steps + config.m_steps,
                value: full,
                param_norm: params.norm(),
            });
        }
        cycle_elbo.push(full);
        let done = (full - prev).abs() <= config.tolerance * full.abs().max(1.0);
        prev = full;
        if done {
            break 'outer;
        }
    }

    let final_elbo = prev;
    Ok(FitResult {
        model,
        trace,
        cycle_elbo,
        initial_elbo,
        final_elbo,
        clamped_variances: clamps.count,
        min_raw_variance: if clamps.min_raw.is_finite() {
            clamps.min_raw
        } else {
            0.0
        },
    })
}
