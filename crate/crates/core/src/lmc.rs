//! Linear model of coregionalisation over supports.
//!
//! Each latent parameter function (indexed by a row `j` of the mixing
//! matrices) is a weighted combination of `Q` independent latent GPs, each
//! sampled `R_q` times. Task covariances integrate the latent kernels over
//! the observation supports; inducing variables live at the latent-process
//! level, so their covariance is block diagonal.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernels::{self, EqParams, PreparedSupport};
use crate::supports::Support;

/// Default jitter added to the diagonal of `K_uu`.
pub const DEFAULT_JITTER: f64 = 1e-6;

/// Kernel and mixing hyperparameters of the coregionalisation model.
///
/// `mixing[q]` is the `J x R_q` matrix `A_q`; the coregionalisation matrix
/// `B_q = A_q A_q^T` is positive semidefinite by construction.
#[derive(Debug, Clone)]
pub struct LmcParams {
    kernels: Vec<EqParams>,
    mixing: Vec<DMatrix<f64>>,
}

impl LmcParams {
    pub fn new(kernels: Vec<EqParams>, mixing: Vec<DMatrix<f64>>) -> Result<Self> {
        if kernels.is_empty() {
            return Err(Error::InvalidParameter(
                "at least one latent kernel required".into(),
            ));
        }
        if kernels.len() != mixing.len() {
            return Err(Error::InvalidParameter(format!(
                "{} kernels but {} mixing matrices",
                kernels.len(),
                mixing.len()
            )));
        }
        let dim = kernels[0].dim();
        if kernels.iter().any(|k| k.dim() != dim) {
            return Err(Error::InvalidParameter(
                "latent kernels must share the input dimension".into(),
            ));
        }
        let j = mixing[0].nrows();
        for (q, a) in mixing.iter().enumerate() {
            if a.nrows() != j {
                return Err(Error::InvalidParameter(format!(
                    "mixing matrix {q} has {} rows, expected {j}",
                    a.nrows()
                )));
            }
            if a.ncols() == 0 || j == 0 {
                return Err(Error::InvalidParameter(format!(
                    "mixing matrix {q} must be non-empty"
                )));
            }
        }
        Ok(Self { kernels, mixing })
    }

    /// Mixing entries drawn i.i.d. from `N(0, 0.5^2)`.
    pub fn with_random_mixing<R: Rng>(
        kernels: Vec<EqParams>,
        latent_functions: usize,
        ranks: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if ranks.len() != kernels.len() {
            return Err(Error::InvalidParameter(
                "one rank per latent kernel required".into(),
            ));
        }
        let normal = Normal::new(0.0, 0.5).expect("valid normal");
        let mixing = ranks
            .iter()
            .map(|&r| DMatrix::from_fn(latent_functions, r.max(1), |_, _| normal.sample(rng)))
            .collect();
        Self::new(kernels, mixing)
    }

    /// Number of latent kernels `Q`.
    pub fn num_kernels(&self) -> usize {
        self.kernels.len()
    }

    /// Number of latent parameter functions `J` (rows of each `A_q`).
    pub fn latent_functions(&self) -> usize {
        self.mixing[0].nrows()
    }

    /// Number of realizations `R_q` of latent kernel `q`.
    pub fn rank(&self, q: usize) -> usize {
        self.mixing[q].ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.kernels[0].dim()
    }

    pub fn kernel(&self, q: usize) -> &EqParams {
        &self.kernels[q]
    }

    pub fn mixing_matrix(&self, q: usize) -> &DMatrix<f64> {
        &self.mixing[q]
    }

    /// `B_q = A_q A_q^T`.
    pub fn coregionalisation(&self, q: usize) -> DMatrix<f64> {
        &self.mixing[q] * self.mixing[q].transpose()
    }

    /// `b^q_{j,j'} = sum_i A_q[j,i] A_q[j',i]`.
    pub fn b_entry(&self, q: usize, j: usize, jp: usize) -> f64 {
        self.mixing[q].row(j).dot(&self.mixing[q].row(jp))
    }

    /// Total inducing dimension `T = M * sum_q R_q`.
    pub fn inducing_dim(&self, m: usize) -> usize {
        m * self.mixing.iter().map(|a| a.ncols()).sum::<usize>()
    }

    /// Flat column index of inducing variable `(q, i, m)` with `M` points.
    pub fn inducing_col(&self, q: usize, i: usize, m_idx: usize, m: usize) -> usize {
        let before: usize = self.mixing[..q].iter().map(|a| a.ncols()).sum();
        (before + i) * m + m_idx
    }

    pub(crate) fn kernel_mut(&mut self, q: usize) -> &mut EqParams {
        &mut self.kernels[q]
    }

    pub(crate) fn mixing_mut(&mut self, q: usize) -> &mut DMatrix<f64> {
        &mut self.mixing[q]
    }

    fn check_slot(&self, j: usize) -> Result<()> {
        if j >= self.latent_functions() {
            return Err(Error::IndexOutOfRange(format!(
                "latent slot {j} out of range (J = {})",
                self.latent_functions()
            )));
        }
        Ok(())
    }
}

/// Inducing inputs shared by every latent function; fixed after
/// initialization.
#[derive(Debug, Clone)]
pub struct InducingSet {
    points: Vec<Vec<f64>>,
}

impl InducingSet {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidParameter(
                "inducing set must contain at least one point".into(),
            ));
        }
        let dim = points[0].len();
        if dim == 0 || points.iter().any(|z| z.len() != dim) {
            return Err(Error::InvalidParameter(
                "inducing points must share a positive dimension".into(),
            ));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }
}

/// Maps (task, slot-within-task) to a row `j` of the mixing matrices.
/// Gaussian and Poisson tasks occupy one slot; heteroscedastic-Gaussian
/// tasks occupy two (mean and log-variance).
#[derive(Debug, Clone)]
pub struct LatentIndexMap {
    per_task: Vec<Vec<usize>>,
    owner: Vec<(usize, usize)>,
}

impl LatentIndexMap {
    pub fn from_slot_counts(slots_per_task: &[usize]) -> Result<Self> {
        if slots_per_task.is_empty() || slots_per_task.iter().any(|&s| s == 0) {
            return Err(Error::InvalidParameter(
                "every task needs at least one latent slot".into(),
            ));
        }
        let mut per_task = Vec::with_capacity(slots_per_task.len());
        let mut owner = Vec::new();
        let mut next = 0;
        for (task, &count) in slots_per_task.iter().enumerate() {
            let mut slots = Vec::with_capacity(count);
            for s in 0..count {
                slots.push(next);
                owner.push((task, s));
                next += 1;
            }
            per_task.push(slots);
        }
        Ok(Self { per_task, owner })
    }

    pub fn slot(&self, task: usize, slot_in_task: usize) -> usize {
        self.per_task[task][slot_in_task]
    }

    pub fn slots_of(&self, task: usize) -> &[usize] {
        &self.per_task[task]
    }

    /// Total latent parameter functions `J`.
    pub fn total(&self) -> usize {
        self.owner.len()
    }

    pub fn owner(&self, j: usize) -> (usize, usize) {
        self.owner[j]
    }

    pub fn num_tasks(&self) -> usize {
        self.per_task.len()
    }
}

/// Cross-covariance between latent slots `j` and `jp` at supports `s`, `sp`:
/// `sum_q B_q[j, jp] * k_q(s, sp)`.
pub fn cov_ff(
    j: usize,
    jp: usize,
    s: &Support,
    sp: &Support,
    params: &LmcParams,
    quad_resolution: usize,
) -> Result<f64> {
    params.check_slot(j)?;
    params.check_slot(jp)?;
    let mut acc = 0.0;
    for q in 0..params.num_kernels() {
        acc += params.b_entry(q, j, jp)
            * kernels::k_support(s, sp, params.kernel(q), quad_resolution)?;
    }
    Ok(acc)
}

/// Full prior Gram over a list of (latent slot, support) rows.
pub fn cov_ff_gram(
    rows: &[(usize, &Support)],
    params: &LmcParams,
    quad_resolution: usize,
) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let mut prepared = Vec::with_capacity(n);
    for (j, s) in rows {
        params.check_slot(*j)?;
        if s.dim() != params.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: params.input_dim(),
                found: s.dim(),
            });
        }
        prepared.push(kernels::prepare(s, quad_resolution)?);
    }
    let mut gram = DMatrix::zeros(n, n);
    for q in 0..params.num_kernels() {
        let ells = params.kernel(q).lengthscales();
        for a in 0..n {
            for b in a..n {
                let k = kernels::k_prepared(&prepared[a], &prepared[b], ells);
                let v = params.b_entry(q, rows[a].0, rows[b].0) * k;
                gram[(a, b)] += v;
                if a != b {
                    gram[(b, a)] += v;
                }
            }
        }
    }
    Ok(gram)
}

/// Block-diagonal inducing covariance: one `M x M` Gram of `k_q` per
/// realization `(q, i)`, identical across `i` for fixed `q`, with
/// `jitter` added to the diagonal.
pub fn build_kuu(z: &InducingSet, params: &LmcParams, jitter: f64) -> Result<DMatrix<f64>> {
    if z.dim() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            found: z.dim(),
        });
    }
    let m = z.len();
    let t = params.inducing_dim(m);
    let mut kuu = DMatrix::zeros(t, t);
    for q in 0..params.num_kernels() {
        let gram = latent_gram(z, params.kernel(q), jitter)?;
        for i in 0..params.rank(q) {
            let off = params.inducing_col(q, i, 0, m);
            kuu.view_mut((off, off), (m, m)).copy_from(&gram);
        }
    }
    Ok(kuu)
}

/// `M x M` Gram of one latent kernel over the inducing inputs.
pub(crate) fn latent_gram(z: &InducingSet, kernel: &EqParams, jitter: f64) -> Result<DMatrix<f64>> {
    let m = z.len();
    let mut gram = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            let k = kernels::k_point(&z.points()[a], &z.points()[b], kernel)?;
            gram[(a, b)] = k;
            gram[(b, a)] = k;
        }
    }
    for a in 0..m {
        gram[(a, a)] += jitter;
    }
    Ok(gram)
}

/// Data-to-inducing cross covariance. Row `n` (slot `j`, support `s`) and
/// column `(q, i, m)` hold `A_q[j, i] * k_q(s, z_m)`.
pub fn build_kfu(
    rows: &[(usize, &Support)],
    z: &InducingSet,
    params: &LmcParams,
    quad_resolution: usize,
) -> Result<DMatrix<f64>> {
    let m = z.len();
    let t = params.inducing_dim(m);
    let mut kfu = DMatrix::zeros(rows.len(), t);
    for q in 0..params.num_kernels() {
        let raw = raw_cross_gram(rows, z, params.kernel(q), quad_resolution)?;
        for i in 0..params.rank(q) {
            let off = params.inducing_col(q, i, 0, m);
            for (n, (j, _)) in rows.iter().enumerate() {
                params.check_slot(*j)?;
                let a = params.mixing_matrix(q)[(*j, i)];
                for mm in 0..m {
                    kfu[(n, off + mm)] = a * raw[(n, mm)];
                }
            }
        }
    }
    Ok(kfu)
}

/// Raw (mixing-free) `N x M` cross Gram of one latent kernel between data
/// supports and inducing points.
pub(crate) fn raw_cross_gram(
    rows: &[(usize, &Support)],
    z: &InducingSet,
    kernel: &EqParams,
    quad_resolution: usize,
) -> Result<DMatrix<f64>> {
    let mut raw = DMatrix::zeros(rows.len(), z.len());
    for (n, (_, s)) in rows.iter().enumerate() {
        if s.dim() != kernel.dim() {
            return Err(Error::DimensionMismatch {
                expected: kernel.dim(),
                found: s.dim(),
            });
        }
        let prep = kernels::prepare(s, quad_resolution)?;
        for (mm, zp) in z.points().iter().enumerate() {
            raw[(n, mm)] = kernels::k_prepared(
                &prep,
                &PreparedSupport::Point(zp),
                kernel.lengthscales(),
            );
        }
    }
    Ok(raw)
}

/// Prior variances `cov_ff(j_n, j_n, s_n, s_n)` for each row.
pub fn kff_diag(
    rows: &[(usize, &Support)],
    params: &LmcParams,
    quad_resolution: usize,
) -> Result<Vec<f64>> {
    let mut diag = Vec::with_capacity(rows.len());
    for (j, s) in rows {
        diag.push(cov_ff(*j, *j, s, s, params, quad_resolution)?);
    }
    Ok(diag)
}

/// A finite set of points standing in for a support: observations are means
/// over the bag rather than integral averages.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    points: Vec<Vec<f64>>,
}

impl Bag {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyBag);
        }
        let dim = points[0].len();
        if dim == 0 || points.iter().any(|x| x.len() != dim) {
            return Err(Error::InvalidParameter(
                "bag points must share a positive dimension".into(),
            ));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }
}

/// Bag analogue of [`cov_ff`]: the double integral average becomes the
/// empirical mean of the point kernel over both bags.
pub fn bag_cov_ff(j: usize, jp: usize, a: &Bag, b: &Bag, params: &LmcParams) -> Result<f64> {
    params.check_slot(j)?;
    params.check_slot(jp)?;
    let mut acc = 0.0;
    for q in 0..params.num_kernels() {
        let mut sum = 0.0;
        for xa in a.points() {
            for xb in b.points() {
                sum += kernels::k_point(xa, xb, params.kernel(q))?;
            }
        }
        acc += params.b_entry(q, j, jp) * sum / (a.len() * b.len()) as f64;
    }
    Ok(acc)
}

/// Bag analogue of [`build_kfu`].
pub fn bag_kfu(
    rows: &[(usize, &Bag)],
    z: &InducingSet,
    params: &LmcParams,
) -> Result<DMatrix<f64>> {
    let m = z.len();
    let t = params.inducing_dim(m);
    let mut kfu = DMatrix::zeros(rows.len(), t);
    for q in 0..params.num_kernels() {
        for (n, (j, bag)) in rows.iter().enumerate() {
            params.check_slot(*j)?;
            for (mm, zp) in z.points().iter().enumerate() {
                let mut sum = 0.0;
                for x in bag.points() {
                    sum += kernels::k_point(x, zp, params.kernel(q))?;
                }
                let mean = sum / bag.len() as f64;
                for i in 0..params.rank(q) {
                    let col = params.inducing_col(q, i, mm, m);
                    kfu[(n, col)] += params.mixing_matrix(q)[(*j, i)] * mean;
                }
            }
        }
    }
    Ok(kfu)
}

/// Bag analogue of [`kff_diag`].
pub fn bag_kff_diag(rows: &[(usize, &Bag)], params: &LmcParams) -> Result<Vec<f64>> {
    rows.iter()
        .map(|(j, bag)| bag_cov_ff(*j, *j, bag, bag, params))
        .collect()
}
