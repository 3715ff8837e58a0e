//! Shared oracles for the integration suites. Everything here is computed
//! independently of the library's kernel code: Gauss-Legendre rules come
//! from Newton iteration on the Legendre recurrence, and erf from
//! quadrature of its defining integral.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use aggp::data::TaskDataset;
use aggp::inference::{elbo_full, elbo_with_gradients, Model, ParamLayout, VariationalState};
use aggp::kernels::EqParams;
use aggp::likelihoods::GaussHermiteRule;
use aggp::lmc::{build_kuu, InducingSet, LatentIndexMap, LmcParams};
use aggp::supports::Support;
use nalgebra::DMatrix;

const SQRT_PI: f64 = 1.772453850905516027298;

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Chebyshev initial guess, then Newton on P_n
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let pk = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = pk;
            }
            let pn = if n == 1 { x } else { p1 };
            let pn_prev = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn_prev) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = x;
        nodes[n - 1 - i] = -x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// `int_a^b f` with an `n`-node Gauss-Legendre rule.
pub fn integrate_gl(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let (nodes, weights) = gauss_legendre(n);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    nodes
        .iter()
        .zip(&weights)
        .map(|(&t, &w)| w * f(mid + half * t))
        .sum::<f64>()
        * half
}

/// Double integral over `[ax, bx] x [ay, by]` with `n` nodes per axis.
pub fn double_integrate_gl(
    f: impl Fn(f64, f64) -> f64,
    ax: f64,
    bx: f64,
    ay: f64,
    by: f64,
    n: usize,
) -> f64 {
    let (nodes, weights) = gauss_legendre(n);
    let hx = 0.5 * (bx - ax);
    let mx = 0.5 * (ax + bx);
    let hy = 0.5 * (by - ay);
    let my = 0.5 * (ay + by);
    let mut acc = 0.0;
    for (tx, wx) in nodes.iter().zip(&weights) {
        let x = mx + hx * tx;
        let mut inner = 0.0;
        for (ty, wy) in nodes.iter().zip(&weights) {
            inner += wy * f(x, my + hy * ty);
        }
        acc += wx * inner;
    }
    acc * hx * hy
}

/// `int_a^b f` split into panels no wider than `max_width`.
pub fn integrate_panels(f: impl Fn(f64) -> f64 + Copy, a: f64, b: f64, max_width: f64) -> f64 {
    let panels = ((b - a) / max_width).ceil().max(1.0) as usize;
    let step = (b - a) / panels as f64;
    (0..panels)
        .map(|i| integrate_gl(f, a + i as f64 * step, a + (i + 1) as f64 * step, 32))
        .sum()
}

/// erf from its defining integral, accurate to roughly 1e-15 for |z| <= 6.
pub fn erf_oracle(z: f64) -> f64 {
    if z < 0.0 {
        return -erf_oracle(-z);
    }
    2.0 / SQRT_PI * integrate_panels(|t| (-t * t).exp(), 0.0, z, 0.5)
}

/// Sample mean and its standard error.
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
}

pub fn mc_estimate(samples: &[f64]) -> McEstimate {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
    McEstimate {
        mean,
        se: (var / n).sqrt(),
    }
}

pub fn assert_within_3se(got: f64, mc: &McEstimate, what: &str) {
    let band = 3.0 * mc.se;
    assert!(
        (got - mc.mean).abs() <= band,
        "{what}: value {got} vs MC {} +- {band}",
        mc.mean
    );
}

/// A simple polygon: a few points thrown around a center, sorted by angle
/// (star-shaped, hence non-self-intersecting).
pub fn random_polygon(rng: &mut ChaCha12Rng, center: [f64; 2], radius: f64) -> Support {
    loop {
        let n = rng.random_range(3..6);
        let mut pts: Vec<[f64; 2]> = (0..n)
            .map(|_| {
                [
                    center[0] + rng.random_range(-radius..radius),
                    center[1] + rng.random_range(-radius..radius),
                ]
            })
            .collect();
        let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n as f64;
        let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n as f64;
        pts.sort_by(|a, b| {
            let aa = (a[1] - cy).atan2(a[0] - cx);
            let ab = (b[1] - cy).atan2(b[0] - cx);
            aa.total_cmp(&ab)
        });
        if let Ok(s) = Support::polygon(pts) {
            return s;
        }
    }
}

/// Builds a model around the given datasets without training: prior
/// variational state, explicit mixing matrices, unit-variance kernels.
pub fn build_model(
    data: &[TaskDataset],
    kernels: Vec<EqParams>,
    mixing: Vec<DMatrix<f64>>,
    z: InducingSet,
    quad_resolution: usize,
) -> Model {
    let slots: Vec<usize> = data.iter().map(|d| d.likelihood.slots()).collect();
    let index_map = LatentIndexMap::from_slot_counts(&slots).unwrap();
    let lmc = LmcParams::new(kernels, mixing).unwrap();
    let jitter = 1e-6;
    let kuu = build_kuu(&z, &lmc, jitter).unwrap();
    let state = VariationalState::prior(&kuu).unwrap();
    Model {
        lmc,
        likelihoods: data.iter().map(|d| d.likelihood.clone()).collect(),
        index_map,
        inducing: z,
        state,
        quad_resolution,
        jitter,
        gh: GaussHermiteRule::new(20).unwrap(),
    }
}

/// Nudges every flat parameter by a smooth deterministic pattern so
/// gradient checks run at a generic (non-stationary) point.
pub fn perturb_params(model: &mut Model, scale: f64) {
    let layout = ParamLayout::for_model(model);
    let mut p = layout.pack(model);
    for i in 0..p.len() {
        p[i] += scale * ((i as f64 * 0.7).sin() + 0.3);
    }
    layout.apply(model, &p).unwrap();
}

/// Central finite differences on the packed parameter vector against the
/// analytic gradient; `rtol` is the spec tolerance, `step` the FD step.
pub fn check_gradients(model: &mut Model, data: &[TaskDataset], step: f64, rtol: f64) {
    let layout = ParamLayout::for_model(model);
    let (_, grad) = elbo_with_gradients(model, data).unwrap();
    let p0 = layout.pack(model);
    for i in 0..layout.len() {
        let mut up = p0.clone();
        up[i] += step;
        layout.apply(model, &up).unwrap();
        let fu = elbo_full(model, data).unwrap();
        let mut dn = p0.clone();
        dn[i] -= step;
        layout.apply(model, &dn).unwrap();
        let fd = elbo_full(model, data).unwrap();
        let fd_grad = (fu - fd) / (2.0 * step);
        let tol = 1e-6 + rtol * fd_grad.abs().max(grad[i].abs());
        assert!(
            (fd_grad - grad[i]).abs() <= tol,
            "param {i}: analytic {} vs finite difference {fd_grad}",
            grad[i]
        );
    }
    layout.apply(model, &p0).unwrap();
}

pub fn dense_log_marginal(y: &[f64], kff: &DMatrix<f64>, noise: f64) -> f64 {
    let n = y.len();
    let mut cov = kff.clone();
    for d in 0..n {
        cov[(d, d)] += noise;
    }
    let chol = nalgebra::Cholesky::new(cov).unwrap();
    let yv = nalgebra::DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let logdet: f64 = (0..n).map(|d| chol.l()[(d, d)].ln()).sum::<f64>() * 2.0;
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + yv.dot(&alpha))
}

/// A random point, box, or polygon inside roughly `[0, 1]^2`.
pub fn random_support_2d(rng: &mut ChaCha12Rng) -> Support {
    match rng.random_range(0..3) {
        0 => Support::point(vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
            .unwrap(),
        1 => {
            let lx = rng.random_range(0.0..0.7);
            let ly = rng.random_range(0.0..0.7);
            Support::axis_box(
                vec![lx, ly],
                vec![
                    lx + rng.random_range(0.05..0.3),
                    ly + rng.random_range(0.05..0.3),
                ],
            )
            .unwrap()
        }
        _ => {
            let c = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
            random_polygon(rng, c, 0.2)
        }
    }
}
