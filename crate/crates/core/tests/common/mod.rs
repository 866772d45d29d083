// SPDX-License-Identifier: Apache-2.0

//! Independent reference computations for the integration and acceptance
//! tests: brute-force Gaussian conditioning for the smoother, and generic
//! derivative-free optimizers for the M-step checks.
#![allow(dead_code)]

use hdgm_core::StateSpaceInputs;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, ridge: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| normal(rng));
    &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * ridge
}

/// A small random state-space problem with owned data.
#[derive(Debug, Clone)]
pub struct Instance {
    pub y: DMatrix<f64>,
    pub design: Vec<DMatrix<f64>>,
    pub beta: DVector<f64>,
    pub alpha: f64,
    pub g: f64,
    pub sigma_eta: DMatrix<f64>,
    pub sigma2: Vec<f64>,
    pub mu0: DVector<f64>,
    pub sigma0: DMatrix<f64>,
}

impl Instance {
    pub fn inputs(&self) -> StateSpaceInputs<'_> {
        StateSpaceInputs {
            y: &self.y,
            design: &self.design,
            beta: &self.beta,
            alpha: self.alpha,
            g: self.g,
            sigma_eta: &self.sigma_eta,
            sigma2_eps: &self.sigma2,
            mu0: &self.mu0,
            sigma0: &self.sigma0,
        }
    }
}

/// Random instance with heteroskedastic noise; each entry is missing with
/// probability `miss`.
pub fn random_instance(rng: &mut ChaCha8Rng, n: usize, t_len: usize, p: usize, miss: f64) -> Instance {
    let design: Vec<DMatrix<f64>> = (0..t_len).map(|_| DMatrix::from_fn(n, p, |_, _| normal(rng))).collect();
    let y = DMatrix::from_fn(n, t_len, |_, _| {
        if rng.random::<f64>() < miss {
            f64::NAN
        } else {
            2.0 * normal(rng)
        }
    });
    Instance {
        y,
        design,
        beta: DVector::from_fn(p, |_, _| normal(rng)),
        alpha: rng.random_range(0.3..1.5),
        g: rng.random_range(-0.9..0.95),
        sigma_eta: random_spd(rng, n, 0.2),
        sigma2: (0..t_len).map(|_| rng.random_range(0.2..2.0)).collect(),
        mu0: DVector::from_fn(n, |_, _| normal(rng)),
        sigma0: random_spd(rng, n, 0.3),
    }
}

/// Moments of `(z_0, ..., z_T)` given the observed responses, obtained by
/// writing every quantity as a linear map of independent Gaussians and
/// conditioning the joint distribution directly.
pub struct JointPosterior {
    pub n: usize,
    pub t_len: usize,
    /// Stacked mean of `z_0..z_T` (length `n (T+1)`).
    pub mean: DVector<f64>,
    /// Stacked covariance.
    pub cov: DMatrix<f64>,
    pub loglik: f64,
}

impl JointPosterior {
    pub fn state(&self, t: usize) -> DVector<f64> {
        self.mean.rows(t * self.n, self.n).into_owned()
    }

    pub fn cov_block(&self, s: usize, t: usize) -> DMatrix<f64> {
        self.cov.view((s * self.n, t * self.n), (self.n, self.n)).into_owned()
    }
}

pub fn joint_posterior(inst: &Instance) -> JointPosterior {
    let n = inst.y.nrows();
    let t_len = inst.y.ncols();
    // independent sources: z0 (n), eta_1..eta_T (nT), eps_1..eps_T (nT)
    let k = n * (2 * t_len + 1);
    let mut src_mean = DVector::zeros(k);
    let mut src_cov = DMatrix::zeros(k, k);
    src_mean.rows_mut(0, n).copy_from(&inst.mu0);
    src_cov.view_mut((0, 0), (n, n)).copy_from(&inst.sigma0);
    for t in 0..t_len {
        let o = n + t * n;
        src_cov.view_mut((o, o), (n, n)).copy_from(&inst.sigma_eta);
        let e = n + n * t_len + t * n;
        for i in 0..n {
            src_cov[(e + i, e + i)] = inst.sigma2[t];
        }
    }
    // z_t = g^t z0 + sum_{s<=t} g^{t-s} eta_s
    let nz = n * (t_len + 1);
    let mut lz = DMatrix::zeros(nz, k);
    for t in 0..=t_len {
        for i in 0..n {
            lz[(t * n + i, i)] = inst.g.powi(t as i32);
            for s in 1..=t {
                lz[(t * n + i, n + (s - 1) * n + i)] = inst.g.powi((t - s) as i32);
            }
        }
    }
    // observed y entries: y_t,i = x'beta + alpha z_t,i + eps_t,i
    let mut rows = Vec::new();
    let mut offsets = Vec::new();
    let mut values = Vec::new();
    for t in 0..t_len {
        for i in 0..n {
            let v = inst.y[(i, t)];
            if v.is_finite() {
                let mut r = DVector::zeros(k);
                r += lz.row(t * n + n + i).transpose() * inst.alpha;
                r[n + n * t_len + t * n + i] = 1.0;
                rows.push(r);
                offsets.push(inst.design[t].row(i).transpose().dot(&inst.beta));
                values.push(v);
            }
        }
    }
    let z_mean = &lz * &src_mean;
    let z_cov = &lz * &src_cov * lz.transpose();
    if rows.is_empty() {
        return JointPosterior {
            n,
            t_len,
            mean: z_mean,
            cov: z_cov,
            loglik: 0.0,
        };
    }
    let m = rows.len();
    let ly = DMatrix::from_fn(m, k, |r, c| rows[r][c]);
    let y_mean = &ly * &src_mean + DVector::from_vec(offsets);
    let y_cov = &ly * &src_cov * ly.transpose();
    let zy = &lz * &src_cov * ly.transpose();
    let y_inv = y_cov.clone().try_inverse().expect("observation covariance invertible");
    let resid = DVector::from_vec(values) - &y_mean;
    let gain = &zy * &y_inv;
    let mean = z_mean + &gain * &resid;
    let cov = z_cov - &gain * zy.transpose();
    let det = y_cov.determinant();
    let loglik = -0.5 * (m as f64 * (2.0 * std::f64::consts::PI).ln() + det.ln() + resid.dot(&(&y_inv * &resid)));
    JointPosterior {
        n,
        t_len,
        mean,
        cov,
        loglik,
    }
}

/// Nelder-Mead minimization with restarts from the best point.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], step: f64, restarts: usize) -> (Vec<f64>, f64) {
    let d = x0.len();
    let mut best = x0.to_vec();
    let mut fbest = f(&best);
    let mut scale = step;
    for _ in 0..=restarts {
        let mut simplex: Vec<Vec<f64>> = vec![best.clone()];
        for j in 0..d {
            let mut v = best.clone();
            v[j] += scale;
            simplex.push(v);
        }
        let mut fs: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
        for _ in 0..20_000 * d {
            let mut idx: Vec<usize> = (0..=d).collect();
            idx.sort_by(|&a, &b| fs[a].total_cmp(&fs[b]));
            simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
            fs = idx.iter().map(|&i| fs[i]).collect();
            let spread = (fs[d] - fs[0]).abs();
            let size = simplex.iter().skip(1).map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)).fold(0.0, f64::max);
            if spread < 1e-15 * (1.0 + fs[0].abs()) && size < 1e-10 {
                break;
            }
            let centroid: Vec<f64> = (0..d).map(|j| simplex[..d].iter().map(|v| v[j]).sum::<f64>() / d as f64).collect();
            let along = |c: f64| -> Vec<f64> { (0..d).map(|j| centroid[j] + c * (simplex[d][j] - centroid[j])).collect() };
            let xr = along(-1.0);
            let fr = f(&xr);
            if fr < fs[0] {
                let xe = along(-2.0);
                let fe = f(&xe);
                if fe < fr {
                    simplex[d] = xe;
                    fs[d] = fe;
                } else {
                    simplex[d] = xr;
                    fs[d] = fr;
                }
            } else if fr < fs[d - 1] {
                simplex[d] = xr;
                fs[d] = fr;
            } else {
                let (xc, fc) = if fr < fs[d] {
                    let x = along(-0.5);
                    let v = f(&x);
                    (x, v)
                } else {
                    let x = along(0.5);
                    let v = f(&x);
                    (x, v)
                };
                if fc < fs[d].min(fr) {
                    simplex[d] = xc;
                    fs[d] = fc;
                } else {
                    for i in 1..=d {
                        simplex[i] = (0..d).map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j])).collect();
                        fs[i] = f(&simplex[i]);
                    }
                }
            }
        }
        let i = (0..=d).min_by(|&a, &b| fs[a].total_cmp(&fs[b])).expect("non-empty");
        if fs[i] <= fbest {
            best = simplex[i].clone();
            fbest = fs[i];
        }
        scale *= 0.1;
    }
    (best, fbest)
}

/// Minimize a unimodal function on `[lo, hi]` by ternary bracketing.
pub fn ternary_min<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..300 {
        let a = lo + (hi - lo) / 3.0;
        let b = hi - (hi - lo) / 3.0;
        if f(a) < f(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    0.5 * (lo + hi)
}

/// Grid minimizer over `points` log-spaced values in `[lo, hi]`.
pub fn log_grid_min<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, points: usize) -> f64 {
    let (a, b) = (lo.ln(), hi.ln());
    (0..points)
        .map(|k| (a + (b - a) * k as f64 / (points - 1) as f64).exp())
        .map(|x| (x, f(x)))
        .min_by(|p, q| p.1.total_cmp(&q.1))
        .expect("non-empty grid")
        .0
}
