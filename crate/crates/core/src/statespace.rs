// SPDX-License-Identifier: Apache-2.0

//! Kalman filter and Rauch-Tung-Striebel smoother for the latent-field model
//!
//! ```text
//! y_t = X_t beta + alpha z_t + eps_t,   eps_t ~ N(0, sigma2_t I)
//! z_t = g z_{t-1} + eta_t,              eta_t ~ N(0, Sigma_eta)
//! z_0 ~ N(mu0, Sigma0)
//! ```
//!
//! Missing responses (NaN) are handled by dropping the unobserved rows of the
//! measurement equation at each time step.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, log_det, select, select_cols, select_vec, symmetrize_mut};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Borrowed view of everything the filter needs.
#[derive(Debug, Clone, Copy)]
pub struct StateSpaceInputs<'a> {
    /// `n x T` responses; NaN marks a missing entry.
    pub y: &'a DMatrix<f64>,
    /// One `n x p` design matrix per time step (`p` may be zero).
    pub design: &'a [DMatrix<f64>],
    pub beta: &'a DVector<f64>,
    pub alpha: f64,
    pub g: f64,
    pub sigma_eta: &'a DMatrix<f64>,
    pub sigma2_eps: &'a [f64],
    pub mu0: &'a DVector<f64>,
    pub sigma0: &'a DMatrix<f64>,
}

impl StateSpaceInputs<'_> {
    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn t_len(&self) -> usize {
        self.y.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, t_len) = (self.n(), self.t_len());
        if n == 0 {
            return Err(Error::input("state dimension must be positive"));
        }
        if self.design.len() != t_len {
            return Err(Error::input(format!(
                "expected {t_len} design matrices, got {}",
                self.design.len()
            )));
        }
        for (t, x) in self.design.iter().enumerate() {
            if x.nrows() != n || x.ncols() != self.beta.len() {
                return Err(Error::input(format!(
                    "design matrix at t={t} is {}x{}, expected {n}x{}",
                    x.nrows(),
                    x.ncols(),
                    self.beta.len()
                )));
            }
        }
        if self.sigma2_eps.len() != t_len {
            return Err(Error::input("sigma2_eps length must equal the number of time steps"));
        }
        if let Some(t) = self.sigma2_eps.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::input(format!("measurement variance at t={t} must be positive")));
        }
        if self.sigma_eta.shape() != (n, n) || self.sigma0.shape() != (n, n) || self.mu0.len() != n {
            return Err(Error::input("state covariance dimensions do not match the number of sites"));
        }
        if !self.alpha.is_finite() || !self.g.is_finite() {
            return Err(Error::input("alpha and g must be finite"));
        }
        Ok(())
    }

    /// Row indices observed at time `t` (0-based column of `y`).
    pub fn observed_rows(&self, t: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.y[(i, t)].is_finite()).collect()
    }
}

/// Filter output. Index 0 of the filtered sequences is the prior at time 0;
/// index `t` (1..=T) is time `t`. Predicted sequences have the same indexing
/// with index 0 unused (equal to the prior).
#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub predicted_means: Vec<DVector<f64>>,
    pub predicted_covs: Vec<DMatrix<f64>>,
    pub filtered_means: Vec<DVector<f64>>,
    pub filtered_covs: Vec<DMatrix<f64>>,
    /// Innovation vectors over the observed rows at each time (empty when
    /// nothing was observed). Indexed 0..T for times 1..=T.
    pub innovations: Vec<DVector<f64>>,
    pub innovation_covs: Vec<DMatrix<f64>>,
    pub loglik: f64,
}

#[derive(Debug, Clone)]
pub struct SmootherOutput {
    /// Smoothed means `z_t^T` for t = 1..=T (index 0 is t = 1).
    pub z_smooth: Vec<DVector<f64>>,
    pub p_smooth: Vec<DMatrix<f64>>,
    pub z0_smooth: DVector<f64>,
    pub p0_smooth: DMatrix<f64>,
    /// `Cov(z_t, z_{t-1} | Y)` for t = 1..=T (index 0 is t = 1).
    pub lag_one: Vec<DMatrix<f64>>,
    pub s11: DMatrix<f64>,
    pub s10: DMatrix<f64>,
    pub s00: DMatrix<f64>,
    pub loglik: f64,
}

impl SmootherOutput {
    pub fn t_len(&self) -> usize {
        self.z_smooth.len()
    }

    /// Smoothed states as an `n x T` matrix.
    pub fn state_matrix(&self) -> DMatrix<f64> {
        let n = self.z0_smooth.len();
        DMatrix::from_fn(n, self.z_smooth.len(), |i, t| self.z_smooth[t][i])
    }
}

pub fn kalman_filter(inputs: &StateSpaceInputs<'_>) -> Result<FilterOutput> {
    inputs.validate()?;
    let n = inputs.n();
    let t_len = inputs.t_len();
    let g = inputs.g;
    let alpha = inputs.alpha;

    let mut predicted_means = Vec::with_capacity(t_len + 1);
    let mut predicted_covs = Vec::with_capacity(t_len + 1);
    let mut filtered_means = Vec::with_capacity(t_len + 1);
    let mut filtered_covs = Vec::with_capacity(t_len + 1);
    let mut innovations = Vec::with_capacity(t_len);
    let mut innovation_covs = Vec::with_capacity(t_len);
    let mut loglik = 0.0;

    predicted_means.push(inputs.mu0.clone());
    predicted_covs.push(inputs.sigma0.clone());
    filtered_means.push(inputs.mu0.clone());
    filtered_covs.push(inputs.sigma0.clone());

    for t in 0..t_len {
        let m_prev = &filtered_means[t];
        let p_prev = &filtered_covs[t];
        let m_pred: DVector<f64> = m_prev * g;
        let mut p_pred: DMatrix<f64> = p_prev * (g * g) + inputs.sigma_eta;
        symmetrize_mut(&mut p_pred);

        let obs = inputs.observed_rows(t);
        if obs.is_empty() {
            innovations.push(DVector::zeros(0));
            innovation_covs.push(DMatrix::zeros(0, 0));
            filtered_means.push(m_pred.clone());
            filtered_covs.push(p_pred.clone());
            predicted_means.push(m_pred);
            predicted_covs.push(p_pred);
            continue;
        }

        let sigma2 = inputs.sigma2_eps[t];
        let x_obs = crate::linalg::select_rows(&inputs.design[t], &obs);
        let y_obs = DVector::from_iterator(obs.len(), obs.iter().map(|&i| inputs.y[(i, t)]));
        let resid = y_obs - x_obs * inputs.beta - select_vec(&m_pred, &obs) * alpha;

        // S = alpha^2 P_oo + sigma2 I
        let p_col = select_cols(&p_pred, &obs); // n x k
        let mut s = select(&p_pred, &obs, &obs) * (alpha * alpha);
        for i in 0..obs.len() {
            s[(i, i)] += sigma2;
        }
        let chol = cholesky(&s, "innovation covariance", Some(t + 1))?;
        let s_inv_r = chol.solve(&resid);
        loglik += -0.5 * (obs.len() as f64 * LN_2PI + log_det(&chol) + resid.dot(&s_inv_r));

        // K = alpha P_{:,o} S^{-1}
        let k_t = chol.solve(&p_col.transpose()).transpose() * alpha; // n x k
        let m_filt = &m_pred + &k_t * &resid;
        let mut p_filt = &p_pred - &k_t * p_col.transpose() * alpha;
        symmetrize_mut(&mut p_filt);

        innovations.push(resid);
        innovation_covs.push(s);
        filtered_means.push(m_filt);
        filtered_covs.push(p_filt);
        predicted_means.push(m_pred);
        predicted_covs.push(p_pred);
    }
    debug_assert_eq!(filtered_means.len(), t_len + 1);
    let _ = n;

    Ok(FilterOutput {
        predicted_means,
        predicted_covs,
        filtered_means,
        filtered_covs,
        innovations,
        innovation_covs,
        loglik,
    })
}

/// Fixed-interval smoother with lag-one covariances and EM second moments.
pub fn kalman_smooth(inputs: &StateSpaceInputs<'_>) -> Result<SmootherOutput> {
    let f = kalman_filter(inputs)?;
    let t_len = inputs.t_len();
    let n = inputs.n();
    let g = inputs.g;

    // zs[t], ps[t] for t = 0..=T
    let mut zs = vec![DVector::zeros(n); t_len + 1];
    let mut ps = vec![DMatrix::zeros(n, n); t_len + 1];
    let mut lag = vec![DMatrix::zeros(n, n); t_len];
    zs[t_len] = f.filtered_means[t_len].clone();
    ps[t_len] = f.filtered_covs[t_len].clone();

    for t in (1..=t_len).rev() {
        // J_{t-1} = P_{t-1|t-1} g P_{t|t-1}^{-1}
        let chol = cholesky(&f.predicted_covs[t], "predicted state covariance", Some(t))?;
        let gp = &f.filtered_covs[t - 1] * g;
        let j = chol.solve(&gp.transpose()).transpose();

        let dz = &zs[t] - &f.predicted_means[t];
        zs[t - 1] = &f.filtered_means[t - 1] + &j * dz;
        let dp = &ps[t] - &f.predicted_covs[t];
        let mut p = &f.filtered_covs[t - 1] + &j * dp * j.transpose();
        symmetrize_mut(&mut p);
        ps[t - 1] = p;
        // Cov(z_t, z_{t-1} | Y) = P_t^T J_{t-1}'
        lag[t - 1] = &ps[t] * j.transpose();
    }

    let mut s11 = DMatrix::zeros(n, n);
    let mut s10 = DMatrix::zeros(n, n);
    let mut s00 = DMatrix::zeros(n, n);
    for t in 1..=t_len {
        s11 += &zs[t] * zs[t].transpose() + &ps[t];
        s10 += &zs[t] * zs[t - 1].transpose() + &lag[t - 1];
        s00 += &zs[t - 1] * zs[t - 1].transpose() + &ps[t - 1];
    }
    symmetrize_mut(&mut s11);
    symmetrize_mut(&mut s00);

    if !f.loglik.is_finite() {
        return Err(Error::numerical("log-likelihood is not finite", None));
    }

    let z0 = zs.remove(0);
    let p0 = ps.remove(0);
    Ok(SmootherOutput {
        z_smooth: zs,
        p_smooth: ps,
        z0_smooth: z0,
        p0_smooth: p0,
        lag_one: lag,
        s11,
        s10,
        s00,
        loglik: f.loglik,
    })
}

/// Generalized-least-squares information `X' V^-1 X` of the regression
/// coefficients, where `V` is the full marginal covariance of the observed
/// responses. Each design column is passed through the same innovation
/// transform the filter applies to the data (with a zero initial mean), so
/// the cost is one extra mean recursion per column.
pub fn design_information(inputs: &StateSpaceInputs<'_>) -> Result<DMatrix<f64>> {
    inputs.validate()?;
    let n = inputs.n();
    let p = inputs.beta.len();
    let g = inputs.g;
    let alpha = inputs.alpha;
    let mut info = DMatrix::zeros(p, p);
    // Filtered means of the design columns, n x p.
    let mut means = DMatrix::zeros(n, p);
    let mut cov = inputs.sigma0.clone();
    for t in 0..inputs.t_len() {
        let mut p_pred: DMatrix<f64> = &cov * (g * g) + inputs.sigma_eta;
        symmetrize_mut(&mut p_pred);
        let m_pred = &means * g;
        let obs = inputs.observed_rows(t);
        if obs.is_empty() {
            means = m_pred;
            cov = p_pred;
            continue;
        }
        let x_obs = crate::linalg::select_rows(&inputs.design[t], &obs);
        let v = x_obs - crate::linalg::select_rows(&m_pred, &obs) * alpha; // k x p
        let p_col = select_cols(&p_pred, &obs);
        let mut s = select(&p_pred, &obs, &obs) * (alpha * alpha);
        for i in 0..obs.len() {
            s[(i, i)] += inputs.sigma2_eps[t];
        }
        let chol = cholesky(&s, "innovation covariance", Some(t + 1))?;
        info += v.transpose() * chol.solve(&v);
        let k_t = chol.solve(&p_col.transpose()).transpose() * alpha;
        means = m_pred + &k_t * v;
        cov = &p_pred - &k_t * p_col.transpose() * alpha;
        symmetrize_mut(&mut cov);
    }
    symmetrize_mut(&mut info);
    Ok(info)
}

/// Gaussian log-density of the observed entries (prediction-error
/// decomposition). A fully missing panel has log-likelihood 0.
pub fn observed_loglik(inputs: &StateSpaceInputs<'_>) -> Result<f64> {
    Ok(kalman_filter(inputs)?.loglik)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Owned {
        y: DMatrix<f64>,
        design: Vec<DMatrix<f64>>,
        beta: DVector<f64>,
        sigma_eta: DMatrix<f64>,
        sigma2: Vec<f64>,
        mu0: DVector<f64>,
        sigma0: DMatrix<f64>,
    }

    impl Owned {
        fn scalar(y: Vec<f64>, sigma2: Vec<f64>) -> Self {
            let t = y.len();
            Self {
                y: DMatrix::from_row_slice(1, t, &y),
                design: vec![DMatrix::zeros(1, 0); t],
                beta: DVector::zeros(0),
                sigma_eta: DMatrix::identity(1, 1),
                sigma2,
                mu0: DVector::zeros(1),
                sigma0: DMatrix::identity(1, 1),
            }
        }

        fn inputs(&self, alpha: f64, g: f64) -> StateSpaceInputs<'_> {
            StateSpaceInputs {
                y: &self.y,
                design: &self.design,
                beta: &self.beta,
                alpha,
                g,
                sigma_eta: &self.sigma_eta,
                sigma2_eps: &self.sigma2,
                mu0: &self.mu0,
                sigma0: &self.sigma0,
            }
        }
    }

    #[test]
    fn symmetric_single_observation() {
        let m = Owned::scalar(vec![0.0], vec![1.0]);
        let f = kalman_filter(&m.inputs(1.0, 0.0)).unwrap();
        assert_eq!(f.filtered_means[1][0], 0.0);
        // y ~ N(0, 1 + 1)
        let expect = -0.5 * ((2.0 * std::f64::consts::PI).ln() + 2f64.ln());
        assert!((f.loglik - expect).abs() < 1e-14);
    }

    #[test]
    fn scalar_loglik_closed_form() {
        let mut m = Owned::scalar(vec![1.7], vec![0.4]);
        m.mu0[0] = 0.5;
        m.sigma0[(0, 0)] = 2.0;
        // z1 = 0.6 z0 + eta -> mean 0.3, var 0.36*2 + 1 = 1.72; y = 0.8 z1 + eps
        let mean = 0.8 * 0.3;
        let var = 0.64 * 1.72 + 0.4;
        let expect = -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (1.7 - mean) * (1.7 - mean) / var);
        let ll = observed_loglik(&m.inputs(0.8, 0.6)).unwrap();
        assert!((ll - expect).abs() < 1e-12);
    }

    #[test]
    fn fully_missing_propagates_prior() {
        let m = Owned::scalar(vec![f64::NAN, f64::NAN, f64::NAN], vec![1.0; 3]);
        let f = kalman_filter(&m.inputs(1.0, 0.5)).unwrap();
        assert_eq!(f.loglik, 0.0);
        let mut v = 1.0;
        for t in 1..=3 {
            v = 0.25 * v + 1.0;
            assert!((f.filtered_covs[t][(0, 0)] - v).abs() < 1e-14);
            assert_eq!(f.filtered_means[t][0], 0.0);
        }
    }

    #[test]
    fn single_step_smoother_equals_filter() {
        let m = Owned::scalar(vec![0.9], vec![0.5]);
        let inputs = m.inputs(1.2, 0.7);
        let f = kalman_filter(&inputs).unwrap();
        let s = kalman_smooth(&inputs).unwrap();
        assert!((s.z_smooth[0][0] - f.filtered_means[1][0]).abs() < 1e-15);
        assert!((s.p_smooth[0][(0, 0)] - f.filtered_covs[1][(0, 0)]).abs() < 1e-15);
    }

    #[test]
    fn zero_transition_gives_zero_lag_one() {
        let mut m = Owned::scalar(vec![0.3, -1.0, 0.4, 2.0], vec![0.5, 1.0, 1.5, 0.7]);
        m.y = DMatrix::from_row_slice(2, 2, &[0.3, -1.0, 0.4, 2.0]);
        m.design = vec![DMatrix::zeros(2, 0); 2];
        m.sigma2 = vec![0.5, 1.2];
        m.sigma_eta = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.0]);
        m.mu0 = DVector::zeros(2);
        m.sigma0 = DMatrix::identity(2, 2);
        let s = kalman_smooth(&m.inputs(0.9, 0.0)).unwrap();
        for l in &s.lag_one {
            assert!(l.amax() < 1e-10);
        }
    }

    #[test]
    fn non_positive_variance_rejected() {
        let m = Owned::scalar(vec![0.0], vec![0.0]);
        assert!(matches!(kalman_filter(&m.inputs(1.0, 0.5)), Err(Error::Input(_))));
    }
}
