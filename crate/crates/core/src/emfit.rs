// SPDX-License-Identifier: Apache-2.0

//! Maximum-likelihood estimation by expectation-maximization.
//!
//! The innovation covariance is `Sigma_eta = (1 - g^2) R(theta)` with `R` the
//! unit-diagonal exponential correlation matrix, so the latent field has unit
//! marginal variance in steady state. Each iteration runs the smoother
//! (E-step) and then a sequence of conditional maximizations of the expected
//! complete-data log-likelihood, every one using the most recent values of
//! the other parameters. That keeps the observed log-likelihood monotone.

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::geo::{jittered_correlation, CorrelationKernel, KernelFamily, SiteSet};
use crate::linalg::{self, cholesky, dependent_columns, log_det};
use crate::model::{standardize, ModelSpec, ObservationPanel, Standardization, StandardizedPanel};
use crate::statespace::{kalman_smooth, SmootherOutput, StateSpaceInputs};

/// Lower bound applied to every per-time measurement variance.
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Convergence threshold on the relative change of the observed
    /// log-likelihood.
    pub tol: f64,
    pub seed: u64,
    /// Allowed decrease of the log-likelihood between iterations, relative
    /// to `max(1, |loglik|)`, before the fit is aborted.
    pub monotonicity_slack: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iter: 400,
            tol: 1e-4,
            seed: 0,
            monotonicity_slack: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub beta: DVector<f64>,
    pub alpha: f64,
    pub g: f64,
    pub theta: f64,
    pub sigma2_eps: Vec<f64>,
    pub mu0: DVector<f64>,
    pub sigma0: DMatrix<f64>,
    pub standardization: Standardization,
}

impl ModelParams {
    pub fn kernel(&self, family: KernelFamily) -> Result<CorrelationKernel> {
        CorrelationKernel::new(family, self.theta)
    }
}

/// Parameters in the standardized space, without moments.
#[derive(Debug, Clone, PartialEq)]
pub struct RawParams {
    pub beta: DVector<f64>,
    pub alpha: f64,
    pub g: f64,
    pub theta: f64,
    pub sigma2_eps: Vec<f64>,
    pub mu0: DVector<f64>,
    pub sigma0: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub beta: f64,
    pub std: f64,
    pub abs_t: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: usize,
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    /// Last relative change of the log-likelihood.
    pub criterion: f64,
    /// Covariance of the coefficients used for standard errors and scenario
    /// uncertainty (marginal GLS information).
    pub beta_cov: DMatrix<f64>,
    /// `[sum_t X_t' Sigma_eps_t^-1 X_t]^-1`, ignoring latent-field
    /// correlation.
    pub beta_cov_plugin: DMatrix<f64>,
    pub coefficients: Vec<CoefficientRow>,
    /// In-sample RMSE in original units.
    pub rmse_in_sample: f64,
    /// `n x T` studentized residuals (NaN where missing).
    #[serde(skip)]
    pub studentized_residuals: DMatrix<f64>,
}

/// Everything produced by a fit, enough to predict and run scenarios.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModel {
    pub spec: ModelSpec,
    pub sites: SiteSet,
    pub dates: Vec<NaiveDate>,
    pub column_names: Vec<String>,
    pub params: ModelParams,
    pub report: FitReport,
    /// `n x T` smoothed latent states at the final parameters.
    pub z_smooth: DMatrix<f64>,
}

impl FittedModel {
    pub fn kernel(&self) -> Result<CorrelationKernel> {
        self.params.kernel(self.spec.kernel)
    }
}

/// Innovation covariance `(1 - g^2) R(theta)` with jitter on `R`.
pub fn innovation_covariance(sites: &SiteSet, family: KernelFamily, g: f64, theta: f64) -> Result<DMatrix<f64>> {
    let r = jittered_correlation(sites, &CorrelationKernel::new(family, theta)?);
    Ok(r * (1.0 - g * g))
}

fn inputs<'a>(
    sp: &'a StandardizedPanel,
    p: &'a RawParams,
    sigma_eta: &'a DMatrix<f64>,
) -> StateSpaceInputs<'a> {
    StateSpaceInputs {
        y: &sp.y,
        design: &sp.design,
        beta: &p.beta,
        alpha: p.alpha,
        g: p.g,
        sigma_eta,
        sigma2_eps: &p.sigma2_eps,
        mu0: &p.mu0,
        sigma0: &p.sigma0,
    }
}

/// Run the smoother at the given parameters.
pub fn e_step(sp: &StandardizedPanel, sites: &SiteSet, family: KernelFamily, p: &RawParams) -> Result<SmootherOutput> {
    if !(p.g.abs() < 1.0) {
        return Err(Error::numerical(format!("transition coefficient {} outside (-1, 1)", p.g), None));
    }
    let sigma_eta = innovation_covariance(sites, family, p.g, p.theta)?;
    kalman_smooth(&inputs(sp, p, &sigma_eta))
}

fn observed(y: &DMatrix<f64>, t: usize) -> Vec<usize> {
    (0..y.nrows()).filter(|&i| y[(i, t)].is_finite()).collect()
}

/// Per-time measurement variances: `tr(Omega_t) / n_t` over observed rows,
/// where `Omega_t = E(e_t|Y) E(e_t|Y)' + Var(e_t|Y)`. Times with no
/// observations keep their previous value.
pub fn update_sigma2(
    y: &DMatrix<f64>,
    design: &[DMatrix<f64>],
    beta: &DVector<f64>,
    alpha: f64,
    sm: &SmootherOutput,
    previous: &[f64],
) -> Vec<f64> {
    (0..y.ncols())
        .map(|t| {
            let obs = observed(y, t);
            if obs.is_empty() {
                return previous[t];
            }
            let z = &sm.z_smooth[t];
            let p = &sm.p_smooth[t];
            let mut tr = 0.0;
            for &i in &obs {
                let e = y[(i, t)] - design[t].row(i).transpose().dot(beta) - alpha * z[i];
                tr += e * e + alpha * alpha * p[(i, i)];
            }
            (tr / obs.len() as f64).max(VARIANCE_FLOOR)
        })
        .collect()
}

/// Weighted least squares of `y - alpha z^T` on the design.
pub fn update_beta(
    y: &DMatrix<f64>,
    design: &[DMatrix<f64>],
    alpha: f64,
    sigma2: &[f64],
    sm: &SmootherOutput,
    names: &[String],
) -> Result<DVector<f64>> {
    let p = design.first().map(|x| x.ncols()).unwrap_or(0);
    let mut a = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    for t in 0..y.ncols() {
        let w = 1.0 / sigma2[t];
        for i in observed(y, t) {
            let x = design[t].row(i);
            let target = y[(i, t)] - alpha * sm.z_smooth[t][i];
            for j in 0..p {
                b[j] += w * x[j] * target;
                for k in 0..=j {
                    a[(j, k)] += w * x[j] * x[k];
                }
            }
        }
    }
    fill_upper(&mut a);
    solve_normal_equations(&a, &b, y, design, names)
}

/// Scale of the latent field given `beta`.
pub fn update_alpha(y: &DMatrix<f64>, design: &[DMatrix<f64>], beta: &DVector<f64>, sigma2: &[f64], sm: &SmootherOutput) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for t in 0..y.ncols() {
        let w = 1.0 / sigma2[t];
        for i in observed(y, t) {
            let z = sm.z_smooth[t][i];
            num += w * z * (y[(i, t)] - design[t].row(i).transpose().dot(beta));
            den += w * (z * z + sm.p_smooth[t][(i, i)]);
        }
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Traces `(tr R^-1 S00, tr R^-1 S10, tr R^-1 S11)`.
fn weighted_traces(sm: &SmootherOutput, r: &DMatrix<f64>) -> Result<(f64, f64, f64)> {
    let chol = cholesky(r, "spatial correlation matrix", None)?;
    let a = chol.solve(&sm.s00).trace();
    let b = chol.solve(&sm.s10).trace();
    let c = chol.solve(&sm.s11).trace();
    Ok((a, b, c))
}

/// Transition term of the expected complete-data `-2 log L` as a function of
/// `g` with `Sigma_eta = (1 - g^2) R`: `T n log(1-g^2) + T log|R| +
/// tr[R^-1 (S11 - 2g S10 + g^2 S00)] / (1-g^2)`.
pub fn transition_q(sm: &SmootherOutput, r: &DMatrix<f64>, g: f64) -> Result<f64> {
    let n = r.nrows() as f64;
    let t_len = sm.t_len() as f64;
    let chol = cholesky(r, "spatial correlation matrix", None)?;
    let (a, b, c) = weighted_traces(sm, r)?;
    let one_m = 1.0 - g * g;
    Ok(t_len * n * one_m.ln() + t_len * log_det(&chol) + (c - 2.0 * g * b + g * g * a) / one_m)
}

/// Exact minimizer over `g in (-1, 1)` of the transition term at fixed `R`.
///
/// Setting the derivative to zero gives the cubic
/// `T n g^3 - b g^2 + (a + c - T n) g - b = 0`; it changes sign on (-1, 1),
/// and the admissible root with the smallest objective is returned.
pub fn update_g(sm: &SmootherOutput, r: &DMatrix<f64>) -> Result<f64> {
    let tn = sm.t_len() as f64 * r.nrows() as f64;
    let (a, b, c) = weighted_traces(sm, r)?;
    let objective = |g: f64| {
        let one_m = 1.0 - g * g;
        tn * one_m.ln() + (c - 2.0 * g * b + g * g * a) / one_m
    };
    let roots = linalg::real_cubic_roots(tn, -b, a + c - tn, -b);
    roots
        .into_iter()
        .filter(|g| g.is_finite() && g.abs() < 1.0)
        .map(|g| (g, objective(g)))
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .map(|(g, _)| g)
        .ok_or_else(|| Error::numerical("no admissible root for the transition update", None))
}

/// Range-parameter objective (to be minimized):
/// `T log|R(theta)| + tr[R(theta)^-1 A] / (1 - g^2)` with
/// `A = S11 - g (S10 + S10') + g^2 S00`.
#[allow(clippy::too_many_arguments)]
pub fn theta_objective(
    s11: &DMatrix<f64>,
    s10: &DMatrix<f64>,
    s00: &DMatrix<f64>,
    t_len: usize,
    g: f64,
    sites: &SiteSet,
    family: KernelFamily,
    theta: f64,
) -> Result<f64> {
    let a = theta_target(s11, s10, s00, g);
    theta_objective_with(&a, t_len, g, sites, family, theta)
}

fn theta_target(s11: &DMatrix<f64>, s10: &DMatrix<f64>, s00: &DMatrix<f64>, g: f64) -> DMatrix<f64> {
    s11 - (s10 + s10.transpose()) * g + s00 * (g * g)
}

fn theta_objective_with(
    a: &DMatrix<f64>,
    t_len: usize,
    g: f64,
    sites: &SiteSet,
    family: KernelFamily,
    theta: f64,
) -> Result<f64> {
    let r = jittered_correlation(sites, &CorrelationKernel::new(family, theta)?);
    let chol = cholesky(&r, "spatial correlation matrix", None)?;
    let quad = chol.solve(a).trace();
    Ok(t_len as f64 * log_det(&chol) + quad / (1.0 - g * g))
}

/// Search interval `[d_min / 100, 10 d_max]` for the range parameter.
pub fn theta_bounds(sites: &SiteSet) -> Result<(f64, f64)> {
    let d: Vec<f64> = sites.pairwise_distances().into_iter().filter(|&v| v > 0.0).collect();
    if d.is_empty() {
        return Err(Error::input("all sites coincide; the range parameter is not identifiable"));
    }
    let d_min = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let d_max = d.iter().cloned().fold(0.0, f64::max);
    Ok((d_min / 100.0, 10.0 * d_max))
}

const THETA_SCAN: usize = 41;

/// Range update: minimize the objective over `log theta`, first on a coarse
/// grid over the search interval and then by golden section inside the
/// bracket around the best grid point.
pub fn theta_update(
    s11: &DMatrix<f64>,
    s10: &DMatrix<f64>,
    s00: &DMatrix<f64>,
    t_len: usize,
    g: f64,
    sites: &SiteSet,
    family: KernelFamily,
) -> Result<f64> {
    if t_len == 0 {
        return Err(Error::input("theta update needs at least one time step"));
    }
    let (lo, hi) = theta_bounds(sites)?;
    let a = theta_target(s11, s10, s00, g);
    let (llo, lhi) = (lo.ln(), hi.ln());
    let step = (lhi - llo) / (THETA_SCAN - 1) as f64;
    let mut best = (0usize, f64::INFINITY);
    for k in 0..THETA_SCAN {
        let v = theta_objective_with(&a, t_len, g, sites, family, (llo + step * k as f64).exp())?;
        if v < best.1 {
            best = (k, v);
        }
    }
    let left = llo + step * best.0.saturating_sub(1) as f64;
    let right = (llo + step * (best.0 + 1) as f64).min(lhi);
    let mut failure = None;
    let (x, fx) = linalg::golden_section_min(
        |lt| match theta_objective_with(&a, t_len, g, sites, family, lt.exp()) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::INFINITY
            }
        },
        left,
        right,
        1e-10,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(if fx <= best.1 { x.exp() } else { (llo + step * best.0 as f64).exp() })
}

/// Plug-in GLS covariance of the regression coefficients,
/// `[sum_t X_t' Sigma_eps_t^-1 X_t]^-1` over observed rows.
pub fn beta_covariance(
    y: &DMatrix<f64>,
    design: &[DMatrix<f64>],
    sigma2: &[f64],
    names: &[String],
) -> Result<DMatrix<f64>> {
    let p = design.first().map(|x| x.ncols()).unwrap_or(0);
    let mut info = DMatrix::zeros(p, p);
    for t in 0..y.ncols() {
        let w = 1.0 / sigma2[t];
        for i in observed(y, t) {
            let x = design[t].row(i);
            for j in 0..p {
                for k in 0..=j {
                    info[(j, k)] += w * x[j] * x[k];
                }
            }
        }
    }
    fill_upper(&mut info);
    invert_information(&info, y, design, names)
}

/// Covariance of the regression coefficients from the marginal GLS
/// information `[X' V^-1 X]^-1`, with `V` the covariance of all observed
/// responses implied by the fitted latent field and measurement variances.
/// Unlike [`beta_covariance`] this accounts for the spatio-temporal
/// correlation the latent term induces, which matters most for the
/// intercept and other slowly varying columns.
pub fn beta_covariance_marginal(
    sp: &StandardizedPanel,
    sites: &SiteSet,
    family: KernelFamily,
    params: &RawParams,
) -> Result<DMatrix<f64>> {
    let sigma_eta = innovation_covariance(sites, family, params.g, params.theta)?;
    let info = crate::statespace::design_information(&inputs(sp, params, &sigma_eta))?;
    invert_information(&info, &sp.y, &sp.design, &sp.column_names)
}

fn fill_upper(a: &mut DMatrix<f64>) {
    for j in 0..a.nrows() {
        for k in 0..j {
            a[(k, j)] = a[(j, k)];
        }
    }
}

fn stacked_design(y: &DMatrix<f64>, design: &[DMatrix<f64>]) -> DMatrix<f64> {
    let p = design.first().map(|x| x.ncols()).unwrap_or(0);
    let rows: Vec<(usize, usize)> = (0..y.ncols()).flat_map(|t| observed(y, t).into_iter().map(move |i| (t, i))).collect();
    DMatrix::from_fn(rows.len(), p, |r, j| design[rows[r].0][(rows[r].1, j)])
}

fn singular_error(y: &DMatrix<f64>, design: &[DMatrix<f64>], names: &[String]) -> Error {
    let x = stacked_design(y, design);
    let dep = dependent_columns(&x, 1e-9);
    Error::SingularDesign {
        columns: dep.into_iter().map(|j| names.get(j).cloned().unwrap_or_else(|| format!("column {j}"))).collect(),
    }
}

fn well_conditioned(info: &DMatrix<f64>) -> bool {
    let eig = info.symmetric_eigenvalues();
    let max = eig.max();
    let min = eig.min();
    max > 0.0 && min > max * 1e-12
}

fn solve_normal_equations(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    y: &DMatrix<f64>,
    design: &[DMatrix<f64>],
    names: &[String],
) -> Result<DVector<f64>> {
    if !well_conditioned(a) {
        return Err(singular_error(y, design, names));
    }
    let chol = nalgebra::Cholesky::new(a.clone()).ok_or_else(|| singular_error(y, design, names))?;
    Ok(chol.solve(b))
}

fn invert_information(info: &DMatrix<f64>, y: &DMatrix<f64>, design: &[DMatrix<f64>], names: &[String]) -> Result<DMatrix<f64>> {
    if !well_conditioned(info) {
        return Err(singular_error(y, design, names));
    }
    let chol = nalgebra::Cholesky::new(info.clone()).ok_or_else(|| singular_error(y, design, names))?;
    Ok(linalg::symmetrize(&chol.inverse()))
}

/// Starting values: OLS coefficients, alpha 0.5, g 0.8, theta the median
/// pairwise distance, the OLS residual variance for every day, mu0 = 0 and
/// Sigma0 = I.
pub fn initial_params(sp: &StandardizedPanel, sites: &SiteSet) -> Result<RawParams> {
    let n = sp.y.nrows();
    let t_len = sp.y.ncols();
    let p = sp.column_names.len();
    let mut a = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    let mut count = 0usize;
    for t in 0..t_len {
        for i in observed(&sp.y, t) {
            let x = sp.design[t].row(i);
            a += x.transpose() * x;
            b += x.transpose() * sp.y[(i, t)];
            count += 1;
        }
    }
    if count <= p {
        return Err(Error::input(format!("{count} observed entries are not enough for {p} coefficients")));
    }
    let beta = solve_normal_equations(&a, &b, &sp.y, &sp.design, &sp.column_names)?;
    let mut rss = 0.0;
    for t in 0..t_len {
        for i in observed(&sp.y, t) {
            let e = sp.y[(i, t)] - sp.design[t].row(i).transpose().dot(&beta);
            rss += e * e;
        }
    }
    let s2 = (rss / (count - p) as f64).max(VARIANCE_FLOOR);

    let mut d: Vec<f64> = sites.pairwise_distances().into_iter().filter(|&v| v > 0.0).collect();
    if d.is_empty() {
        return Err(Error::input("all sites coincide; the range parameter is not identifiable"));
    }
    d.sort_by(|x, y| x.total_cmp(y));
    let theta = if d.len() % 2 == 1 {
        d[d.len() / 2]
    } else {
        0.5 * (d[d.len() / 2 - 1] + d[d.len() / 2])
    };

    Ok(RawParams {
        beta,
        alpha: 0.5,
        g: 0.8,
        theta,
        sigma2_eps: vec![s2; t_len],
        mu0: DVector::zeros(n),
        sigma0: DMatrix::identity(n, n),
    })
}

/// One full M-step from a frozen E-step.
pub fn m_step(
    sp: &StandardizedPanel,
    sites: &SiteSet,
    family: KernelFamily,
    current: &RawParams,
    sm: &SmootherOutput,
) -> Result<RawParams> {
    let sigma2 = update_sigma2(&sp.y, &sp.design, &current.beta, current.alpha, sm, &current.sigma2_eps);
    let beta = update_beta(&sp.y, &sp.design, current.alpha, &sigma2, sm, &sp.column_names)?;
    let alpha = update_alpha(&sp.y, &sp.design, &beta, &sigma2, sm);
    let mu0 = sm.z0_smooth.clone();
    let sigma0 = sm.p0_smooth.clone();

    let r = jittered_correlation(sites, &CorrelationKernel::new(family, current.theta)?);
    let g = update_g(sm, &r)?;

    let t_len = sm.t_len();
    let candidate = theta_update(&sm.s11, &sm.s10, &sm.s00, t_len, g, sites, family)?;
    let at = |th| theta_objective(&sm.s11, &sm.s10, &sm.s00, t_len, g, sites, family, th);
    // Keep the current range if the search did not improve on it.
    let theta = if at(candidate)? <= at(current.theta)? { candidate } else { current.theta };

    Ok(RawParams {
        beta,
        alpha,
        g,
        theta,
        sigma2_eps: sigma2,
        mu0,
        sigma0,
    })
}

/// Result of the EM loop in standardized space.
#[derive(Debug, Clone)]
pub struct EmResult {
    pub params: RawParams,
    pub smoother: SmootherOutput,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub criterion: f64,
}

/// Run EM from `start` on an already standardized panel.
pub fn run_em(
    sp: &StandardizedPanel,
    sites: &SiteSet,
    family: KernelFamily,
    start: RawParams,
    options: &EmOptions,
) -> Result<EmResult> {
    let mut params = start;
    let mut sm = e_step(sp, sites, family, &params)?;
    let mut trace = vec![sm.loglik];
    let mut converged = false;
    let mut criterion = f64::INFINITY;
    let mut iterations = 0;
    for iter in 1..=options.max_iter {
        let next = m_step(sp, sites, family, &params, &sm)?;
        let next_sm = e_step(sp, sites, family, &next)?;
        let prev = *trace.last().expect("non-empty");
        let cur = next_sm.loglik;
        if cur < prev - options.monotonicity_slack * prev.abs().max(1.0) {
            trace.push(cur);
            return Err(Error::LikelihoodDecrease {
                iteration: iter,
                previous: prev,
                current: cur,
                trace,
            });
        }
        trace.push(cur);
        params = next;
        sm = next_sm;
        iterations = iter;
        criterion = (cur - prev).abs() / cur.abs().max(f64::MIN_POSITIVE);
        log::debug!("EM iteration {iter}: loglik {cur:.6} (rel change {criterion:.3e})");
        if criterion < options.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("EM stopped after {iterations} iterations without meeting tol {}", options.tol);
    }
    Ok(EmResult {
        params,
        smoother: sm,
        loglik_trace: trace,
        iterations,
        converged,
        criterion,
    })
}

fn p_value(abs_t: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    2.0 * (1.0 - normal.cdf(abs_t))
}

/// Coefficient table in standardized units: estimate, standard error,
/// absolute t-statistic and two-sided normal p-value.
pub fn coefficient_table(names: &[String], beta: &DVector<f64>, cov: &DMatrix<f64>) -> Vec<CoefficientRow> {
    names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let std = cov[(j, j)].max(0.0).sqrt();
            let abs_t = if std > 0.0 { (beta[j] / std).abs() } else { f64::INFINITY };
            CoefficientRow {
                name: name.clone(),
                beta: beta[j],
                std,
                abs_t,
                p_value: p_value(abs_t),
            }
        })
        .collect()
}

/// Residuals `y_t - X_t beta - alpha z_t^T` divided by `sigma_eps_t`.
pub fn studentized_residuals(
    y: &DMatrix<f64>,
    design: &[DMatrix<f64>],
    beta: &DVector<f64>,
    alpha: f64,
    sigma2: &[f64],
    z_smooth: &DMatrix<f64>,
) -> DMatrix<f64> {
    DMatrix::from_fn(y.nrows(), y.ncols(), |i, t| {
        let v = y[(i, t)];
        if !v.is_finite() {
            return f64::NAN;
        }
        (v - design[t].row(i).transpose().dot(beta) - alpha * z_smooth[(i, t)]) / sigma2[t].sqrt()
    })
}

/// In-sample fitted values `X_t beta + alpha z_t^T` in original units.
pub fn fitted_values(
    design: &[DMatrix<f64>],
    beta: &DVector<f64>,
    alpha: f64,
    z_smooth: &DMatrix<f64>,
    st: &Standardization,
) -> DMatrix<f64> {
    DMatrix::from_fn(z_smooth.nrows(), z_smooth.ncols(), |i, t| {
        st.response.invert(design[t].row(i).transpose().dot(beta) + alpha * z_smooth[(i, t)])
    })
}

pub fn rmse(observed: &DMatrix<f64>, predicted: &DMatrix<f64>) -> f64 {
    let mut ss = 0.0;
    let mut k = 0usize;
    for (o, p) in observed.iter().zip(predicted.iter()) {
        if o.is_finite() && p.is_finite() {
            ss += (o - p).powi(2);
            k += 1;
        }
    }
    if k == 0 {
        f64::NAN
    } else {
        (ss / k as f64).sqrt()
    }
}

/// Fit the model to a panel: standardize, run EM and assemble the report.
pub fn em_fit(panel: &ObservationPanel, spec: &ModelSpec, options: &EmOptions) -> Result<FittedModel> {
    let (n, t_len) = (panel.n(), panel.t_len());
    if n < 2 || t_len < 2 {
        return Err(Error::input(format!("need at least 2 stations and 2 days, got {n} x {t_len}")));
    }
    let (sp, st) = standardize(panel, spec)?;
    for (j, name) in sp.column_names.iter().enumerate() {
        let any = (0..t_len).any(|t| observed(&sp.y, t).iter().any(|&i| sp.design[t][(i, j)].is_finite()));
        if !any {
            return Err(Error::input(format!("column '{name}' has no observed entries")));
        }
    }
    let start = initial_params(&sp, &panel.sites)?;
    let em = run_em(&sp, &panel.sites, spec.kernel, start, options)?;
    let raw = em.params;
    let z = em.smoother.state_matrix();

    let beta_cov_plugin = beta_covariance(&sp.y, &sp.design, &raw.sigma2_eps, &sp.column_names)?;
    let beta_cov = beta_covariance_marginal(&sp, &panel.sites, spec.kernel, &raw)?;
    let coefficients = coefficient_table(&sp.column_names, &raw.beta, &beta_cov);
    let fitted = fitted_values(&sp.design, &raw.beta, raw.alpha, &z, &st);
    let observed_y = DMatrix::from_fn(n, t_len, |i, t| if sp.y[(i, t)].is_finite() { panel.response[(i, t)] } else { f64::NAN });
    let rmse_in_sample = rmse(&observed_y, &fitted);
    let studentized = studentized_residuals(&sp.y, &sp.design, &raw.beta, raw.alpha, &raw.sigma2_eps, &z);

    Ok(FittedModel {
        spec: spec.clone(),
        sites: panel.sites.clone(),
        dates: panel.dates().to_vec(),
        column_names: sp.column_names.clone(),
        params: ModelParams {
            beta: raw.beta,
            alpha: raw.alpha,
            g: raw.g,
            theta: raw.theta,
            sigma2_eps: raw.sigma2_eps,
            mu0: raw.mu0,
            sigma0: raw.sigma0,
            standardization: st,
        },
        report: FitReport {
            iterations: em.iterations,
            loglik_trace: em.loglik_trace,
            converged: em.converged,
            criterion: em.criterion,
            beta_cov,
            beta_cov_plugin,
            coefficients,
            rmse_in_sample,
            studentized_residuals: studentized,
        },
        z_smooth: z,
    })
}

/// Studentized residuals of a fitted model against (possibly new) panel data
/// at the fitted stations.
pub fn residuals_for_panel(model: &FittedModel, panel: &ObservationPanel) -> Result<DMatrix<f64>> {
    if panel.n() != model.sites.len() || panel.t_len() != model.dates.len() {
        return Err(Error::schema("panel does not match the fitted stations and dates"));
    }
    let sp = crate::model::apply_standardization(panel, &model.spec, &model.params.standardization)?;
    Ok(studentized_residuals(
        &sp.y,
        &sp.design,
        &model.params.beta,
        model.params.alpha,
        &model.params.sigma2_eps,
        &model.z_smooth,
    ))
}
