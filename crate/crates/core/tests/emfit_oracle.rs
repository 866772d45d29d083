// SPDX-License-Identifier: Apache-2.0

mod common;

use chrono::NaiveDate;
use common::log_grid_min;
use hdgm_core::emfit::{theta_objective, theta_update};
use hdgm_core::geo::{jittered_correlation, CorrelationKernel};
use hdgm_core::sim::{simulate, Layout, MissingMechanism, Skedastic, SimSpec, TrueParams};
use hdgm_core::{em_fit, EmOptions, KernelFamily, ModelSpec, ObservationPanel, SiteSet};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec(n: usize, t_len: usize, seed: u64, alpha: f64) -> SimSpec {
    SimSpec {
        layout: Layout::Random {
            n,
            lat: (44.5, 46.5),
            lon: (8.5, 11.5),
        },
        t_len,
        params: TrueParams {
            beta: vec![1.0, -0.5, 0.3],
            alpha,
            g: 0.7,
            theta: 1.2,
        },
        skedastic: Skedastic::Sinusoidal {
            min: 0.5,
            max: 1.5,
            period: 40.0,
        },
        missing: MissingMechanism::Uniform { rate: 0.05 },
        initial: Default::default(),
        seed,
        start_date: NaiveDate::from_ymd_opt(2016, 1, 1).unwrap(),
    }
}

fn terms() -> ModelSpec {
    ModelSpec::new(vec!["x1".into(), "x2".into()])
}

#[test]
fn without_latent_signal_the_fit_is_weighted_least_squares() {
    let panel = simulate(&spec(20, 200, 4, 0.0)).unwrap().panel;
    let fit = em_fit(&panel, &terms().without_standardization(), &EmOptions::default()).unwrap();
    assert!(fit.params.alpha.abs() < 0.1, "alpha {}", fit.params.alpha);

    let x1 = &panel.covariates.columns["x1"];
    let x2 = &panel.covariates.columns["x2"];
    let mut a = DMatrix::zeros(3, 3);
    let mut b = DVector::zeros(3);
    for t in 0..panel.t_len() {
        let w = 1.0 / fit.params.sigma2_eps[t];
        for i in 0..panel.n() {
            let y = panel.response[(i, t)];
            if !y.is_finite() {
                continue;
            }
            let x = DVector::from_vec(vec![1.0, x1[(i, t)], x2[(i, t)]]);
            a += &x * x.transpose() * w;
            b += &x * (w * y);
        }
    }
    let wls = a.lu().solve(&b).unwrap();
    let diff = (&wls - &fit.params.beta).amax();
    assert!(diff < 1e-2, "beta {} vs {}", fit.params.beta, wls);
}

fn permuted(panel: &ObservationPanel, perm: &[usize]) -> ObservationPanel {
    let n = panel.n();
    let sites = SiteSet::new(
        perm.iter()
            .enumerate()
            .map(|(k, &i)| {
                let s = panel.sites.get(i);
                let mut c = s.clone();
                c.id = k;
                c
            })
            .collect(),
    )
    .unwrap();
    let mut out = panel.clone();
    out.sites = sites;
    out.response = DMatrix::from_fn(n, panel.t_len(), |k, t| panel.response[(perm[k], t)]);
    for (name, col) in out.covariates.columns.iter_mut() {
        let orig = &panel.covariates.columns[name];
        *col = DMatrix::from_fn(n, panel.t_len(), |k, t| orig[(perm[k], t)]);
    }
    out.meta = perm.iter().map(|&i| panel.meta[i].clone()).collect();
    out
}

#[test]
fn fit_does_not_depend_on_station_order() {
    let panel = simulate(&spec(8, 60, 9, 0.7)).unwrap().panel;
    let perm = [3, 7, 0, 5, 1, 6, 2, 4];
    let a = em_fit(&panel, &terms(), &EmOptions::default()).unwrap();
    let b = em_fit(&permuted(&panel, &perm), &terms(), &EmOptions::default()).unwrap();
    assert_eq!(a.report.iterations, b.report.iterations);
    let pa = &a.params;
    let pb = &b.params;
    assert!((&pa.beta - &pb.beta).amax() < 1e-8);
    assert!((pa.alpha - pb.alpha).abs() < 1e-8);
    assert!((pa.g - pb.g).abs() < 1e-8);
    // an argmin is only determined to about sqrt(eps) of the objective, and
    // the variances and states inherit that
    assert!((pa.theta - pb.theta).abs() < 1e-6 * pa.theta, "{} vs {}", pa.theta, pb.theta);
    for (x, y) in pa.sigma2_eps.iter().zip(&pb.sigma2_eps) {
        assert!((x - y).abs() < 1e-6 * x);
    }
    for (k, &i) in perm.iter().enumerate() {
        for t in 0..panel.t_len() {
            assert!((a.z_smooth[(i, t)] - b.z_smooth[(k, t)]).abs() < 1e-6);
        }
    }
}

fn objective(s11: &DMatrix<f64>, s10: &DMatrix<f64>, s00: &DMatrix<f64>, t_len: usize, g: f64, sites: &SiteSet) -> impl Fn(f64) -> f64 {
    let a = s11 - (s10 + s10.transpose()) * g + s00 * (g * g);
    let sites = sites.clone();
    move |theta: f64| {
        let r = jittered_correlation(&sites, &CorrelationKernel::exponential(theta).unwrap());
        let se = r * (1.0 - g * g);
        t_len as f64 * se.determinant().ln() + (se.try_inverse().unwrap() * &a).trace()
    }
}

/// Exact second moments of a stationary process with range `theta`.
fn stationary_moments(sites: &SiteSet, g: f64, theta: f64, t_len: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let r = jittered_correlation(sites, &CorrelationKernel::exponential(theta).unwrap());
    let tl = t_len as f64;
    (&r * tl, &r * (g * tl), &r * tl)
}

#[test]
fn range_update_recovers_the_range_of_exact_moments() {
    let sites = SiteSet::from_coords(&[(45.0, 9.0), (45.4, 9.7)]).unwrap();
    let g = 0.6;
    let t_len = 50;
    let (s11, s10, s00) = stationary_moments(&sites, g, 0.8, t_len);
    let theta = theta_update(&s11, &s10, &s00, t_len, g, &sites, KernelFamily::Exponential).unwrap();
    assert!((theta / 0.8 - 1.0).abs() < 1e-6, "theta {theta}");
}

#[test]
fn range_update_is_a_local_minimum_and_matches_a_dense_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let sites = SiteSet::from_coords(&[(45.0, 9.0), (45.3, 9.5), (44.8, 10.1), (45.6, 10.4), (45.1, 11.0)]).unwrap();
    let n = sites.len();
    let g = 0.5;
    let t_len = 30;
    let (mut s11, mut s10, mut s00) = stationary_moments(&sites, g, 1.3, t_len);
    // perturb with a random PSD term so the optimum is not the generating value
    let noise = common::random_spd(&mut rng, n, 0.0) * 3.0;
    s11 += &noise;
    s00 += &noise * 0.5;
    s10 += &noise * 0.1;
    let fam = KernelFamily::Exponential;
    let theta = theta_update(&s11, &s10, &s00, t_len, g, &sites, fam).unwrap();
    let f = |th: f64| theta_objective(&s11, &s10, &s00, t_len, g, &sites, fam, th).unwrap();
    assert!(f(theta) <= f(0.5 * theta) && f(theta) <= f(2.0 * theta));

    let (lo, hi) = hdgm_core::emfit::theta_bounds(&sites).unwrap();
    let oracle = log_grid_min(objective(&s11, &s10, &s00, t_len, g, &sites), lo, hi, 200_001);
    assert!((theta / oracle - 1.0).abs() < 1e-3, "{theta} vs {oracle}");

    // rescaling the moments moves the optimum; the grid still agrees
    let c = 4.0;
    let scaled = theta_update(&(&s11 * c), &(&s10 * c), &(&s00 * c), t_len, g, &sites, fam).unwrap();
    let oracle = log_grid_min(objective(&(&s11 * c), &(&s10 * c), &(&s00 * c), t_len, g, &sites), lo, hi, 200_001);
    assert!((scaled / oracle - 1.0).abs() < 1e-3, "{scaled} vs {oracle}");
}
