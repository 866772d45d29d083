// SPDX-License-Identifier: Apache-2.0

//! Validation statistics: residual autocorrelation, the empirical
//! spatio-temporal variogram and leave-one-station-out cross-validation.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::emfit::{em_fit, residuals_for_panel, EmOptions, FittedModel};
use crate::error::{Error, Result};
use crate::geo::SiteSet;
use crate::model::{ModelSpec, ObservationPanel, PredictionGrid};
use crate::predict::predict_response;

/// Studentized residuals of a fitted model on its training panel.
pub fn studentized_residuals(model: &FittedModel, panel: &ObservationPanel) -> Result<DMatrix<f64>> {
    residuals_for_panel(model, panel)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationAcf {
    pub station: usize,
    /// Lags `0..=max_lag`.
    pub acf: Vec<f64>,
}

/// Sample autocorrelation of a series with missing values. The mean and
/// the lag-zero variance use all observed points; lag `k` sums products over
/// pairs where both points are observed and divides by the number of
/// observed points. Returns `None` for series that are too short or constant.
pub fn acf(x: &[f64], max_lag: usize) -> Option<Vec<f64>> {
    let obs: Vec<f64> = x.iter().copied().filter(|v| v.is_finite()).collect();
    if obs.len() < max_lag + 2 {
        return None;
    }
    let m = obs.iter().sum::<f64>() / obs.len() as f64;
    let c = |k: usize| -> f64 {
        x.iter()
            .zip(&x[k..])
            .filter(|(a, b)| a.is_finite() && b.is_finite())
            .map(|(a, b)| (a - m) * (b - m))
            .sum::<f64>()
            / obs.len() as f64
    };
    let c0 = c(0);
    if !(c0 > 0.0) {
        return None;
    }
    Some((0..=max_lag).map(|k| if k == 0 { 1.0 } else { c(k) / c0 }).collect())
}

/// Per-station ACF of an `n x T` residual matrix. Stations with too few
/// observations or zero variance are skipped with a warning.
pub fn station_acf(residuals: &DMatrix<f64>, max_lag: usize) -> Vec<StationAcf> {
    let mut out = Vec::new();
    for i in 0..residuals.nrows() {
        let row: Vec<f64> = residuals.row(i).iter().copied().collect();
        match acf(&row, max_lag) {
            Some(acf) => out.push(StationAcf { station: i, acf }),
            None => log::warn!("station {i}: series too short or constant for the ACF, skipped"),
        }
    }
    out
}

/// Empirical semivariance on a grid of distance bins and time lags.
///
/// Row 0 holds same-station pairs (distance zero, lags `u > 0` only); rows
/// `1..=bins` are equal-width distance bins `[0, w], (w, 2w], ...` over
/// distinct stations. Both orderings of each station pair are used, so the
/// result does not depend on station order.
#[derive(Debug, Clone, PartialEq)]
pub struct Variogram {
    /// Upper edges of the distance bins (degrees); length `bins`.
    pub bin_edges: Vec<f64>,
    pub lags: Vec<usize>,
    /// `(bins + 1) x lags`; NaN where the count is zero.
    pub gamma: DMatrix<f64>,
    pub counts: DMatrix<usize>,
}

pub fn st_variogram(
    y: &DMatrix<f64>,
    sites: &SiteSet,
    space_bins: usize,
    max_distance: Option<f64>,
    time_lags: usize,
) -> Result<Variogram> {
    let n = sites.len();
    if n < 2 || y.nrows() != n {
        return Err(Error::input("variogram needs at least two stations matching the response rows"));
    }
    if space_bins == 0 || time_lags == 0 {
        return Err(Error::input("variogram needs at least one distance bin and one time lag"));
    }
    let d = sites.distance_matrix();
    let dmax = max_distance.unwrap_or_else(|| 0.5 * d.max());
    if !(dmax > 0.0) {
        return Err(Error::input("variogram distance range is empty"));
    }
    let w = dmax / space_bins as f64;
    let t_len = y.ncols();
    let mut sums = DMatrix::<f64>::zeros(space_bins + 1, time_lags);
    let mut counts = DMatrix::<usize>::zeros(space_bins + 1, time_lags);
    for a in 0..n {
        for b in 0..n {
            let bin = if a == b {
                0
            } else if d[(a, b)] <= dmax {
                ((d[(a, b)] / w).ceil() as usize).clamp(1, space_bins)
            } else {
                continue;
            };
            for u in 0..time_lags.min(t_len) {
                if a == b && u == 0 {
                    continue;
                }
                for t in 0..t_len - u {
                    let (p, q) = (y[(a, t)], y[(b, t + u)]);
                    if p.is_finite() && q.is_finite() {
                        sums[(bin, u)] += (p - q).powi(2);
                        counts[(bin, u)] += 1;
                    }
                }
            }
        }
    }
    let gamma = DMatrix::from_fn(space_bins + 1, time_lags, |h, u| {
        if counts[(h, u)] == 0 {
            f64::NAN
        } else {
            0.5 * sums[(h, u)] / counts[(h, u)] as f64
        }
    });
    Ok(Variogram {
        bin_edges: (1..=space_bins).map(|k| k as f64 * w).collect(),
        lags: (0..time_lags).collect(),
        gamma,
        counts,
    })
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub station: String,
    pub rmse: Option<f64>,
    pub observed: usize,
    /// Predicted series in original units, one value per fitted date.
    pub predicted: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub pooled_rmse: f64,
    pub in_sample_rmse: f64,
}

fn run_fold(panel: &ObservationPanel, spec: &ModelSpec, options: &EmOptions, k: usize) -> Result<(Vec<f64>, f64, usize)> {
    let train: Vec<usize> = (0..panel.n()).filter(|&i| i != k).collect();
    let model = em_fit(&panel.subset_sites(&train)?, spec, options)?;
    let held = panel.subset_sites(&[k])?;
    let pred = predict_response(&model, &PredictionGrid::from(&held), None)?;
    let mut ss = 0.0;
    let mut m = 0;
    for t in 0..held.t_len() {
        let (o, p) = (held.response[(0, t)], pred.y_hat[(0, t)]);
        if o.is_finite() && p.is_finite() {
            ss += (o - p).powi(2);
            m += 1;
        }
    }
    Ok((pred.y_hat.row(0).iter().copied().collect(), ss, m))
}

/// Leave-one-station-out cross-validation over the named stations. Each fold
/// refits on the remaining stations, with standardization moments from the
/// training stations only, and kriges to the held-out one. Failed folds are
/// reported and left out of the pooled RMSE.
pub fn losocv(panel: &ObservationPanel, spec: &ModelSpec, options: &EmOptions, holdout: &[String]) -> Result<CvReport> {
    if holdout.is_empty() {
        return Err(Error::input("holdout station list is empty"));
    }
    if panel.n() < 3 {
        return Err(Error::input("cross-validation needs at least three stations"));
    }
    let idx = holdout
        .iter()
        .map(|h| panel.sites.position_by_name(h).ok_or_else(|| Error::input(format!("unknown holdout station '{h}'"))))
        .collect::<Result<Vec<_>>>()?;

    let (full, folds) = rayon::join(
        || em_fit(panel, spec, options),
        || {
            idx.par_iter()
                .map(|&k| (k, run_fold(panel, spec, options, k)))
                .collect::<Vec<_>>()
        },
    );
    let in_sample_rmse = full?.report.rmse_in_sample;

    let mut ss = 0.0;
    let mut m = 0;
    let mut out = Vec::with_capacity(folds.len());
    for (k, res) in folds {
        let station = panel.sites.get(k).name();
        match res {
            Ok((predicted, s, c)) => {
                ss += s;
                m += c;
                out.push(FoldResult {
                    station,
                    rmse: (c > 0).then(|| (s / c as f64).sqrt()),
                    observed: c,
                    predicted,
                    error: None,
                });
            }
            Err(e) => {
                log::warn!("fold {station} failed: {e}");
                out.push(FoldResult {
                    station,
                    rmse: None,
                    observed: 0,
                    predicted: Vec::new(),
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let pooled_rmse = if m > 0 { (ss / m as f64).sqrt() } else { f64::NAN };
    Ok(CvReport {
        folds: out,
        pooled_rmse,
        in_sample_rmse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn white_noise_acf_inside_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..2000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let a = acf(&x, 30).unwrap();
        assert_eq!(a[0], 1.0);
        let band = 3.0 / (x.len() as f64).sqrt();
        let inside = a[1..].iter().filter(|v| v.abs() < band).count();
        assert!(inside as f64 >= 0.95 * 30.0);
    }

    #[test]
    fn ar1_acf_matches_coefficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = vec![0.0f64; 1000];
        for t in 1..x.len() {
            let e: f64 = StandardNormal.sample(&mut rng);
            x[t] = 0.8 * x[t - 1] + e;
        }
        let a = acf(&x, 5).unwrap();
        assert!((a[1] - 0.8).abs() < 0.1);
    }

    #[test]
    fn constant_or_short_series_skipped() {
        assert!(acf(&[2.0; 50], 30).is_none());
        assert!(acf(&[1.0, 2.0, 3.0], 30).is_none());
        let r = DMatrix::from_row_slice(2, 40, &[[1.0; 40], [0.0; 40]].concat());
        assert!(station_acf(&r, 5).is_empty());
    }

    #[test]
    fn missing_values_are_pairwise_complete() {
        let mut x: Vec<f64> = (0..60).map(|t| ((t * 7 % 11) as f64).sin()).collect();
        x[10] = f64::NAN;
        let a = acf(&x, 3).unwrap();
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn variogram_self_bin_and_symmetry() {
        let sites = SiteSet::from_coords(&[(45.0, 9.0), (45.1, 9.0), (45.0, 9.4), (45.3, 9.2)]).unwrap();
        let y = DMatrix::from_fn(4, 12, |i, t| ((i * 5 + t * 3) % 7) as f64);
        let v = st_variogram(&y, &sites, 3, None, 4).unwrap();
        assert_eq!(v.counts[(0, 0)], 0);
        assert!(v.gamma[(0, 0)].is_nan());
        let perm = [2, 0, 3, 1];
        let sp = sites.subset(&perm).unwrap();
        let yp = DMatrix::from_fn(4, 12, |i, t| y[(perm[i], t)]);
        let vp = st_variogram(&yp, &sp, 3, None, 4).unwrap();
        assert_eq!(v.counts, vp.counts);
        for (a, b) in v.gamma.iter().zip(vp.gamma.iter()) {
            assert!((a.is_nan() && b.is_nan()) || (a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_holdout_is_an_error() {
        let sites = SiteSet::from_coords(&[(45.0, 9.0), (45.1, 9.0), (45.0, 9.4)]).unwrap();
        let panel = ObservationPanel {
            sites,
            response: DMatrix::zeros(3, 2),
            covariates: crate::model::CovariateTable {
                dates: vec![
                    chrono::NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
                    chrono::NaiveDate::from_ymd_opt(2020, 1, 2).unwrap(),
                ],
                columns: Default::default(),
            },
            meta: vec![Default::default(); 3],
        };
        let spec = ModelSpec::new(vec![]);
        assert!(losocv(&panel, &spec, &EmOptions::default(), &[]).is_err());
    }
}
