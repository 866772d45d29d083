// SPDX-License-Identifier: Apache-2.0

//! Forward sampler for the model, used as ground truth by the estimation and
//! validation tests and by the `simulate` command.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{jittered_correlation, CorrelationKernel, Site, SiteSet};
use crate::linalg::cholesky;
use crate::model::{CovariateTable, ObservationPanel, PredictionGrid, SiteMeta};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    /// Uniform in a latitude/longitude box.
    Random {
        n: usize,
        lat: (f64, f64),
        lon: (f64, f64),
    },
    Explicit { coords: Vec<(f64, f64)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Skedastic {
    Constant { value: f64 },
    /// `sigma2_t` oscillates between `min` and `max` with the given period
    /// (days), peaking at t = 0.
    Sinusoidal { min: f64, max: f64, period: f64 },
    Explicit { values: Vec<f64> },
}

impl Skedastic {
    pub fn profile(&self, t_len: usize) -> Result<Vec<f64>> {
        let v: Vec<f64> = match self {
            Skedastic::Constant { value } => vec![*value; t_len],
            Skedastic::Sinusoidal { min, max, period } => {
                if !(period > &0.0) {
                    return Err(Error::input("sinusoidal period must be positive"));
                }
                let mid = 0.5 * (min + max);
                let amp = 0.5 * (max - min);
                (0..t_len)
                    .map(|t| mid + amp * (2.0 * std::f64::consts::PI * t as f64 / period).cos())
                    .collect()
            }
            Skedastic::Explicit { values } => {
                if values.len() != t_len {
                    return Err(Error::input(format!(
                        "explicit variance profile has {} values for {t_len} days",
                        values.len()
                    )));
                }
                values.clone()
            }
        };
        if v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            return Err(Error::input("variance profile must be positive"));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MissingMechanism {
    #[default]
    None,
    /// Each cell missing independently with probability `rate`.
    Uniform { rate: f64 },
    /// Each station gets `gaps` runs of consecutive missing days, each of
    /// length 1..=`max_len`.
    Blocks { gaps: usize, max_len: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialState {
    /// `z_0 ~ N(0, R)`, the stationary law of the latent field.
    #[default]
    Stationary,
    Given { mu0: Vec<f64>, sigma0: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueParams {
    /// First entry is the intercept.
    pub beta: Vec<f64>,
    pub alpha: f64,
    pub g: f64,
    pub theta: f64,
}

fn default_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2016, 1, 1).expect("valid date")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub layout: Layout,
    pub t_len: usize,
    pub params: TrueParams,
    pub skedastic: Skedastic,
    #[serde(default)]
    pub missing: MissingMechanism,
    #[serde(default)]
    pub initial: InitialState,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_start")]
    pub start_date: NaiveDate,
}

impl SimSpec {
    pub fn covariate_names(&self) -> Vec<String> {
        (1..self.params.beta.len()).map(|j| format!("x{j}")).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub panel: ObservationPanel,
    /// `n x (T+1)` latent path; column 0 is `z_0`.
    pub latent: DMatrix<f64>,
    pub sigma2_eps: Vec<f64>,
    /// Responses before the missing mechanism was applied.
    pub complete_response: DMatrix<f64>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn dates_from(start: NaiveDate, t_len: usize) -> Vec<NaiveDate> {
    (0..t_len).map(|d| start + chrono::Days::new(d as u64)).collect()
}

/// Draw one panel and latent path from the model.
pub fn simulate(spec: &SimSpec) -> Result<SimOutput> {
    let tp = &spec.params;
    if spec.t_len == 0 {
        return Err(Error::input("t_len must be positive"));
    }
    if tp.beta.is_empty() {
        return Err(Error::input("beta must contain at least the intercept"));
    }
    if !(tp.g.abs() < 1.0) {
        return Err(Error::input("simulation requires |g| < 1"));
    }
    let kernel = CorrelationKernel::exponential(tp.theta)?;
    let sigma2 = spec.skedastic.profile(spec.t_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let sites = match &spec.layout {
        Layout::Random { n, lat, lon } => {
            if *n == 0 || lat.0 >= lat.1 || lon.0 >= lon.1 {
                return Err(Error::input("random layout needs n > 0 and non-empty lat/lon ranges"));
            }
            let coords: Vec<Site> = (0..*n)
                .map(|i| {
                    let la = rng.random_range(lat.0..lat.1);
                    let lo = rng.random_range(lon.0..lon.1);
                    Site::new(i, la, lo).with_label(format!("S{:03}", i + 1))
                })
                .collect();
            SiteSet::new(coords)?
        }
        Layout::Explicit { coords } => SiteSet::new(
            coords
                .iter()
                .enumerate()
                .map(|(i, &(la, lo))| Site::new(i, la, lo).with_label(format!("S{:03}", i + 1)))
                .collect(),
        )?,
    };
    let n = sites.len();
    let t_len = spec.t_len;
    let p = tp.beta.len();

    let names = spec.covariate_names();
    let mut columns = BTreeMap::new();
    for name in &names {
        let m = DMatrix::from_fn(n, t_len, |_, _| 0.0);
        columns.insert(name.clone(), m);
    }
    // Fill covariates in a fixed (column, time, site) order.
    for name in &names {
        let m = columns.get_mut(name).expect("inserted");
        for t in 0..t_len {
            for i in 0..n {
                m[(i, t)] = normal(&mut rng);
            }
        }
    }

    let r = jittered_correlation(&sites, &kernel);
    let r_chol = cholesky(&r, "spatial correlation matrix", None)?.l();
    let draw_field = |rng: &mut ChaCha8Rng| -> DVector<f64> {
        let e = DVector::from_fn(n, |_, _| normal(rng));
        &r_chol * e
    };

    let mut latent = DMatrix::zeros(n, t_len + 1);
    let z0 = match &spec.initial {
        InitialState::Stationary => draw_field(&mut rng),
        InitialState::Given { mu0, sigma0 } => {
            if mu0.len() != n || sigma0.len() != n || sigma0.iter().any(|r| r.len() != n) {
                return Err(Error::input("initial state dimensions do not match the layout"));
            }
            let s = DMatrix::from_fn(n, n, |i, j| sigma0[i][j]);
            let l = cholesky(&s, "initial covariance", None)?.l();
            let e = DVector::from_fn(n, |_, _| normal(&mut rng));
            DVector::from_column_slice(mu0) + l * e
        }
    };
    latent.set_column(0, &z0);
    let innov_scale = (1.0 - tp.g * tp.g).sqrt();
    for t in 1..=t_len {
        let prev = latent.column(t - 1).into_owned();
        let z = prev * tp.g + draw_field(&mut rng) * innov_scale;
        latent.set_column(t, &z);
    }

    let mut y = DMatrix::zeros(n, t_len);
    for t in 0..t_len {
        let sd = sigma2[t].sqrt();
        for i in 0..n {
            let mut mean = tp.beta[0];
            for (j, name) in names.iter().enumerate() {
                mean += tp.beta[j + 1] * columns[name][(i, t)];
            }
            y[(i, t)] = mean + tp.alpha * latent[(i, t + 1)] + sd * normal(&mut rng);
        }
    }
    debug_assert_eq!(names.len() + 1, p);

    let complete = y.clone();
    match &spec.missing {
        MissingMechanism::None => {}
        MissingMechanism::Uniform { rate } => {
            if !(0.0..1.0).contains(rate) {
                return Err(Error::input("missing rate must lie in [0, 1)"));
            }
            for t in 0..t_len {
                for i in 0..n {
                    if rng.random::<f64>() < *rate {
                        y[(i, t)] = f64::NAN;
                    }
                }
            }
        }
        MissingMechanism::Blocks { gaps, max_len } => {
            if *max_len == 0 {
                return Err(Error::input("block gaps need max_len >= 1"));
            }
            for i in 0..n {
                for _ in 0..*gaps {
                    let len = rng.random_range(1..=*max_len);
                    let start = rng.random_range(0..t_len);
                    for t in start..(start + len).min(t_len) {
                        y[(i, t)] = f64::NAN;
                    }
                }
            }
        }
    }

    Ok(SimOutput {
        panel: ObservationPanel {
            sites,
            response: y,
            covariates: CovariateTable {
                dates: dates_from(spec.start_date, t_len),
                columns,
            },
            meta: vec![SiteMeta::default(); n],
        },
        latent,
        sigma2_eps: sigma2,
        complete_response: complete,
    })
}

/// Regular lattice of pixels over a latitude/longitude box with i.i.d.
/// standard-normal covariates and synthetic metadata (altitude, forest flag,
/// province by quadrant, land type), for exercising prediction and scenario
/// runs on simulated fits.
pub fn simulate_grid(
    lat: (f64, f64),
    lon: (f64, f64),
    spacing: f64,
    covariates: &[String],
    dates: &[NaiveDate],
    seed: u64,
) -> Result<PredictionGrid> {
    if !(spacing > 0.0) || lat.0 >= lat.1 || lon.0 >= lon.1 {
        return Err(Error::input("grid needs a positive spacing and non-empty ranges"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_lat = ((lat.1 - lat.0) / spacing).floor() as usize + 1;
    let n_lon = ((lon.1 - lon.0) / spacing).floor() as usize + 1;
    let (mid_lat, mid_lon) = (0.5 * (lat.0 + lat.1), 0.5 * (lon.0 + lon.1));
    let mut sites = Vec::new();
    let mut meta = Vec::new();
    for a in 0..n_lat {
        for b in 0..n_lon {
            let la = lat.0 + a as f64 * spacing;
            let lo = lon.0 + b as f64 * spacing;
            let id = sites.len();
            sites.push(Site::new(id, la, lo).with_label(format!("P{:05}", id + 1)));
            let quadrant = match (la >= mid_lat, lo >= mid_lon) {
                (true, true) => "NE",
                (true, false) => "NW",
                (false, true) => "SE",
                (false, false) => "SW",
            };
            meta.push(SiteMeta {
                altitude: Some(rng.random_range(0.0..1200.0)),
                province: Some(quadrant.to_string()),
                land_type: Some(if rng.random::<f64>() < 0.3 { "urban" } else { "rural" }.to_string()),
                forest: Some(rng.random::<f64>() < 0.2),
            });
        }
    }
    let sites = SiteSet::new(sites)?;
    let n = sites.len();
    let mut columns = BTreeMap::new();
    for name in covariates {
        let m = DMatrix::from_fn(n, dates.len(), |_, _| 0.0);
        columns.insert(name.clone(), m);
    }
    for name in covariates {
        let m = columns.get_mut(name).expect("inserted");
        for t in 0..dates.len() {
            for i in 0..n {
                m[(i, t)] = normal(&mut rng);
            }
        }
    }
    Ok(PredictionGrid {
        sites,
        covariates: CovariateTable {
            dates: dates.to_vec(),
            columns,
        },
        meta,
    })
}
