// SPDX-License-Identifier: Apache-2.0

//! Prediction at unmonitored sites.
//!
//! The latent field is extended to new sites by simple kriging of the
//! smoothed states, one time step at a time, and combined with the
//! regression part of the fitted model.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use nalgebra::DMatrix;

use crate::emfit::FittedModel;
use crate::error::{Error, Result};
use crate::geo::{cross_correlation, geodetic_distance, jittered_correlation, CorrelationKernel, SiteSet};
use crate::linalg::{cholesky, JITTER};
use crate::model::{CovariateTable, PredictionGrid, SiteMeta};

/// Per-site, per-day predictions in original units.
#[derive(Debug, Clone)]
pub struct GridPrediction {
    pub sites: SiteSet,
    pub meta: Vec<SiteMeta>,
    pub dates: Vec<NaiveDate>,
    /// `m x T` predicted response; NaN where a covariate is missing.
    pub y_hat: DMatrix<f64>,
    /// `m x T` kriged latent field (standardized scale).
    pub z_hat: DMatrix<f64>,
    /// Number of pixel-days skipped for missing covariates.
    pub skipped: usize,
}

/// Simple-kriging weights `R^{-1} r0` as an `n x m` matrix. The
/// cross-correlation of a new site that coincides with a fitted one gets the
/// same jitter as the diagonal of `R`, so such a site copies that station.
pub fn kriging_weights(fitted_sites: &SiteSet, new_sites: &SiteSet, kernel: &CorrelationKernel) -> Result<DMatrix<f64>> {
    let r = jittered_correlation(fitted_sites, kernel);
    let mut r0 = cross_correlation(new_sites, fitted_sites, kernel);
    for i in 0..new_sites.len() {
        for j in 0..fitted_sites.len() {
            if geodetic_distance(new_sites.get(i), fitted_sites.get(j))? == 0.0 {
                r0[(i, j)] = 1.0 + JITTER;
            }
        }
    }
    let chol = cholesky(&r, "station correlation matrix", None)?;
    Ok(chol.solve(&r0.transpose()))
}

/// Krige smoothed states (`n x T`, fitted sites) to `new_sites`; returns `m x T`.
pub fn krige_latent(
    z_smooth: &DMatrix<f64>,
    fitted_sites: &SiteSet,
    new_sites: &SiteSet,
    kernel: &CorrelationKernel,
) -> Result<DMatrix<f64>> {
    if z_smooth.nrows() != fitted_sites.len() {
        return Err(Error::input(format!(
            "state matrix has {} rows for {} sites",
            z_smooth.nrows(),
            fitted_sites.len()
        )));
    }
    let w = kriging_weights(fitted_sites, new_sites, kernel)?;
    Ok(w.transpose() * z_smooth)
}

/// Restrict a covariate table to the given dates, in the given order.
pub fn select_dates(table: &CovariateTable, dates: &[NaiveDate]) -> Result<CovariateTable> {
    let pos: BTreeMap<NaiveDate, usize> = table.dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();
    let idx = dates
        .iter()
        .map(|d| pos.get(d).copied().ok_or_else(|| Error::input(format!("date {d} not covered by the covariates"))))
        .collect::<Result<Vec<_>>>()?;
    let columns = table
        .columns
        .iter()
        .map(|(k, m)| (k.clone(), DMatrix::from_fn(m.nrows(), idx.len(), |i, t| m[(i, idx[t])])))
        .collect();
    Ok(CovariateTable {
        dates: dates.to_vec(),
        columns,
    })
}

/// Column indices into the fitted date range for each requested date.
pub fn fitted_date_index(model: &FittedModel, dates: &[NaiveDate]) -> Result<Vec<usize>> {
    let first = *model.dates.first().ok_or_else(|| Error::input("fitted model has no dates"))?;
    dates
        .iter()
        .map(|d| {
            let k = (*d - first).num_days();
            if k < 0 || k as usize >= model.dates.len() || model.dates[k as usize] != *d {
                Err(Error::input(format!("date {d} is outside the fitted period")))
            } else {
                Ok(k as usize)
            }
        })
        .collect()
}

/// Predict the response on `grid` for `dates` (all grid dates when `None`).
/// Every date must lie in the fitted period, since the latent field is only
/// known there.
pub fn predict_response(model: &FittedModel, grid: &PredictionGrid, dates: Option<&[NaiveDate]>) -> Result<GridPrediction> {
    let dates: Vec<NaiveDate> = dates.map(|d| d.to_vec()).unwrap_or_else(|| grid.dates().to_vec());
    for term in &model.spec.terms {
        if !grid.covariates.columns.contains_key(term) {
            return Err(Error::schema(format!("grid lacks covariate '{term}'")));
        }
    }
    if grid.meta.len() != grid.n() {
        return Err(Error::schema("grid metadata does not match its sites"));
    }
    let tidx = fitted_date_index(model, &dates)?;
    let table = select_dates(&grid.covariates, &dates)?;
    let p = &model.params;
    let design = p.standardization.design(&model.spec, &table, grid.n())?;

    let z_fit = DMatrix::from_fn(model.z_smooth.nrows(), tidx.len(), |i, t| model.z_smooth[(i, tidx[t])]);
    let z_hat = krige_latent(&z_fit, &model.sites, &grid.sites, &model.kernel()?)?;

    let mut skipped = 0;
    let y_hat = DMatrix::from_fn(grid.n(), dates.len(), |i, t| {
        let x = design[t].row(i);
        if x.iter().any(|v| !v.is_finite()) {
            skipped += 1;
            return f64::NAN;
        }
        p.standardization.response.invert(x.transpose().dot(&p.beta) + p.alpha * z_hat[(i, t)])
    });
    if skipped > 0 {
        log::warn!("{skipped} pixel-days skipped for missing covariates");
    }
    Ok(GridPrediction {
        sites: grid.sites.clone(),
        meta: grid.meta.clone(),
        dates,
        y_hat,
        z_hat,
        skipped,
    })
}
