// SPDX-License-Identifier: Apache-2.0

//! Covariate-reduction ("what-if") scenarios.
//!
//! A target covariate is scaled by `1 - r` on a set of pixel-days. Because
//! the model is linear in the standardized design, the change in the
//! predicted response is `std_y * dx' beta` where `dx` is the difference of
//! the original and counterfactual design rows; intercept and latent terms
//! cancel. Group means come with a standard deviation combining the
//! uncertainty of `beta` (fully correlated across the group) and independent
//! measurement errors of the two scenarios.

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::emfit::FittedModel;
use crate::error::{Error, Result};
use crate::model::{CovariateTable, PredictionGrid, Season, SiteMeta};
use crate::predict::{fitted_date_index, predict_response, select_dates};

/// Days on which the reduction applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeWindow {
    #[default]
    All,
    Seasons {
        seasons: Vec<Season>,
    },
    Dates {
        dates: Vec<NaiveDate>,
    },
    Range {
        start: NaiveDate,
        end: NaiveDate,
    },
}

impl TimeWindow {
    pub fn contains(&self, date: NaiveDate, season: Season) -> bool {
        match self {
            TimeWindow::All => true,
            TimeWindow::Seasons { seasons } => seasons.contains(&season),
            TimeWindow::Dates { dates } => dates.contains(&date),
            TimeWindow::Range { start, end } => *start <= date && date <= *end,
        }
    }
}

/// Pixel filter. Altitude is compared strictly (`altitude < max_altitude`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SpatialMask {
    #[serde(default)]
    pub max_altitude: Option<f64>,
    #[serde(default)]
    pub exclude_forest: bool,
    #[serde(default)]
    pub provinces: Option<Vec<String>>,
    #[serde(default)]
    pub land_types: Option<Vec<String>>,
}

impl SpatialMask {
    /// The usual lowland, non-forest mask: below 640 m and not forested.
    pub fn lowland() -> Self {
        Self {
            max_altitude: Some(640.0),
            exclude_forest: true,
            ..Self::default()
        }
    }

    pub fn admits(&self, label: &str, meta: &SiteMeta) -> Result<bool> {
        if let Some(max) = self.max_altitude {
            let a = meta
                .altitude
                .ok_or_else(|| Error::input(format!("pixel {label} has no altitude for the mask")))?;
            if !(a < max) {
                return Ok(false);
            }
        }
        if self.exclude_forest {
            let f = meta
                .forest
                .ok_or_else(|| Error::input(format!("pixel {label} has no forest flag for the mask")))?;
            if f {
                return Ok(false);
            }
        }
        if let Some(ps) = &self.provinces {
            match &meta.province {
                Some(p) if ps.contains(p) => {}
                _ => return Ok(false),
            }
        }
        if let Some(ls) = &self.land_types {
            match &meta.land_type {
                Some(l) if ls.contains(l) => {}
                _ => return Ok(false),
            }
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    Overall,
    Province,
    LandType,
    Season,
}

impl GroupKey {
    pub fn name(&self) -> &'static str {
        match self {
            GroupKey::Overall => "overall",
            GroupKey::Province => "province",
            GroupKey::LandType => "land_type",
            GroupKey::Season => "season",
        }
    }
}

fn default_group_by() -> Vec<GroupKey> {
    vec![GroupKey::Overall]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub target: String,
    pub r: f64,
    #[serde(default)]
    pub window: TimeWindow,
    #[serde(default)]
    pub mask: SpatialMask,
    #[serde(default = "default_group_by")]
    pub group_by: Vec<GroupKey>,
}

impl ScenarioSpec {
    pub fn new(name: impl Into<String>, target: impl Into<String>, r: f64) -> Self {
        Self {
            name: name.into(),
            target: target.into(),
            r,
            window: TimeWindow::All,
            mask: SpatialMask::default(),
            group_by: default_group_by(),
        }
    }

    pub fn validate(&self, model: &FittedModel) -> Result<()> {
        if !(0.0..=1.0).contains(&self.r) {
            return Err(Error::input(format!("reduction factor {} outside [0, 1]", self.r)));
        }
        if !model.spec.terms.contains(&self.target) {
            return Err(Error::schema(format!("unknown target covariate '{}'", self.target)));
        }
        if model.spec.binary.contains(&self.target) {
            return Err(Error::input(format!("target '{}' is an indicator", self.target)));
        }
        Ok(())
    }
}

/// Pixel-days selected by a scenario, as grid row and date-column indices.
#[derive(Debug, Clone)]
pub struct Selection {
    pub pixels: Vec<usize>,
    pub days: Vec<usize>,
}

pub fn select(model: &FittedModel, grid: &PredictionGrid, spec: &ScenarioSpec) -> Result<Selection> {
    let mut pixels = Vec::new();
    for (i, (site, meta)) in grid.sites.iter().zip(&grid.meta).enumerate() {
        if spec.mask.admits(&site.name(), meta)? {
            pixels.push(i);
        }
    }
    let days: Vec<usize> = grid
        .dates()
        .iter()
        .enumerate()
        .filter(|(_, d)| spec.window.contains(**d, model.spec.seasons.season(**d)))
        .map(|(t, _)| t)
        .collect();
    if pixels.is_empty() {
        return Err(Error::input(format!("scenario '{}': spatial mask selects no pixels", spec.name)));
    }
    if days.is_empty() {
        return Err(Error::input(format!("scenario '{}': time window selects no days", spec.name)));
    }
    Ok(Selection { pixels, days })
}

/// Counterfactual covariates: the target scaled by `1 - r` on the selected
/// pixel-days, in original units. Everything else is copied.
pub fn apply_reduction(model: &FittedModel, grid: &PredictionGrid, spec: &ScenarioSpec) -> Result<CovariateTable> {
    spec.validate(model)?;
    let sel = select(model, grid, spec)?;
    let mut out = grid.covariates.clone();
    let col = out
        .columns
        .get_mut(&spec.target)
        .ok_or_else(|| Error::schema(format!("grid lacks covariate '{}'", spec.target)))?;
    for &i in &sel.pixels {
        for &t in &sel.days {
            col[(i, t)] *= 1.0 - spec.r;
        }
    }
    Ok(out)
}

/// Per pixel-day changes restricted to the scenario's selection.
#[derive(Debug, Clone)]
pub struct DailyDelta {
    pub selection: Selection,
    pub dates: Vec<NaiveDate>,
    /// `|pixels| x |days|` change `y_hat - y_hat^r` in original units; NaN
    /// where a covariate is missing.
    pub delta: DMatrix<f64>,
    /// Standardized design differences, indexed `[day][pixel]`.
    pub dx: Vec<Vec<DVector<f64>>>,
}

pub fn daily_delta(model: &FittedModel, grid: &PredictionGrid, spec: &ScenarioSpec) -> Result<DailyDelta> {
    let cf = apply_reduction(model, grid, spec)?;
    let sel = select(model, grid, spec)?;
    let dates: Vec<NaiveDate> = sel.days.iter().map(|&t| grid.dates()[t]).collect();
    let st = &model.params.standardization;
    let base = st.design(&model.spec, &select_dates(&grid.covariates, &dates)?, grid.n())?;
    let red = st.design(&model.spec, &select_dates(&cf, &dates)?, grid.n())?;
    let sy = st.response.std;
    let beta = &model.params.beta;
    let mut delta = DMatrix::from_element(sel.pixels.len(), dates.len(), f64::NAN);
    let mut dx = Vec::with_capacity(dates.len());
    for t in 0..dates.len() {
        let mut row = Vec::with_capacity(sel.pixels.len());
        for (a, &i) in sel.pixels.iter().enumerate() {
            let d = (base[t].row(i) - red[t].row(i)).transpose();
            if d.iter().all(|v| v.is_finite()) {
                delta[(a, t)] = sy * d.dot(beta);
            }
            row.push(d);
        }
        dx.push(row);
    }
    Ok(DailyDelta {
        selection: sel,
        dates,
        delta,
        dx,
    })
}

/// One aggregated row: change is `-mean delta`, so reductions are negative.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRow {
    pub key: String,
    pub group: String,
    pub pixels: usize,
    pub days: usize,
    pub cells: usize,
    pub y_bar: f64,
    pub mean_delta: f64,
    pub change: f64,
    pub std: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PixelRow {
    pub pixel: String,
    pub lat: f64,
    pub lon: f64,
    pub cells: usize,
    pub mean_delta: f64,
    pub std: f64,
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub name: String,
    pub r: f64,
    pub deltas: DailyDelta,
    pub groups: Vec<GroupRow>,
    pub pixel_map: Vec<PixelRow>,
}

/// Mean change over a set of cells and its standard deviation in original
/// units. Cells are `(pixel slot, day slot)` pairs into `deltas`.
pub fn group_moments(model: &FittedModel, deltas: &DailyDelta, sigma2: &[f64], cells: &[(usize, usize)]) -> (f64, f64) {
    let p = model.params.beta.len();
    let mut dx_bar = DVector::zeros(p);
    let mut sum = 0.0;
    let mut noise = 0.0;
    for &(a, t) in cells {
        sum += deltas.delta[(a, t)];
        dx_bar += &deltas.dx[t][a];
        noise += 2.0 * sigma2[t];
    }
    let k = cells.len() as f64;
    dx_bar /= k;
    let var = (dx_bar.transpose() * &model.report.beta_cov * &dx_bar)[(0, 0)] + noise / (k * k);
    let sy = model.params.standardization.response.std;
    (sum / k, sy * var.max(0.0).sqrt())
}

fn group_label(key: GroupKey, meta: &SiteMeta, season: Season) -> String {
    let na = || "NA".to_string();
    match key {
        GroupKey::Overall => "Overall".to_string(),
        GroupKey::Province => meta.province.clone().unwrap_or_else(na),
        GroupKey::LandType => meta.land_type.clone().unwrap_or_else(na),
        GroupKey::Season => season.name().to_string(),
    }
}

/// Aggregate daily deltas into the requested groups and a per-pixel map.
/// `baseline` holds baseline predictions on the same selection layout.
pub fn aggregate(
    model: &FittedModel,
    grid: &PredictionGrid,
    spec: &ScenarioSpec,
    deltas: &DailyDelta,
    baseline: &DMatrix<f64>,
) -> Result<ScenarioResult> {
    let tidx = fitted_date_index(model, &deltas.dates)?;
    let sigma2: Vec<f64> = tidx.iter().map(|&k| model.params.sigma2_eps[k]).collect();
    let sel = &deltas.selection;
    let usable = |a: usize, t: usize| deltas.delta[(a, t)].is_finite() && baseline[(a, t)].is_finite();

    let mut groups = Vec::new();
    for &key in &spec.group_by {
        let mut buckets: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
        for (a, &i) in sel.pixels.iter().enumerate() {
            for (t, d) in deltas.dates.iter().enumerate() {
                let label = group_label(key, &grid.meta[i], model.spec.seasons.season(*d));
                let cells = buckets.entry(label).or_default();
                if usable(a, t) {
                    cells.push((a, t));
                }
            }
        }
        for (label, cells) in buckets {
            if cells.is_empty() {
                log::warn!("scenario '{}': group {}={} has no usable pixel-days, skipped", spec.name, key.name(), label);
                continue;
            }
            let (mean, std) = group_moments(model, deltas, &sigma2, &cells);
            let y_bar = cells.iter().map(|&(a, t)| baseline[(a, t)]).sum::<f64>() / cells.len() as f64;
            let px: BTreeSet<usize> = cells.iter().map(|c| c.0).collect();
            let dy: BTreeSet<usize> = cells.iter().map(|c| c.1).collect();
            groups.push(GroupRow {
                key: key.name().to_string(),
                group: label,
                pixels: px.len(),
                days: dy.len(),
                cells: cells.len(),
                y_bar,
                mean_delta: mean,
                change: -mean,
                std,
                percent: -100.0 * mean / y_bar,
            });
        }
    }

    let mut pixel_map = Vec::new();
    for (a, &i) in sel.pixels.iter().enumerate() {
        let cells: Vec<(usize, usize)> = (0..deltas.dates.len()).filter(|&t| usable(a, t)).map(|t| (a, t)).collect();
        if cells.is_empty() {
            continue;
        }
        let (mean, std) = group_moments(model, deltas, &sigma2, &cells);
        let site = grid.sites.get(i);
        pixel_map.push(PixelRow {
            pixel: site.name(),
            lat: site.lat,
            lon: site.lon,
            cells: cells.len(),
            mean_delta: mean,
            std,
        });
    }
    Ok(ScenarioResult {
        name: spec.name.clone(),
        r: spec.r,
        deltas: deltas.clone(),
        groups,
        pixel_map,
    })
}

/// Deltas, baseline predictions and aggregation in one call.
pub fn run_scenario(model: &FittedModel, grid: &PredictionGrid, spec: &ScenarioSpec) -> Result<ScenarioResult> {
    let deltas = daily_delta(model, grid, spec)?;
    let pred = predict_response(model, grid, Some(&deltas.dates))?;
    let sel = &deltas.selection;
    let baseline = DMatrix::from_fn(sel.pixels.len(), deltas.dates.len(), |a, t| pred.y_hat[(sel.pixels[a], t)]);
    aggregate(model, grid, spec, &deltas, &baseline)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_is_strict_on_altitude() {
        let m = SpatialMask::lowland();
        let meta = |alt: f64, forest: bool| SiteMeta {
            altitude: Some(alt),
            forest: Some(forest),
            ..SiteMeta::default()
        };
        assert!(m.admits("a", &meta(639.9, false)).unwrap());
        assert!(!m.admits("a", &meta(640.0, false)).unwrap());
        assert!(!m.admits("a", &meta(100.0, true)).unwrap());
        assert!(m.admits("a", &SiteMeta::default()).is_err());
    }

    #[test]
    fn window_variants() {
        let d = NaiveDate::from_ymd_opt(2020, 1, 10).unwrap();
        assert!(TimeWindow::All.contains(d, Season::Winter));
        assert!(TimeWindow::Seasons { seasons: vec![Season::Winter] }.contains(d, Season::Winter));
        assert!(!TimeWindow::Seasons { seasons: vec![Season::Summer] }.contains(d, Season::Winter));
        let r = TimeWindow::Range {
            start: d,
            end: d + chrono::Days::new(3),
        };
        assert!(r.contains(d + chrono::Days::new(3), Season::Winter));
        assert!(!r.contains(d + chrono::Days::new(4), Season::Winter));
    }

    #[test]
    fn spec_deserializes_with_defaults() {
        let s: ScenarioSpec = toml::from_str("name = \"PRIA\"\ntarget = \"nh3\"\nr = 0.26\n").unwrap();
        assert_eq!(s.window, TimeWindow::All);
        assert_eq!(s.group_by, vec![GroupKey::Overall]);
        let w: ScenarioSpec = toml::from_str(
            "name = \"w\"\ntarget = \"nh3\"\nr = 0.5\ngroup_by = [\"province\", \"season\"]\n[window]\nkind = \"seasons\"\nseasons = [\"winter\"]\n",
        )
        .unwrap();
        assert_eq!(w.window, TimeWindow::Seasons { seasons: vec![Season::Winter] });
    }
}
