// SPDX-License-Identifier: Apache-2.0

//! CSV ingestion and output, run configuration and the fit artifact.
//!
//! Panels and grids are long-format CSV files with one row per
//! (station, date). Every output file is written to a temporary file in the
//! target directory and renamed into place, so a failed run never leaves a
//! partial file behind.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use indexmap::IndexMap;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{CvReport, StationAcf, Variogram};
use crate::emfit::{EmOptions, FitReport, FittedModel};
use crate::error::{Error, Result};
use crate::geo::{Site, SiteSet};
use crate::model::{CovariateTable, ModelSpec, ObservationPanel, PredictionGrid, SiteMeta};
use crate::predict::GridPrediction;
use crate::scenario::{GroupKey, ScenarioResult, ScenarioSpec, SpatialMask, TimeWindow};
use crate::sim::SimSpec;

/// Major version of the fit artifact layout. Loaders reject other majors.
pub const SCHEMA_MAJOR: u32 = 1;
pub const SCHEMA_VERSION: &str = "1.0";

fn default_station() -> String {
    "station_id".into()
}
fn default_date() -> String {
    "date".into()
}
fn default_lat() -> String {
    "latitude".into()
}
fn default_lon() -> String {
    "longitude".into()
}
fn default_response() -> String {
    "response".into()
}
fn default_altitude() -> String {
    "altitude".into()
}
fn default_province() -> String {
    "province".into()
}
fn default_land_type() -> String {
    "land_type".into()
}
fn default_forest() -> String {
    "forest".into()
}

/// Names of the CSV columns holding each field. Metadata columns are read
/// when present in the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMap {
    #[serde(default = "default_station")]
    pub station_id: String,
    #[serde(default = "default_date")]
    pub date: String,
    #[serde(default = "default_lat")]
    pub latitude: String,
    #[serde(default = "default_lon")]
    pub longitude: String,
    #[serde(default = "default_response")]
    pub response: String,
    #[serde(default = "default_altitude")]
    pub altitude: String,
    #[serde(default = "default_province")]
    pub province: String,
    #[serde(default = "default_land_type")]
    pub land_type: String,
    #[serde(default = "default_forest")]
    pub forest: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

fn default_threshold() -> f64 {
    1.0
}
fn default_rain_name() -> String {
    "rain".into()
}

/// Derive a rain indicator from a precipitation column: 1 when the value
/// exceeds the threshold, 0 otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RainRule {
    pub source: String,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_rain_name")]
    pub name: String,
}

impl RainRule {
    pub fn indicator(&self, precipitation: f64) -> f64 {
        if !precipitation.is_finite() {
            f64::NAN
        } else if precipitation > self.threshold {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DataConfig {
    #[serde(default)]
    pub panel: Option<PathBuf>,
    #[serde(default)]
    pub grid: Option<PathBuf>,
    #[serde(default)]
    pub columns: ColumnMap,
    /// Model term -> CSV column, for terms whose column name differs.
    #[serde(default)]
    pub covariates: BTreeMap<String, String>,
    #[serde(default)]
    pub rain: Option<RainRule>,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(r) = &self.rain {
            if !(r.threshold >= 0.0) {
                return Err(Error::input(format!("rain threshold {} must be non-negative", r.threshold)));
            }
        }
        Ok(())
    }
}

fn parse_value(s: &str) -> Option<f64> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return None;
    }
    s.parse().ok()
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "t" => Some(true),
        "0" | "false" | "no" | "f" => Some(false),
        _ => None,
    }
}

/// Station x date table read from a long CSV file.
#[derive(Debug, Clone)]
pub struct LongTable {
    pub sites: SiteSet,
    pub meta: Vec<SiteMeta>,
    pub dates: Vec<NaiveDate>,
    pub response: Option<DMatrix<f64>>,
    pub covariates: BTreeMap<String, DMatrix<f64>>,
}

struct StationRec {
    lat: f64,
    lon: f64,
    line: usize,
    meta: SiteMeta,
}

/// Read a long-format CSV into station x date matrices. Dates span the full
/// daily range found in the file; absent rows become missing cells.
pub fn read_long_csv(path: &Path, cfg: &DataConfig, terms: &[String], with_response: bool) -> Result<LongTable> {
    cfg.validate()?;
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::input(format!("cannot read {}: {e}", path.display())))?;
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let need = |name: &str| find(name).ok_or_else(|| Error::schema(format!("{}: unknown column '{name}'", path.display())));
    let c = &cfg.columns;
    let (ci, cd, clat, clon) = (need(&c.station_id)?, need(&c.date)?, need(&c.latitude)?, need(&c.longitude)?);
    let cresp = if with_response { Some(need(&c.response)?) } else { None };
    let (calt, cprov, cland, cfor) = (find(&c.altitude), find(&c.province), find(&c.land_type), find(&c.forest));

    // term -> (column index, derived rain rule)
    let mut term_cols = Vec::with_capacity(terms.len());
    for term in terms {
        match &cfg.rain {
            Some(rule) if rule.name == *term => term_cols.push((term.clone(), need(&rule.source)?, Some(rule))),
            _ => {
                let col = cfg.covariates.get(term).unwrap_or(term);
                term_cols.push((term.clone(), need(col)?, None));
            }
        }
    }

    let mut stations: IndexMap<String, StationRec> = IndexMap::new();
    let mut seen: HashMap<(usize, NaiveDate), usize> = HashMap::new();
    let mut cells: Vec<(usize, NaiveDate, Option<f64>, Vec<f64>)> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let field = |j: usize| rec.get(j).unwrap_or("").trim();
        let id = field(ci).to_string();
        if id.is_empty() {
            return Err(Error::input(format!("{}: line {line}: empty station id", path.display())));
        }
        let date = NaiveDate::parse_from_str(field(cd), "%Y-%m-%d")
            .map_err(|_| Error::input(format!("{}: line {line}: bad date '{}'", path.display(), field(cd))))?;
        let lat = parse_value(field(clat))
            .ok_or_else(|| Error::input(format!("{}: line {line}: bad latitude", path.display())))?;
        let lon = parse_value(field(clon))
            .ok_or_else(|| Error::input(format!("{}: line {line}: bad longitude", path.display())))?;
        let entry = stations.entry(id.clone()).or_insert_with(|| StationRec {
            lat,
            lon,
            line,
            meta: SiteMeta::default(),
        });
        if (entry.lat - lat).abs() > 1e-9 || (entry.lon - lon).abs() > 1e-9 {
            return Err(Error::input(format!(
                "{}: station '{id}' has coordinates ({lat}, {lon}) at line {line} but ({}, {}) at line {}",
                path.display(),
                entry.lat,
                entry.lon,
                entry.line
            )));
        }
        let m = &mut entry.meta;
        if m.altitude.is_none() {
            m.altitude = calt.and_then(|j| parse_value(field(j)));
        }
        if m.province.is_none() {
            m.province = cprov.map(|j| field(j).to_string()).filter(|s| !s.is_empty());
        }
        if m.land_type.is_none() {
            m.land_type = cland.map(|j| field(j).to_string()).filter(|s| !s.is_empty());
        }
        if m.forest.is_none() {
            m.forest = cfor.and_then(|j| parse_bool(field(j)));
        }
        let si = stations.get_index_of(&id).expect("just inserted");
        if let Some(prev) = seen.insert((si, date), line) {
            return Err(Error::input(format!(
                "{}: duplicate row for station '{id}' on {date} at lines {prev} and {line}",
                path.display()
            )));
        }
        let resp = cresp.map(|j| parse_value(field(j)).unwrap_or(f64::NAN));
        let values = term_cols
            .iter()
            .map(|(_, j, rule)| {
                let v = parse_value(field(*j)).unwrap_or(f64::NAN);
                rule.map_or(v, |r| r.indicator(v))
            })
            .collect();
        cells.push((si, date, resp, values));
    }
    if cells.is_empty() {
        return Err(Error::input(format!("{}: no data rows", path.display())));
    }

    let first = cells.iter().map(|c| c.1).min().expect("non-empty");
    let last = cells.iter().map(|c| c.1).max().expect("non-empty");
    let t_len = (last - first).num_days() as usize + 1;
    let dates: Vec<NaiveDate> = (0..t_len).map(|d| first + chrono::Days::new(d as u64)).collect();
    let n = stations.len();
    let mut response = with_response.then(|| DMatrix::from_element(n, t_len, f64::NAN));
    let mut covs: Vec<DMatrix<f64>> = vec![DMatrix::from_element(n, t_len, f64::NAN); terms.len()];
    for (si, date, resp, values) in cells {
        let t = (date - first).num_days() as usize;
        if let (Some(r), Some(v)) = (response.as_mut(), resp) {
            r[(si, t)] = v;
        }
        for (m, v) in covs.iter_mut().zip(values) {
            m[(si, t)] = v;
        }
    }

    let mut sites = Vec::with_capacity(n);
    let mut meta = Vec::with_capacity(n);
    for (k, (id, rec)) in stations.into_iter().enumerate() {
        sites.push(Site::new(k, rec.lat, rec.lon).with_label(id));
        meta.push(rec.meta);
    }
    let total = (n * t_len) as f64;
    if let Some(r) = &response {
        let miss = r.iter().filter(|v| !v.is_finite()).count();
        log::info!("{}: {n} stations x {t_len} days, response {:.1}% missing", path.display(), 100.0 * miss as f64 / total);
    }
    for (term, m) in terms.iter().zip(&covs) {
        let miss = m.iter().filter(|v| !v.is_finite()).count();
        if miss > 0 {
            log::info!("{}: covariate '{term}' {:.1}% missing", path.display(), 100.0 * miss as f64 / total);
        }
    }
    Ok(LongTable {
        sites: SiteSet::new(sites)?,
        meta,
        dates,
        response,
        covariates: terms.iter().cloned().zip(covs).collect(),
    })
}

pub fn ingest_panel(path: &Path, cfg: &DataConfig, spec: &ModelSpec) -> Result<ObservationPanel> {
    spec.validate()?;
    let t = read_long_csv(path, cfg, &spec.terms, true)?;
    let panel = ObservationPanel {
        sites: t.sites,
        response: t.response.expect("requested"),
        covariates: CovariateTable {
            dates: t.dates,
            columns: t.covariates,
        },
        meta: t.meta,
    };
    panel.validate()?;
    Ok(panel)
}

pub fn ingest_grid(path: &Path, cfg: &DataConfig, spec: &ModelSpec) -> Result<PredictionGrid> {
    let t = read_long_csv(path, cfg, &spec.terms, false)?;
    Ok(PredictionGrid {
        sites: t.sites,
        covariates: CovariateTable {
            dates: t.dates,
            columns: t.covariates,
        },
        meta: t.meta,
    })
}

/// Write through a temporary file in the destination directory, then rename.
pub fn write_atomic<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let tmp = tempfile::NamedTempFile::new_in(&dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        f(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Shortest round-trip decimal; missing values are empty fields.
pub fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

fn write_csv<F>(path: &Path, header: &[&str], rows: F) -> Result<()>
where
    F: FnOnce(&mut csv::Writer<&mut dyn Write>) -> Result<()>,
{
    write_atomic(path, |w| {
        let mut cw = csv::Writer::from_writer(w);
        cw.write_record(header)?;
        rows(&mut cw)?;
        cw.flush()?;
        Ok(())
    })
}

fn meta_fields(m: &SiteMeta) -> [String; 4] {
    [
        m.altitude.map(fmt_num).unwrap_or_default(),
        m.province.clone().unwrap_or_default(),
        m.land_type.clone().unwrap_or_default(),
        m.forest.map(|f| if f { "1" } else { "0" }.to_string()).unwrap_or_default(),
    ]
}

fn write_long(
    path: &Path,
    sites: &SiteSet,
    meta: &[SiteMeta],
    table: &CovariateTable,
    response: Option<&DMatrix<f64>>,
) -> Result<()> {
    let mut header = vec!["station_id", "date", "latitude", "longitude", "altitude", "province", "land_type", "forest"];
    if response.is_some() {
        header.push("response");
    }
    let names: Vec<&String> = table.columns.keys().collect();
    header.extend(names.iter().map(|s| s.as_str()));
    write_csv(path, &header, |cw| {
        for (i, site) in sites.iter().enumerate() {
            let mf = meta_fields(&meta[i]);
            for (t, d) in table.dates.iter().enumerate() {
                let mut rec = vec![site.name(), d.to_string(), fmt_num(site.lat), fmt_num(site.lon)];
                rec.extend(mf.iter().cloned());
                if let Some(r) = response {
                    rec.push(fmt_num(r[(i, t)]));
                }
                rec.extend(table.columns.values().map(|m| fmt_num(m[(i, t)])));
                cw.write_record(&rec)?;
            }
        }
        Ok(())
    })
}

pub fn write_panel_csv(path: &Path, panel: &ObservationPanel) -> Result<()> {
    write_long(path, &panel.sites, &panel.meta, &panel.covariates, Some(&panel.response))
}

pub fn write_grid_csv(path: &Path, grid: &PredictionGrid) -> Result<()> {
    write_long(path, &grid.sites, &grid.meta, &grid.covariates, None)
}

/// Latent path, step 0 being the initial state.
pub fn write_latent_csv(path: &Path, sites: &SiteSet, latent: &DMatrix<f64>) -> Result<()> {
    write_csv(path, &["station_id", "step", "z"], |cw| {
        for (i, s) in sites.iter().enumerate() {
            for k in 0..latent.ncols() {
                cw.write_record([s.name(), k.to_string(), fmt_num(latent[(i, k)])])?;
            }
        }
        Ok(())
    })
}

pub fn write_predictions_csv(path: &Path, pred: &GridPrediction) -> Result<()> {
    let header = [
        "pixel_id", "latitude", "longitude", "date", "y_hat", "z_hat", "altitude", "province", "land_type", "forest",
    ];
    write_csv(path, &header, |cw| {
        for (i, s) in pred.sites.iter().enumerate() {
            let mf = meta_fields(&pred.meta[i]);
            for (t, d) in pred.dates.iter().enumerate() {
                let mut rec = vec![
                    s.name(),
                    fmt_num(s.lat),
                    fmt_num(s.lon),
                    d.to_string(),
                    fmt_num(pred.y_hat[(i, t)]),
                    fmt_num(pred.z_hat[(i, t)]),
                ];
                rec.extend(mf.iter().cloned());
                cw.write_record(&rec)?;
            }
        }
        Ok(())
    })
}

pub fn write_coefficients_csv(path: &Path, report: &FitReport) -> Result<()> {
    write_csv(path, &["name", "beta", "std", "abs_t", "p_value"], |cw| {
        for r in &report.coefficients {
            cw.write_record([r.name.clone(), fmt_num(r.beta), fmt_num(r.std), fmt_num(r.abs_t), fmt_num(r.p_value)])?;
        }
        Ok(())
    })
}

pub fn write_sigma2_csv(path: &Path, dates: &[NaiveDate], sigma2: &[f64]) -> Result<()> {
    write_csv(path, &["date", "sigma2_eps"], |cw| {
        for (d, s) in dates.iter().zip(sigma2) {
            cw.write_record([d.to_string(), fmt_num(*s)])?;
        }
        Ok(())
    })
}

/// Station x date matrix as (station_id, date, value) rows.
pub fn write_station_series_csv(path: &Path, sites: &SiteSet, dates: &[NaiveDate], m: &DMatrix<f64>) -> Result<()> {
    write_csv(path, &["station_id", "date", "value"], |cw| {
        for (i, s) in sites.iter().enumerate() {
            for (t, d) in dates.iter().enumerate() {
                cw.write_record([s.name(), d.to_string(), fmt_num(m[(i, t)])])?;
            }
        }
        Ok(())
    })
}

pub fn write_acf_csv(path: &Path, sites: &SiteSet, acf: &[StationAcf]) -> Result<()> {
    write_csv(path, &["station_id", "lag", "value"], |cw| {
        for a in acf {
            for (k, v) in a.acf.iter().enumerate() {
                cw.write_record([sites.get(a.station).name(), k.to_string(), fmt_num(*v)])?;
            }
        }
        Ok(())
    })
}

/// Bin 0 is the same-station bin; `h_upper` is its upper distance edge.
pub fn write_variogram_csv(path: &Path, v: &Variogram) -> Result<()> {
    write_csv(path, &["h_bin", "h_upper", "u_lag", "gamma", "count"], |cw| {
        for h in 0..v.gamma.nrows() {
            let upper = if h == 0 { 0.0 } else { v.bin_edges[h - 1] };
            for (u, lag) in v.lags.iter().enumerate() {
                cw.write_record([
                    h.to_string(),
                    fmt_num(upper),
                    lag.to_string(),
                    fmt_num(v.gamma[(h, u)]),
                    v.counts[(h, u)].to_string(),
                ])?;
            }
        }
        Ok(())
    })
}

pub fn write_cv_csv(path: &Path, report: &CvReport) -> Result<()> {
    write_csv(path, &["station_id", "rmse", "n_obs", "status"], |cw| {
        for f in &report.folds {
            let status = match &f.error {
                None => "ok".to_string(),
                Some(e) => format!("failed: {e}"),
            };
            cw.write_record([f.station.clone(), f.rmse.map(fmt_num).unwrap_or_default(), f.observed.to_string(), status])?;
        }
        let total: usize = report.folds.iter().map(|f| f.observed).sum();
        cw.write_record(["pooled".to_string(), fmt_num(report.pooled_rmse), total.to_string(), "summary".into()])?;
        cw.write_record(["in_sample".to_string(), fmt_num(report.in_sample_rmse), String::new(), "summary".into()])?;
        Ok(())
    })
}

pub fn write_cv_predictions_csv(path: &Path, report: &CvReport, dates: &[NaiveDate]) -> Result<()> {
    write_csv(path, &["station_id", "date", "y_hat"], |cw| {
        for f in report.folds.iter().filter(|f| f.error.is_none()) {
            for (d, v) in dates.iter().zip(&f.predicted) {
                cw.write_record([f.station.clone(), d.to_string(), fmt_num(*v)])?;
            }
        }
        Ok(())
    })
}

pub fn write_scenario_deltas_csv(path: &Path, grid: &PredictionGrid, res: &ScenarioResult) -> Result<()> {
    let d = &res.deltas;
    write_csv(path, &["scenario", "pixel_id", "latitude", "longitude", "date", "delta"], |cw| {
        for (a, &i) in d.selection.pixels.iter().enumerate() {
            let s = grid.sites.get(i);
            for (t, date) in d.dates.iter().enumerate() {
                cw.write_record([
                    res.name.clone(),
                    s.name(),
                    fmt_num(s.lat),
                    fmt_num(s.lon),
                    date.to_string(),
                    fmt_num(d.delta[(a, t)]),
                ])?;
            }
        }
        Ok(())
    })
}

pub fn write_scenario_summary_csv(path: &Path, results: &[ScenarioResult]) -> Result<()> {
    let header = ["scenario", "r", "key", "group", "pixels", "days", "cells", "y_bar", "change", "std", "percent"];
    write_csv(path, &header, |cw| {
        for res in results {
            for g in &res.groups {
                cw.write_record([
                    res.name.clone(),
                    fmt_num(res.r),
                    g.key.clone(),
                    g.group.clone(),
                    g.pixels.to_string(),
                    g.days.to_string(),
                    g.cells.to_string(),
                    fmt_num(g.y_bar),
                    fmt_num(g.change),
                    fmt_num(g.std),
                    fmt_num(g.percent),
                ])?;
            }
        }
        Ok(())
    })
}

pub fn write_scenario_map_csv(path: &Path, res: &ScenarioResult) -> Result<()> {
    write_csv(path, &["scenario", "pixel_id", "latitude", "longitude", "cells", "change", "std"], |cw| {
        for p in &res.pixel_map {
            cw.write_record([
                res.name.clone(),
                p.pixel.clone(),
                fmt_num(p.lat),
                fmt_num(p.lon),
                p.cells.to_string(),
                fmt_num(-p.mean_delta),
                fmt_num(p.std),
            ])?;
        }
        Ok(())
    })
}

/// Self-describing fit file: the fitted model plus the data mapping used to
/// read it, so grids can be ingested consistently.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitArtifact {
    pub schema_version: String,
    pub data: DataConfig,
    pub model: FittedModel,
}

impl FitArtifact {
    pub fn new(model: FittedModel, data: DataConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION.to_string(),
            data,
            model,
        }
    }
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: String,
}

pub fn save_artifact(path: &Path, artifact: &FitArtifact) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, artifact)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

pub fn load_artifact(path: &Path) -> Result<FitArtifact> {
    let text = fs::read_to_string(path).map_err(|e| Error::input(format!("cannot read {}: {e}", path.display())))?;
    let probe: VersionProbe =
        serde_json::from_str(&text).map_err(|e| Error::schema(format!("{}: not a fit artifact: {e}", path.display())))?;
    let major = probe.schema_version.split('.').next().and_then(|s| s.parse::<u32>().ok());
    if major != Some(SCHEMA_MAJOR) {
        return Err(Error::schema(format!(
            "{}: unsupported fit artifact version '{}'",
            path.display(),
            probe.schema_version
        )));
    }
    serde_json::from_str(&text).map_err(|e| Error::schema(format!("{}: {e}", path.display())))
}

/// Scenario entry of the run configuration. A missing mask falls back to
/// the configuration-wide `[mask]` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub target: String,
    pub r: f64,
    #[serde(default)]
    pub window: TimeWindow,
    #[serde(default)]
    pub mask: Option<SpatialMask>,
    #[serde(default)]
    pub group_by: Option<Vec<GroupKey>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CvConfig {
    #[serde(default)]
    pub holdout: Vec<String>,
}

fn default_max_lag() -> usize {
    30
}
fn default_space_bins() -> usize {
    10
}
fn default_time_lags() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsConfig {
    #[serde(default = "default_max_lag")]
    pub max_lag: usize,
    #[serde(default = "default_space_bins")]
    pub space_bins: usize,
    #[serde(default = "default_time_lags")]
    pub time_lags: usize,
    /// Variogram distance range; half the largest station distance if unset.
    #[serde(default)]
    pub max_distance: Option<f64>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

/// Run configuration, a single TOML file. Command-line flags override it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub em: EmOptions,
    #[serde(default)]
    pub scenario: Vec<ScenarioConfig>,
    #[serde(default)]
    pub mask: Option<SpatialMask>,
    #[serde(default)]
    pub cv: CvConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::input(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if let Some(m) = &self.model {
            m.validate()?;
        }
        for s in &self.scenario {
            if !(0.0..=1.0).contains(&s.r) {
                return Err(Error::input(format!("scenario '{}': r = {} outside [0, 1]", s.name, s.r)));
            }
            if let Some(m) = &self.model {
                if !m.terms.contains(&s.target) {
                    return Err(Error::input(format!("scenario '{}': unknown target '{}'", s.name, s.target)));
                }
            }
        }
        if !(self.em.tol > 0.0) || self.em.max_iter == 0 {
            return Err(Error::input("EM needs tol > 0 and max_iter >= 1"));
        }
        Ok(())
    }

    pub fn scenarios(&self) -> Vec<ScenarioSpec> {
        self.scenario
            .iter()
            .map(|s| ScenarioSpec {
                name: s.name.clone(),
                target: s.target.clone(),
                r: s.r,
                window: s.window.clone(),
                mask: s.mask.clone().or_else(|| self.mask.clone()).unwrap_or_default(),
                group_by: s.group_by.clone().unwrap_or_else(|| vec![GroupKey::Overall]),
            })
            .collect()
    }
}

/// Lattice for a synthetic prediction grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lat: [f64; 2],
    pub lon: [f64; 2],
    pub spacing: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Simulation file: a `SimSpec` at the top level plus an optional `[grid]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub spec: SimSpec,
    pub grid: Option<GridSpec>,
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text)?;
        let grid = match table.remove("grid") {
            Some(v) => Some(v.try_into::<GridSpec>()?),
            None => None,
        };
        let spec: SimSpec = toml::Value::Table(table).try_into()?;
        Ok(Self { spec, grid })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::input(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}
