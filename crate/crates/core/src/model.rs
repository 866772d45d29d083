// SPDX-License-Identifier: Apache-2.0

//! Data containers, regression formula and standardization.

use std::collections::{BTreeMap, HashSet};

use chrono::{Datelike, NaiveDate};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{KernelFamily, SiteSet};

pub const INTERCEPT: &str = "(Intercept)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Season {
    Winter,
    Spring,
    Summer,
    Autumn,
}

impl Season {
    pub fn name(&self) -> &'static str {
        match self {
            Season::Winter => "Winter",
            Season::Spring => "Spring",
            Season::Summer => "Summer",
            Season::Autumn => "Autumn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "winter" => Ok(Season::Winter),
            "spring" => Ok(Season::Spring),
            "summer" => Ok(Season::Summer),
            "autumn" | "fall" => Ok(Season::Autumn),
            other => Err(Error::input(format!("unknown season '{other}'"))),
        }
    }
}

/// Month -> season lookup. The default is the meteorological convention
/// (Dec-Feb winter, Mar-May spring, Jun-Aug summer, Sep-Nov autumn).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeasonMap {
    pub months: [Season; 12],
}

impl Default for SeasonMap {
    fn default() -> Self {
        use Season::*;
        Self {
            months: [
                Winter, Winter, Spring, Spring, Spring, Summer, Summer, Summer, Autumn, Autumn, Autumn,
                Winter,
            ],
        }
    }
}

impl SeasonMap {
    pub fn season(&self, date: NaiveDate) -> Season {
        self.months[date.month0() as usize]
    }
}

/// Covariates over a set of sites and a contiguous daily date range. Each
/// column is an `n x T` matrix in original units; NaN marks a missing value.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTable {
    pub dates: Vec<NaiveDate>,
    pub columns: BTreeMap<String, DMatrix<f64>>,
}

impl CovariateTable {
    pub fn t_len(&self) -> usize {
        self.dates.len()
    }

    pub fn column(&self, name: &str) -> Result<&DMatrix<f64>> {
        self.columns
            .get(name)
            .ok_or_else(|| Error::schema(format!("unknown covariate column '{name}'")))
    }
}

/// Optional per-site metadata used by spatial masks and group summaries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SiteMeta {
    pub altitude: Option<f64>,
    pub province: Option<String>,
    pub land_type: Option<String>,
    pub forest: Option<bool>,
}

/// Stations x days response panel with its covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPanel {
    pub sites: SiteSet,
    /// `n x T`, NaN = missing.
    pub response: DMatrix<f64>,
    pub covariates: CovariateTable,
    pub meta: Vec<SiteMeta>,
}

impl ObservationPanel {
    pub fn n(&self) -> usize {
        self.sites.len()
    }

    pub fn t_len(&self) -> usize {
        self.covariates.t_len()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.covariates.dates
    }

    pub fn observed_count(&self) -> usize {
        self.response.iter().filter(|v| v.is_finite()).count()
    }

    /// Restrict to the stations at `positions`, in that order.
    pub fn subset_sites(&self, positions: &[usize]) -> Result<Self> {
        let t_len = self.t_len();
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(positions.len(), t_len, |i, t| m[(positions[i], t)]);
        Ok(Self {
            sites: self.sites.subset(positions)?,
            response: pick(&self.response),
            covariates: CovariateTable {
                dates: self.covariates.dates.clone(),
                columns: self.covariates.columns.iter().map(|(k, v)| (k.clone(), pick(v))).collect(),
            },
            meta: positions.iter().map(|&i| self.meta[i].clone()).collect(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let (n, t_len) = (self.n(), self.t_len());
        if self.response.shape() != (n, t_len) {
            return Err(Error::input("response matrix shape does not match sites x dates"));
        }
        for (name, c) in &self.covariates.columns {
            if c.shape() != (n, t_len) {
                return Err(Error::input(format!("covariate '{name}' has the wrong shape")));
            }
        }
        if self.meta.len() != n {
            return Err(Error::input("metadata must have one entry per site"));
        }
        Ok(())
    }
}

/// Sites over which predictions are requested, with covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrid {
    pub sites: SiteSet,
    pub covariates: CovariateTable,
    pub meta: Vec<SiteMeta>,
}

impl PredictionGrid {
    pub fn n(&self) -> usize {
        self.sites.len()
    }

    pub fn t_len(&self) -> usize {
        self.covariates.t_len()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.covariates.dates
    }
}

impl From<&ObservationPanel> for PredictionGrid {
    fn from(p: &ObservationPanel) -> Self {
        Self {
            sites: p.sites.clone(),
            covariates: p.covariates.clone(),
            meta: p.meta.clone(),
        }
    }
}

/// A base covariate interacted with indicators of some season levels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub base: String,
    #[serde(default = "default_levels")]
    pub levels: Vec<Season>,
}

fn default_levels() -> Vec<Season> {
    vec![Season::Winter, Season::Summer, Season::Spring]
}

fn default_true() -> bool {
    true
}

/// Regression formula: an implicit intercept, main-effect terms and
/// season interactions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub terms: Vec<String>,
    /// Indicator columns, never standardized.
    #[serde(default)]
    pub binary: Vec<String>,
    /// Continuous columns kept in original units.
    #[serde(default)]
    pub unstandardized: Vec<String>,
    #[serde(default = "default_true")]
    pub standardize_response: bool,
    #[serde(default)]
    pub interactions: Vec<Interaction>,
    #[serde(default)]
    pub kernel: KernelFamily,
    #[serde(default)]
    pub seasons: SeasonMap,
}

impl ModelSpec {
    pub fn new(terms: Vec<String>) -> Self {
        Self {
            terms,
            binary: Vec::new(),
            unstandardized: Vec::new(),
            standardize_response: true,
            interactions: Vec::new(),
            kernel: KernelFamily::Exponential,
            seasons: SeasonMap::default(),
        }
    }

    /// Every column kept in original units, response included.
    pub fn without_standardization(mut self) -> Self {
        self.unstandardized = self.terms.iter().filter(|t| !self.binary.contains(t)).cloned().collect();
        self.standardize_response = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for t in &self.terms {
            if t == INTERCEPT {
                return Err(Error::schema("the intercept is implicit and must not be listed as a term"));
            }
            if !seen.insert(t.as_str()) {
                return Err(Error::schema(format!("term '{t}' listed twice")));
            }
        }
        for b in self.binary.iter().chain(&self.unstandardized) {
            if !seen.contains(b.as_str()) {
                return Err(Error::schema(format!("'{b}' is not a model term")));
            }
        }
        let mut seen_inter = HashSet::new();
        for it in &self.interactions {
            if !seen.contains(it.base.as_str()) {
                return Err(Error::schema(format!("interaction base '{}' is not a model term", it.base)));
            }
            if it.levels.is_empty() {
                return Err(Error::schema(format!("interaction on '{}' has no levels", it.base)));
            }
            for l in &it.levels {
                if !seen_inter.insert((it.base.clone(), *l)) {
                    return Err(Error::schema(format!("interaction {}:{} declared twice", it.base, l.name())));
                }
            }
        }
        Ok(())
    }

    pub fn is_standardized(&self, term: &str) -> bool {
        !self.binary.iter().any(|b| b == term) && !self.unstandardized.iter().any(|b| b == term)
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = vec![INTERCEPT.to_string()];
        names.extend(self.terms.iter().cloned());
        for it in &self.interactions {
            for l in &it.levels {
                names.push(format!("{}:{}", it.base, l.name()));
            }
        }
        names
    }

    pub fn p(&self) -> usize {
        1 + self.terms.len() + self.interactions.iter().map(|i| i.levels.len()).sum::<usize>()
    }

    /// Design-column indices that depend on `base` (its main effect and all
    /// interactions built from it).
    pub fn columns_depending_on(&self, base: &str) -> Vec<usize> {
        let mut out = Vec::new();
        let mut j = 1;
        for t in &self.terms {
            if t == base {
                out.push(j);
            }
            j += 1;
        }
        for it in &self.interactions {
            for _ in &it.levels {
                if it.base == base {
                    out.push(j);
                }
                j += 1;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
}

impl Moments {
    pub const IDENTITY: Moments = Moments { mean: 0.0, std: 1.0 };

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    fn from_values<'a>(values: impl Iterator<Item = &'a f64>) -> Option<Moments> {
        let v: Vec<f64> = values.copied().filter(|x| x.is_finite()).collect();
        if v.len() < 2 {
            return None;
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        Some(Moments { mean, std: var.sqrt() })
    }
}

/// Global moments used to standardize the response and covariates. Columns
/// that are not standardized carry the identity transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub response: Moments,
    pub columns: BTreeMap<String, Moments>,
}

impl Standardization {
    pub fn fit(panel: &ObservationPanel, spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut columns = BTreeMap::new();
        for term in &spec.terms {
            let col = panel.covariates.column(term)?;
            let m = if spec.is_standardized(term) {
                let m = Moments::from_values(col.iter())
                    .ok_or_else(|| Error::input(format!("column '{term}' has fewer than two observed values")))?;
                if !(m.std > 0.0) {
                    return Err(Error::input(format!("column '{term}' has zero variance")));
                }
                m
            } else {
                Moments::IDENTITY
            };
            columns.insert(term.clone(), m);
        }
        let response = if spec.standardize_response {
            let m = Moments::from_values(panel.response.iter())
                .ok_or_else(|| Error::input("response has fewer than two observed values"))?;
            if !(m.std > 0.0) {
                return Err(Error::input("response has zero variance"));
            }
            m
        } else {
            Moments::IDENTITY
        };
        Ok(Self { response, columns })
    }

    pub fn column(&self, name: &str) -> Result<Moments> {
        self.columns
            .get(name)
            .copied()
            .ok_or_else(|| Error::schema(format!("no standardization moments for '{name}'")))
    }

    /// Standardized design matrices, one `n x p` matrix per date. Entries
    /// derived from a missing covariate are NaN.
    pub fn design(&self, spec: &ModelSpec, table: &CovariateTable, n: usize) -> Result<Vec<DMatrix<f64>>> {
        let p = spec.p();
        let mut std_cols = Vec::with_capacity(spec.terms.len());
        for term in &spec.terms {
            let raw = table.column(term)?;
            if raw.nrows() != n || raw.ncols() != table.t_len() {
                return Err(Error::schema(format!("covariate '{term}' has the wrong shape")));
            }
            let m = self.column(term)?;
            std_cols.push(raw.map(|v| m.apply(v)));
        }
        let base_pos: Vec<usize> = spec
            .interactions
            .iter()
            .map(|it| spec.terms.iter().position(|t| *t == it.base).expect("validated"))
            .collect();

        let mut out = Vec::with_capacity(table.t_len());
        for (t, date) in table.dates.iter().enumerate() {
            let season = spec.seasons.season(*date);
            let mut x = DMatrix::zeros(n, p);
            for i in 0..n {
                x[(i, 0)] = 1.0;
            }
            let mut j = 1;
            for c in &std_cols {
                for i in 0..n {
                    x[(i, j)] = c[(i, t)];
                }
                j += 1;
            }
            for (it, &bp) in spec.interactions.iter().zip(&base_pos) {
                for level in &it.levels {
                    let on = if *level == season { 1.0 } else { 0.0 };
                    for i in 0..n {
                        let b = std_cols[bp][(i, t)];
                        // keep NaN propagating even when the indicator is off
                        x[(i, j)] = if b.is_finite() { b * on } else { f64::NAN };
                    }
                    j += 1;
                }
            }
            out.push(x);
        }
        Ok(out)
    }
}

/// Response and design in standardized units, ready for estimation.
#[derive(Debug, Clone)]
pub struct StandardizedPanel {
    /// `n x T`; NaN where the response or any covariate is missing.
    pub y: DMatrix<f64>,
    pub design: Vec<DMatrix<f64>>,
    pub column_names: Vec<String>,
}

/// Estimate moments on `panel` and transform it.
pub fn standardize(panel: &ObservationPanel, spec: &ModelSpec) -> Result<(StandardizedPanel, Standardization)> {
    let st = Standardization::fit(panel, spec)?;
    let sp = apply_standardization(panel, spec, &st)?;
    Ok((sp, st))
}

/// Transform `panel` with previously estimated moments.
pub fn apply_standardization(
    panel: &ObservationPanel,
    spec: &ModelSpec,
    st: &Standardization,
) -> Result<StandardizedPanel> {
    panel.validate()?;
    let design = st.design(spec, &panel.covariates, panel.n())?;
    let mut y = panel.response.map(|v| st.response.apply(v));
    for (t, x) in design.iter().enumerate() {
        for i in 0..panel.n() {
            if x.row(i).iter().any(|v| !v.is_finite()) {
                y[(i, t)] = f64::NAN;
            }
        }
    }
    Ok(StandardizedPanel {
        y,
        design,
        column_names: spec.column_names(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::SiteSet;

    fn toy_panel() -> ObservationPanel {
        let sites = SiteSet::from_coords(&[(45.0, 9.0), (45.3, 9.6)]).unwrap();
        let dates: Vec<NaiveDate> = (0..3)
            .map(|d| NaiveDate::from_ymd_opt(2016, 1, 30).unwrap() + chrono::Days::new(d))
            .collect();
        let mut columns = BTreeMap::new();
        columns.insert("nh3".to_string(), DMatrix::from_row_slice(2, 3, &[8.0, 10.0, 12.0, 14.0, 6.0, 10.0]));
        columns.insert("rain".to_string(), DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 1.0, 1.0, 0.0]));
        ObservationPanel {
            sites,
            response: DMatrix::from_row_slice(2, 3, &[20.0, 25.0, f64::NAN, 30.0, 22.0, 18.0]),
            covariates: CovariateTable { dates, columns },
            meta: vec![SiteMeta::default(); 2],
        }
    }

    fn toy_spec() -> ModelSpec {
        let mut spec = ModelSpec::new(vec!["nh3".into(), "rain".into()]);
        spec.binary = vec!["rain".into()];
        spec.interactions = vec![Interaction {
            base: "nh3".into(),
            levels: vec![Season::Winter, Season::Spring],
        }];
        spec
    }

    #[test]
    fn meteorological_seasons() {
        let m = SeasonMap::default();
        let d = |mo| NaiveDate::from_ymd_opt(2020, mo, 15).unwrap();
        assert_eq!(m.season(d(12)), Season::Winter);
        assert_eq!(m.season(d(2)), Season::Winter);
        assert_eq!(m.season(d(3)), Season::Spring);
        assert_eq!(m.season(d(8)), Season::Summer);
        assert_eq!(m.season(d(11)), Season::Autumn);
    }

    #[test]
    fn moments_arithmetic() {
        let m = Moments { mean: 10.0, std: 2.0 };
        assert_eq!(m.apply(14.0), 2.0);
        assert_eq!(m.invert(2.0), 14.0);
    }

    #[test]
    fn binary_columns_pass_through() {
        let panel = toy_panel();
        let spec = toy_spec();
        let (sp, st) = standardize(&panel, &spec).unwrap();
        assert_eq!(st.column("rain").unwrap(), Moments::IDENTITY);
        let names = sp.column_names;
        let rain = names.iter().position(|c| c == "rain").unwrap();
        for t in 0..3 {
            for i in 0..2 {
                assert_eq!(sp.design[t][(i, rain)], panel.covariates.columns["rain"][(i, t)]);
            }
        }
    }

    #[test]
    fn standardization_round_trip() {
        let panel = toy_panel();
        let (sp, st) = standardize(&panel, &toy_spec()).unwrap();
        let nh3 = st.column("nh3").unwrap();
        for t in 0..3 {
            for i in 0..2 {
                let y = panel.response[(i, t)];
                if y.is_finite() {
                    assert!((st.response.invert(sp.y[(i, t)]) - y).abs() < 1e-12);
                }
                assert!((nh3.invert(sp.design[t][(i, 1)]) - panel.covariates.columns["nh3"][(i, t)]).abs() < 1e-12);
            }
        }
        // standardized response has mean 0 and unit sample variance
        let v: Vec<f64> = sp.y.iter().copied().filter(|v| v.is_finite()).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn interaction_columns_follow_season() {
        let panel = toy_panel();
        let spec = toy_spec();
        let (sp, _) = standardize(&panel, &spec).unwrap();
        assert_eq!(sp.column_names, vec!["(Intercept)", "nh3", "rain", "nh3:Winter", "nh3:Spring"]);
        // Jan 30, Jan 31, Feb 1 are all winter
        for t in 0..3 {
            for i in 0..2 {
                assert_eq!(sp.design[t][(i, 3)], sp.design[t][(i, 1)]);
                assert_eq!(sp.design[t][(i, 4)], 0.0);
            }
        }
    }

    #[test]
    fn zero_variance_column_named_in_error() {
        let mut panel = toy_panel();
        panel.covariates.columns.insert("nh3".into(), DMatrix::from_element(2, 3, 5.0));
        match Standardization::fit(&panel, &toy_spec()) {
            Err(Error::Input(msg)) => assert!(msg.contains("nh3")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn spec_validation() {
        let mut spec = toy_spec();
        spec.interactions[0].base = "nox".into();
        assert!(spec.validate().is_err());
        let spec = ModelSpec::new(vec![INTERCEPT.into()]);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn dependent_columns_of_base() {
        let spec = toy_spec();
        assert_eq!(spec.columns_depending_on("nh3"), vec![1, 3, 4]);
        assert_eq!(spec.columns_depending_on("rain"), vec![2]);
    }
}
