// SPDX-License-Identifier: Apache-2.0

//! Spherical geometry and the spatial correlation kernel.
//!
//! Distances are central angles in degrees of great-circle arc, which is the
//! unit the range parameter of the kernel is expressed in.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::JITTER;

/// Mean Earth radius, only used to convert arc degrees to kilometres for
/// reporting.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub id: usize,
    pub lat: f64,
    pub lon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Site {
    pub fn new(id: usize, lat: f64, lon: f64) -> Self {
        Self {
            id,
            lat,
            lon,
            label: None,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    /// Label if present, otherwise the integer id.
    pub fn name(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.id.to_string())
    }
}

/// A validated, non-empty set of sites with unique ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Site>", into = "Vec<Site>")]
pub struct SiteSet {
    sites: Vec<Site>,
}

impl SiteSet {
    pub fn new(sites: Vec<Site>) -> Result<Self> {
        if sites.is_empty() {
            return Err(Error::input("site set must contain at least one site"));
        }
        let mut ids = std::collections::HashSet::new();
        for s in &sites {
            validate_coordinates(s.lat, s.lon)?;
            if !ids.insert(s.id) {
                return Err(Error::input(format!("duplicate site id {}", s.id)));
            }
        }
        Ok(Self { sites })
    }

    /// Sites numbered 0..n from (lat, lon) pairs.
    pub fn from_coords(coords: &[(f64, f64)]) -> Result<Self> {
        Self::new(
            coords
                .iter()
                .enumerate()
                .map(|(i, &(lat, lon))| Site::new(i, lat, lon))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn get(&self, i: usize) -> &Site {
        &self.sites[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Site> {
        self.sites.iter()
    }

    /// Position of the site with the given label (or id rendered as text).
    pub fn position_by_name(&self, name: &str) -> Option<usize> {
        self.sites.iter().position(|s| s.name() == name)
    }

    /// Subset by positions, keeping ids and labels.
    pub fn subset(&self, positions: &[usize]) -> Result<Self> {
        Self::new(positions.iter().map(|&i| self.sites[i].clone()).collect())
    }

    /// All pairwise distances between distinct sites.
    pub fn pairwise_distances(&self) -> Vec<f64> {
        let n = self.len();
        let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                out.push(distance_unchecked(&self.sites[i], &self.sites[j]));
            }
        }
        out
    }

    pub fn distance_matrix(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut d = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = distance_unchecked(&self.sites[i], &self.sites[j]);
                d[(i, j)] = v;
                d[(j, i)] = v;
            }
        }
        d
    }
}

impl TryFrom<Vec<Site>> for SiteSet {
    type Error = Error;

    fn try_from(sites: Vec<Site>) -> Result<Self> {
        SiteSet::new(sites)
    }
}

impl From<SiteSet> for Vec<Site> {
    fn from(s: SiteSet) -> Self {
        s.sites
    }
}

fn validate_coordinates(lat: f64, lon: f64) -> Result<()> {
    if !lat.is_finite() || !lon.is_finite() {
        return Err(Error::input(format!("non-finite coordinate ({lat}, {lon})")));
    }
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(Error::input(format!("coordinate out of range ({lat}, {lon})")));
    }
    Ok(())
}

/// Central angle between two sites in degrees of arc.
pub fn geodetic_distance(a: &Site, b: &Site) -> Result<f64> {
    validate_coordinates(a.lat, a.lon)?;
    validate_coordinates(b.lat, b.lon)?;
    Ok(distance_unchecked(a, b))
}

// Vincenty's special case of the great-circle formula; stable for both
// antipodal and very close points.
fn distance_unchecked(a: &Site, b: &Site) -> f64 {
    if a.lat == b.lat && a.lon == b.lon {
        return 0.0;
    }
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dl = (b.lon - a.lon).to_radians();
    let (s1, c1) = phi1.sin_cos();
    let (s2, c2) = phi2.sin_cos();
    let (sdl, cdl) = dl.sin_cos();
    let x = c2 * sdl;
    let y = c1 * s2 - s1 * c2 * cdl;
    let num = (x * x + y * y).sqrt();
    let den = s1 * s2 + c1 * c2 * cdl;
    num.atan2(den).to_degrees()
}

pub fn degrees_to_km(deg: f64) -> f64 {
    deg.to_radians() * EARTH_RADIUS_KM
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    #[default]
    Exponential,
}

/// Isotropic correlation kernel with range parameter `theta` (arc degrees).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationKernel {
    pub family: KernelFamily,
    pub theta: f64,
}

impl CorrelationKernel {
    pub fn new(family: KernelFamily, theta: f64) -> Result<Self> {
        if !(theta.is_finite() && theta > 0.0) {
            return Err(Error::input(format!("kernel range must be positive, got {theta}")));
        }
        Ok(Self { family, theta })
    }

    pub fn exponential(theta: f64) -> Result<Self> {
        Self::new(KernelFamily::Exponential, theta)
    }

    pub fn rho(&self, distance: f64) -> f64 {
        match self.family {
            KernelFamily::Exponential => (-distance / self.theta).exp(),
        }
    }
}

/// Station correlation matrix, without jitter.
pub fn correlation_matrix(sites: &SiteSet, kernel: &CorrelationKernel) -> DMatrix<f64> {
    correlation_from_distances(&sites.distance_matrix(), kernel)
}

pub fn correlation_from_distances(d: &DMatrix<f64>, kernel: &CorrelationKernel) -> DMatrix<f64> {
    d.map(|v| kernel.rho(v))
}

/// Correlation matrix with `JITTER` added to the diagonal, ready to factor.
pub fn jittered_correlation(sites: &SiteSet, kernel: &CorrelationKernel) -> DMatrix<f64> {
    let mut r = correlation_matrix(sites, kernel);
    for i in 0..r.nrows() {
        r[(i, i)] += JITTER;
    }
    r
}

/// `m x n` matrix of correlations between new sites (rows) and fitted sites.
pub fn cross_correlation(new_sites: &SiteSet, fitted: &SiteSet, kernel: &CorrelationKernel) -> DMatrix<f64> {
    DMatrix::from_fn(new_sites.len(), fitted.len(), |i, j| {
        kernel.rho(distance_unchecked(new_sites.get(i), fitted.get(j)))
    })
}
