//! Spherical geometry, south-polar stereographic area grids and
//! inverse-distance interpolation of gridded covariates.

use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean earth radius in kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Standard parallel of the polar stereographic projection used for grids.
pub const STANDARD_PARALLEL_DEG: f64 = -71.0;

/// A location on the sphere with an elevation in kilometers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGeoPoint", into = "RawGeoPoint")]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
    elev: f64,
}

#[derive(Serialize, Deserialize)]
struct RawGeoPoint {
    lat: f64,
    lon: f64,
    elev: f64,
}

impl TryFrom<RawGeoPoint> for GeoPoint {
    type Error = Error;
    fn try_from(raw: RawGeoPoint) -> Result<Self> {
        GeoPoint::new(raw.lat, raw.lon, raw.elev)
    }
}

impl From<GeoPoint> for RawGeoPoint {
    fn from(p: GeoPoint) -> Self {
        RawGeoPoint {
            lat: p.lat,
            lon: p.lon,
            elev: p.elev,
        }
    }
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64, elev: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::param("lat", format!("{lat} outside [-90, 90]")));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(Error::param("lon", format!("{lon} outside [-180, 180]")));
        }
        if !elev.is_finite() {
            return Err(Error::param("elev", "must be finite"));
        }
        Ok(GeoPoint { lat, lon, elev })
    }

    /// Latitude in degrees.
    pub fn lat(&self) -> f64 {
        self.lat
    }

    /// Longitude in degrees.
    pub fn lon(&self) -> f64 {
        self.lon
    }

    /// Elevation in kilometers.
    pub fn elev(&self) -> f64 {
        self.elev
    }

    pub fn with_elev(&self, elev: f64) -> Result<Self> {
        GeoPoint::new(self.lat, self.lon, elev)
    }

    /// Same horizontal position, ignoring elevation.
    pub fn same_location(&self, other: &GeoPoint) -> bool {
        self.lat == other.lat && self.lon == other.lon
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSphere", into = "RawSphere")]
pub struct SphereConfig {
    radius: f64,
}

#[derive(Serialize, Deserialize)]
struct RawSphere {
    radius: f64,
}

impl TryFrom<RawSphere> for SphereConfig {
    type Error = Error;
    fn try_from(raw: RawSphere) -> Result<Self> {
        SphereConfig::new(raw.radius)
    }
}

impl From<SphereConfig> for RawSphere {
    fn from(s: SphereConfig) -> Self {
        RawSphere { radius: s.radius }
    }
}

impl SphereConfig {
    pub fn new(radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::param("radius", format!("{radius} must be positive")));
        }
        Ok(SphereConfig { radius })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }
}

impl Default for SphereConfig {
    fn default() -> Self {
        SphereConfig {
            radius: EARTH_RADIUS_KM,
        }
    }
}

/// Great-circle separation of two points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arc {
    /// Central angle in radians, in `[0, pi]`.
    pub theta: f64,
    /// Arc length in kilometers.
    pub km: f64,
}

/// Central angle between two points using the haversine/atan2 form, which
/// stays accurate for both coincident and antipodal pairs.
pub fn central_angle(a: &GeoPoint, b: &GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    let h = h.clamp(0.0, 1.0);
    2.0 * h.sqrt().atan2((1.0 - h).sqrt())
}

pub fn great_circle_distance(a: &GeoPoint, b: &GeoPoint, cfg: &SphereConfig) -> Arc {
    let theta = central_angle(a, b);
    Arc {
        theta,
        km: theta * cfg.radius,
    }
}

/// Straight-line distance through the sphere, `2 r sin(theta / 2)`.
pub fn chordal_distance(a: &GeoPoint, b: &GeoPoint, cfg: &SphereConfig) -> f64 {
    2.0 * cfg.radius * (central_angle(a, b) / 2.0).sin()
}

/// South-polar stereographic projection with true scale at a chosen parallel.
#[derive(Debug, Clone, Copy)]
pub struct PolarStereographic {
    radius: f64,
    k0: f64,
}

impl PolarStereographic {
    pub fn new(cfg: &SphereConfig, standard_parallel_deg: f64) -> Self {
        let k0 = (1.0 - standard_parallel_deg.to_radians().sin()) / 2.0;
        PolarStereographic {
            radius: cfg.radius,
            k0,
        }
    }

    /// Planar distance from the pole for a latitude in degrees.
    pub fn plane_radius(&self, lat_deg: f64) -> f64 {
        2.0 * self.radius * self.k0 * (FRAC_PI_4 + lat_deg.to_radians() / 2.0).tan()
    }

    pub fn forward(&self, lat_deg: f64, lon_deg: f64) -> (f64, f64) {
        let rho = self.plane_radius(lat_deg);
        let lambda = lon_deg.to_radians();
        (rho * lambda.sin(), rho * lambda.cos())
    }

    /// Returns `(lat, lon)` in degrees.
    pub fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let rho = x.hypot(y);
        let lat = 2.0 * (rho / (2.0 * self.radius * self.k0)).atan() - FRAC_PI_2;
        let lon = if rho == 0.0 { 0.0 } else { x.atan2(y) };
        (lat.to_degrees(), lon.to_degrees())
    }

    /// Point scale factor at a latitude; planar areas shrink by `k^2` on the sphere.
    pub fn scale_factor(&self, lat_deg: f64) -> f64 {
        2.0 * self.k0 / (1.0 - lat_deg.to_radians().sin())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionMeta {
    pub standard_parallel: f64,
    pub spacing_km: f64,
    pub lat_cutoff: f64,
    pub radius: f64,
}

/// Prediction grid nodes with the spherical area each node represents.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaGrid {
    pub points: Vec<GeoPoint>,
    pub cell_area: Vec<f64>,
    pub meta: Option<ProjectionMeta>,
}

impl AreaGrid {
    pub fn new(points: Vec<GeoPoint>, cell_area: Vec<f64>) -> Result<Self> {
        if points.len() != cell_area.len() {
            return Err(Error::Dimension {
                expected: points.len(),
                found: cell_area.len(),
            });
        }
        if points.is_empty() {
            return Err(Error::Data("empty grid".into()));
        }
        if let Some(bad) = cell_area.iter().position(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::Data(format!(
                "grid cell {bad} has non-positive area"
            )));
        }
        Ok(AreaGrid {
            points,
            cell_area,
            meta: None,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn total_area(&self) -> f64 {
        self.cell_area.iter().sum()
    }
}

/// Area of a spherical cap of the given polar angle.
pub fn cap_area(colatitude_rad: f64, cfg: &SphereConfig) -> f64 {
    2.0 * PI * cfg.radius.powi(2) * (1.0 - colatitude_rad.cos())
}

// Antiderivative of sqrt(r^2 - x^2).
fn half_chord_primitive(x: f64, r: f64) -> f64 {
    let x = x.clamp(-r, r);
    0.5 * (x * (r * r - x * x).max(0.0).sqrt() + r * r * (x / r).asin())
}

// Integral over [a, b] (inside [-r, r]) of clamp(y, -s(x), s(x)), s(x) = sqrt(r^2 - x^2).
fn clamped_strip_integral(y: f64, a: f64, b: f64, r: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let s_int = |lo: f64, hi: f64| {
        if hi <= lo {
            0.0
        } else {
            half_chord_primitive(hi, r) - half_chord_primitive(lo, r)
        }
    };
    let sign = y.signum();
    if y.abs() >= r {
        return sign * s_int(a, b);
    }
    let xc = (r * r - y * y).sqrt();
    let inner = (b.min(xc) - a.max(-xc)).max(0.0);
    y * inner + sign * (s_int(a, b.min(-xc)) + s_int(a.max(xc), b))
}

/// Exact area of the intersection of an axis-aligned rectangle and a disk
/// centered at the origin.
pub fn rect_disk_overlap(x0: f64, x1: f64, y0: f64, y1: f64, r: f64) -> f64 {
    let (a, b) = (x0.max(-r), x1.min(r));
    if b <= a || y1 <= -r || y0 >= r {
        return 0.0;
    }
    clamped_strip_integral(y1, a, b, r) - clamped_strip_integral(y0, a, b, r)
}

/// Builds a grid that is uniform in the south-polar stereographic plane and
/// keeps the nodes at or south of `lat_cutoff`.
///
/// Each node represents its square planar cell mapped to the sphere. Cells
/// cut by the cutoff circle are clipped exactly in the plane; the clipped-in
/// part of a cell whose node falls outside the cutoff is credited to the
/// nearest retained node, so the weights integrate over the whole cap.
pub fn build_area_grid(spacing_km: f64, lat_cutoff: f64, cfg: &SphereConfig) -> Result<AreaGrid> {
    if !(spacing_km > 0.0 && spacing_km.is_finite()) {
        return Err(Error::param("spacing_km", "must be positive"));
    }
    if !(lat_cutoff < 0.0 && lat_cutoff > -90.0) {
        return Err(Error::param(
            "lat_cutoff",
            format!("{lat_cutoff} must lie in (-90, 0) for a southern cap"),
        ));
    }
    let proj = PolarStereographic::new(cfg, STANDARD_PARALLEL_DEG);
    let r_cut = proj.plane_radius(lat_cutoff);
    let h = spacing_km;
    let n = (r_cut / h).ceil() as i64 + 1;

    let mut index: HashMap<(i64, i64), usize> = HashMap::new();
    let mut points = Vec::new();
    let mut cell_area = Vec::new();
    let mut orphans: Vec<((i64, i64), f64)> = Vec::new();

    for i in -n..=n {
        for j in -n..=n {
            let (x, y) = (i as f64 * h, j as f64 * h);
            let overlap =
                rect_disk_overlap(x - h / 2.0, x + h / 2.0, y - h / 2.0, y + h / 2.0, r_cut);
            if overlap <= 0.0 {
                continue;
            }
            let (lat, lon) = proj.inverse(x, y);
            let k = proj.scale_factor(lat);
            let area = overlap / (k * k);
            if lat <= lat_cutoff {
                index.insert((i, j), points.len());
                points.push(GeoPoint::new(lat.clamp(-90.0, 90.0), lon, 0.0)?);
                cell_area.push(area);
            } else {
                orphans.push(((i, j), area));
            }
        }
    }
    if points.is_empty() {
        return Err(Error::Data(format!(
            "spacing {spacing_km} km leaves no grid nodes south of {lat_cutoff}"
        )));
    }

    for ((i, j), area) in orphans {
        let mut best: Option<(i64, usize)> = None;
        for radius in 1..=3i64 {
            for di in -radius..=radius {
                for dj in -radius..=radius {
                    if let Some(&idx) = index.get(&(i + di, j + dj)) {
                        let d2 = di * di + dj * dj;
                        if best.is_none_or(|(bd, bi)| d2 < bd || (d2 == bd && idx < bi)) {
                            best = Some((d2, idx));
                        }
                    }
                }
            }
            if best.is_some() {
                break;
            }
        }
        match best {
            Some((_, idx)) => cell_area[idx] += area,
            None => {
                return Err(Error::Data(format!(
                    "grid cell ({i}, {j}) has no retained neighbor"
                )))
            }
        }
    }

    Ok(AreaGrid {
        points,
        cell_area,
        meta: Some(ProjectionMeta {
            standard_parallel: STANDARD_PARALLEL_DEG,
            spacing_km,
            lat_cutoff,
            radius: cfg.radius,
        }),
    })
}

/// Inverse-distance weighted average over the `k` great-circle-nearest
/// sources. A target that coincides with a source returns that source's value.
pub fn idw_interpolate(
    target: &GeoPoint,
    source_points: &[GeoPoint],
    source_values: &[f64],
    k: usize,
    power: f64,
) -> Result<f64> {
    if source_points.len() != source_values.len() {
        return Err(Error::Dimension {
            expected: source_points.len(),
            found: source_values.len(),
        });
    }
    if k == 0 {
        return Err(Error::param("k", "must be at least 1"));
    }
    if source_points.len() < k {
        return Err(Error::Data(format!(
            "idw needs {k} sources, got {}",
            source_points.len()
        )));
    }
    let mut dist: Vec<(f64, usize)> = source_points
        .iter()
        .enumerate()
        .map(|(i, p)| (central_angle(target, p), i))
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let nearest = &dist[..k];
    if nearest[0].0 < 1e-9 {
        return Ok(source_values[nearest[0].1]);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for &(d, i) in nearest {
        let w = d.powf(-power);
        num += w * source_values[i];
        den += w;
    }
    Ok(num / den)
}
