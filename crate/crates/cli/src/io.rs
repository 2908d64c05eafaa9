//! CSV readers and writers for observations, grids, candidates and results.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use nngp_core::eval::ScoreReport;
use nngp_core::geo::{idw_interpolate, AreaGrid, GeoPoint};
use nngp_core::model::{Dataset, Observation, Rating, SiteCovariates, Standardizer};
use nngp_core::predict::{PredictionGrid, PredictiveGrid};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const OBS_HEADER: [&str; 9] = [
    "site_id",
    "lat",
    "lon",
    "elev_km",
    "dist_coast_km",
    "temp_k",
    "smb_mmwe",
    "rating",
    "source_id",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsRecord {
    pub site_id: String,
    pub lat: f64,
    pub lon: f64,
    pub elev_km: f64,
    pub dist_coast_km: f64,
    pub temp_k: f64,
    pub smb_mmwe: f64,
    pub rating: String,
    pub source_id: String,
}

/// Observations grouped into unique sites, values on the original scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsTable {
    pub site_ids: Vec<String>,
    pub sites: Vec<GeoPoint>,
    pub covariates: Vec<SiteCovariates>,
    pub obs: Vec<Observation>,
}

impl ObsTable {
    pub fn dataset(&self, std: &Standardizer) -> Result<Dataset> {
        let (x, z) = std.design(&self.covariates);
        Ok(Dataset::new(self.sites.clone(), x, z, self.obs.clone())?)
    }

    pub fn n_a(&self) -> usize {
        self.obs.iter().filter(|o| o.rating == Rating::A).count()
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::io(path, e))
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))
}

fn line_of(e: &csv::Error) -> String {
    e.position()
        .map_or_else(String::new, |p| format!(" at line {}", p.line()))
}

fn check_header(path: &Path, rdr: &mut csv::Reader<File>, expected: &[&str]) -> Result<()> {
    let h = rdr.headers().map_err(|e| CliError::io(path, e))?;
    let missing: Vec<&str> = expected
        .iter()
        .copied()
        .filter(|c| !h.iter().any(|x| x == *c))
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Data(format!(
            "{}: missing column(s) {}",
            path.display(),
            missing.join(", ")
        )));
    }
    Ok(())
}

fn horizontal_key(p: &GeoPoint) -> (u64, u64) {
    (p.lat().to_bits(), p.lon().to_bits())
}

pub fn read_observations(path: &Path) -> Result<ObsTable> {
    let mut rdr = reader(path)?;
    check_header(path, &mut rdr, &OBS_HEADER)?;
    let mut t = ObsTable {
        site_ids: Vec::new(),
        sites: Vec::new(),
        covariates: Vec::new(),
        obs: Vec::new(),
    };
    let mut by_id: HashMap<String, usize> = HashMap::new();
    let mut by_coord: HashMap<(u64, u64), usize> = HashMap::new();
    let headers = rdr.headers().map_err(|e| CliError::io(path, e))?.clone();
    for record in rdr.records() {
        let record = record
            .map_err(|e| CliError::Data(format!("{}{}: {e}", path.display(), line_of(&e))))?;
        let line = record.position().map_or(0, |p| p.line());
        let rec: ObsRecord = record
            .deserialize(Some(&headers))
            .map_err(|e| CliError::Data(format!("{}: line {line}: {e}", path.display())))?;
        let bad = |msg: String| CliError::Data(format!("{}: line {line}: {msg}", path.display()));
        let p = GeoPoint::new(rec.lat, rec.lon, rec.elev_km).map_err(|e| bad(e.to_string()))?;
        let c = SiteCovariates {
            el: rec.elev_km,
            dc: rec.dist_coast_km,
            temp: rec.temp_k,
        };
        if ![rec.dist_coast_km, rec.temp_k, rec.smb_mmwe]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(bad("non-finite value".into()));
        }
        let rating = match rec.rating.as_str() {
            "A" => Rating::A,
            "U" => Rating::NonA,
            other => return Err(bad(format!("rating `{other}` must be A or U"))),
        };
        let site = match by_id.get(&rec.site_id) {
            Some(&s) => {
                if t.sites[s] != p || t.covariates[s] != c {
                    return Err(bad(format!(
                        "site `{}` repeats with different location or covariates",
                        rec.site_id
                    )));
                }
                s
            }
            None => {
                if let Some(&other) = by_coord.get(&horizontal_key(&p)) {
                    return Err(bad(format!(
                        "sites `{}` and `{}` share coordinates ({}, {})",
                        t.site_ids[other], rec.site_id, rec.lat, rec.lon
                    )));
                }
                let s = t.sites.len();
                by_id.insert(rec.site_id.clone(), s);
                by_coord.insert(horizontal_key(&p), s);
                t.site_ids.push(rec.site_id);
                t.sites.push(p);
                t.covariates.push(c);
                s
            }
        };
        t.obs.push(Observation {
            site,
            value: rec.smb_mmwe,
            rating,
        });
    }
    if t.obs.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no observations",
            path.display()
        )));
    }
    Ok(t)
}

pub fn write_observations(path: &Path, rows: &[ObsRecord]) -> Result<()> {
    let mut w = writer(path)?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Grid or candidate row; covariates may be left blank for imputation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub lat: f64,
    pub lon: f64,
    #[serde(default)]
    pub elev_km: Option<f64>,
    #[serde(default)]
    pub dist_coast_km: Option<f64>,
    #[serde(default)]
    pub temp_k: Option<f64>,
    #[serde(default)]
    pub area_km2: Option<f64>,
}

pub fn read_points(path: &Path) -> Result<Vec<PointRecord>> {
    let mut rdr = reader(path)?;
    check_header(path, &mut rdr, &["lat", "lon"])?;
    let rows = rdr
        .deserialize::<PointRecord>()
        .map(|r| r.map_err(|e| CliError::Data(format!("{}{}: {e}", path.display(), line_of(&e)))))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(CliError::Data(format!("{}: no rows", path.display())));
    }
    Ok(rows)
}

pub fn points_from_grid(grid: &AreaGrid) -> Vec<PointRecord> {
    grid.points
        .iter()
        .zip(&grid.cell_area)
        .map(|(p, &a)| PointRecord {
            lat: p.lat(),
            lon: p.lon(),
            elev_km: None,
            dist_coast_km: None,
            temp_k: None,
            area_km2: Some(a),
        })
        .collect()
}

/// Inverse-distance imputation settings for missing covariates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImputeConfig {
    pub k: usize,
    pub power: f64,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        Self { k: 8, power: 2.0 }
    }
}

/// Points with complete covariates, filling blanks by IDW from the data sites.
pub fn complete_points(
    rows: &[PointRecord],
    table: &ObsTable,
    impute: Option<ImputeConfig>,
    what: &str,
) -> Result<(Vec<GeoPoint>, Vec<SiteCovariates>)> {
    let mut points = Vec::with_capacity(rows.len());
    let mut covs = Vec::with_capacity(rows.len());
    let col = |f: fn(&SiteCovariates) -> f64| table.covariates.iter().map(f).collect::<Vec<f64>>();
    let sources = [col(|c| c.el), col(|c| c.dc), col(|c| c.temp)];
    for (k, r) in rows.iter().enumerate() {
        let flat = GeoPoint::new(r.lat, r.lon, 0.0)
            .map_err(|e| CliError::Data(format!("{what} row {}: {e}", k + 1)))?;
        let fill = |v: Option<f64>, src: &[f64], name: &str| -> Result<f64> {
            match (v, impute) {
                (Some(v), _) => Ok(v),
                (None, Some(cfg)) => Ok(idw_interpolate(
                    &flat,
                    &table.sites,
                    src,
                    cfg.k.min(src.len()),
                    cfg.power,
                )?),
                (None, None) => Err(CliError::Data(format!(
                    "{what} row {} lacks {name} and imputation is disabled",
                    k + 1
                ))),
            }
        };
        let el = fill(r.elev_km, &sources[0], "elev_km")?;
        let dc = fill(r.dist_coast_km, &sources[1], "dist_coast_km")?;
        let temp = fill(r.temp_k, &sources[2], "temp_k")?;
        points.push(flat.with_elev(el)?);
        covs.push(SiteCovariates { el, dc, temp });
    }
    Ok((points, covs))
}

pub fn prediction_grid(
    rows: &[PointRecord],
    table: &ObsTable,
    std: &Standardizer,
    impute: Option<ImputeConfig>,
) -> Result<PredictionGrid> {
    let area = rows
        .iter()
        .enumerate()
        .map(|(k, r)| {
            r.area_km2
                .ok_or_else(|| CliError::Data(format!("grid row {} lacks area_km2", k + 1)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let (points, covs) = complete_points(rows, table, impute, "grid")?;
    let (x, z): (DMatrix<f64>, DMatrix<f64>) = std.design(&covs);
    Ok(PredictionGrid::new(points, area, x, z)?)
}

#[derive(Serialize)]
struct MapRow {
    lat: f64,
    lon: f64,
    value: f64,
}

fn write_map(path: &Path, pg: &PredictiveGrid, name: &str, f: impl Fn(usize) -> f64) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["lat", "lon", name])
        .map_err(|e| CliError::io(path, e))?;
    for (k, p) in pg.points.iter().enumerate() {
        w.serialize(MapRow {
            lat: p.lat(),
            lon: p.lon(),
            value: f(k),
        })
        .map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// `mean.csv`, `sd.csv` and the full per-node `prediction.csv`.
pub fn write_prediction(dir: &Path, pg: &PredictiveGrid) -> Result<()> {
    let s = &pg.summary;
    write_map(&dir.join("mean.csv"), pg, "mean", |k| s[k].mean)?;
    write_map(&dir.join("sd.csv"), pg, "sd", |k| s[k].sd)?;
    let path = dir.join("prediction.csv");
    let mut w = writer(&path)?;
    w.write_record([
        "lat", "lon", "elev_km", "area_km2", "mean", "sd", "q025", "q05", "q95", "q975",
    ])
    .map_err(|e| CliError::io(&path, e))?;
    for (k, p) in pg.points.iter().enumerate() {
        let n = s[k];
        w.serialize((
            p.lat(),
            p.lon(),
            p.elev(),
            pg.area[k],
            n.mean,
            n.sd,
            n.q025,
            n.q05,
            n.q95,
            n.q975,
        ))
        .map_err(|e| CliError::io(&path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignRow {
    pub rank: usize,
    pub lat: f64,
    pub lon: f64,
    pub elev: f64,
    pub imse: f64,
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = writer(path)?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = reader(path)?;
    rdr.deserialize::<T>()
        .map(|r| r.map_err(|e| CliError::Data(format!("{}{}: {e}", path.display(), line_of(&e)))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub model: String,
    pub prmse: f64,
    pub coverage90: f64,
    pub crps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub model: String,
    pub replicate: usize,
    pub n: usize,
    pub prmse: f64,
    pub coverage90: f64,
    pub crps: f64,
}

pub fn write_scores(dir: &Path, reports: &[ScoreReport]) -> Result<()> {
    let rows: Vec<ScoreRow> = reports
        .iter()
        .map(|r| ScoreRow {
            model: r.model.clone(),
            prmse: r.prmse,
            coverage90: r.coverage90,
            crps: r.crps,
        })
        .collect();
    write_rows(&dir.join("scores.csv"), &rows)?;
    let reps: Vec<ReplicateRow> = reports
        .iter()
        .flat_map(|r| {
            r.replicates.iter().map(|s| ReplicateRow {
                model: r.model.clone(),
                replicate: s.replicate,
                n: s.n,
                prmse: s.prmse,
                coverage90: s.coverage90,
                crps: s.crps,
            })
        })
        .collect();
    write_rows(&dir.join("replicates.csv"), &reps)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path).map_err(|e| CliError::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| CliError::io(path, e))?;
    f.write_all(b"\n").map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
