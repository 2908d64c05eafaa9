//! Composition sampling of the posterior predictive on a grid, back
//! transformation and area integration.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceSpec;
use crate::error::{Error, Result};
use crate::geo::{AreaGrid, GeoPoint};
use crate::mcmc::Chain;
use crate::model::{Dataset, ModelState};
use crate::nngp::{
    conditional_weights, nearest_sites, NeighborMetric, DEFAULT_JITTER, DEFAULT_NEIGHBORS,
};
use crate::stats::{mean, quantile_sorted, sample_variance, sorted};
use crate::transform::TransformSpec;

/// mm w.e. x km^2 per gigatonne.
pub const MM_KM2_PER_GTON: f64 = 1e6;

/// Grid nodes with their cell areas and design rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrid {
    points: Vec<GeoPoint>,
    area: Vec<f64>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
}

impl PredictionGrid {
    pub fn new(
        points: Vec<GeoPoint>,
        area: Vec<f64>,
        x: DMatrix<f64>,
        z: DMatrix<f64>,
    ) -> Result<Self> {
        let n = points.len();
        for (name, rows) in [("area", area.len()), ("x", x.nrows()), ("z", z.nrows())] {
            if rows != n {
                return Err(Error::Data(format!(
                    "grid {name} has {rows} rows for {n} nodes"
                )));
            }
        }
        if let Some(k) = area.iter().position(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(Error::Data(format!(
                "grid node {k} has invalid area {}",
                area[k]
            )));
        }
        Ok(Self { points, area, x, z })
    }

    pub fn from_area_grid(grid: &AreaGrid, x: DMatrix<f64>, z: DMatrix<f64>) -> Result<Self> {
        Self::new(grid.points.clone(), grid.cell_area.clone(), x, z)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[GeoPoint] {
        &self.points
    }

    pub fn area(&self) -> &[f64] {
        &self.area
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictOptions {
    pub m: usize,
    /// Add the A-rated nugget to every draw.
    pub nugget: bool,
    pub draws_per_state: usize,
    /// Uniformly spaced subsample of posterior states; `None` uses all.
    pub max_states: Option<usize>,
    pub seed: u64,
    pub metric: NeighborMetric,
    pub jitter: f64,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            m: DEFAULT_NEIGHBORS,
            nugget: true,
            draws_per_state: 1,
            max_states: None,
            seed: 1,
            metric: NeighborMetric::GreatCircle,
            jitter: DEFAULT_JITTER,
        }
    }
}

impl PredictOptions {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::param("predict.m", "must be at least 1"));
        }
        if self.draws_per_state == 0 {
            return Err(Error::param(
                "predict.draws_per_state",
                "must be at least 1",
            ));
        }
        if self.max_states == Some(0) {
            return Err(Error::param("predict.max_states", "must be at least 1"));
        }
        Ok(())
    }
}

/// Per-node summary of predictive draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q05: f64,
    pub q95: f64,
    pub q975: f64,
}

impl NodeSummary {
    pub fn from_samples(x: &[f64]) -> Self {
        let s = sorted(x);
        Self {
            mean: mean(x),
            sd: sample_variance(x).sqrt(),
            q025: quantile_sorted(&s, 0.025),
            q05: quantile_sorted(&s, 0.05),
            q95: quantile_sorted(&s, 0.95),
            q975: quantile_sorted(&s, 0.975),
        }
    }
}

/// Back-transformed predictive draws on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveGrid {
    pub points: Vec<GeoPoint>,
    pub area: Vec<f64>,
    /// One row of draws per node; draw `d` of every node comes from the same posterior state.
    pub samples: Vec<Vec<f64>>,
    pub summary: Vec<NodeSummary>,
    /// Draws rejected for falling outside the transform image.
    pub rejected: usize,
    /// Draws clamped after exhausting resampling.
    pub clamped: usize,
}

impl PredictiveGrid {
    pub fn from_samples(
        points: Vec<GeoPoint>,
        area: Vec<f64>,
        samples: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if samples.len() != points.len() || area.len() != points.len() {
            return Err(Error::Dimension {
                expected: points.len(),
                found: samples.len(),
            });
        }
        let n = samples.first().map_or(0, Vec::len);
        if n == 0 || samples.iter().any(|s| s.len() != n) {
            return Err(Error::Data(
                "every node needs the same nonzero number of draws".into(),
            ));
        }
        let summary = samples
            .iter()
            .map(|s| NodeSummary::from_samples(s))
            .collect();
        Ok(Self {
            points,
            area,
            samples,
            summary,
            rejected: 0,
            clamped: 0,
        })
    }

    pub fn n_draws(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }
}

/// Generator keyed by run seed, posterior state, node and purpose.
pub fn keyed_rng(seed: u64, state: usize, node: usize, tag: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(state as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(node as u64).to_le_bytes());
    key[24..].copy_from_slice(&tag.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Indices of `max` uniformly spaced entries out of `n` (all when `max >= n`).
pub fn spread_indices(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(k) if k < n => (0..k).map(|i| (i * n) / k).collect(),
        _ => (0..n).collect(),
    }
}

/// Process values at the reference set for one posterior state.
pub(crate) struct StateView<'a> {
    pub state: &'a ModelState,
    pub w: std::borrow::Cow<'a, DMatrix<f64>>,
    pub chol_v: DMatrix<f64>,
}

impl<'a> StateView<'a> {
    pub fn new(state: &'a ModelState, w: std::borrow::Cow<'a, DMatrix<f64>>) -> Result<Self> {
        let chol_v = Cholesky::new(state.v.clone())
            .ok_or_else(|| Error::Numerical("V is not positive definite".into()))?
            .l();
        Ok(Self { state, w, chol_v })
    }
}

pub(crate) struct Draws {
    pub samples: Vec<Vec<f64>>,
    pub rejected: usize,
    pub clamped: usize,
}

/// Predictive draws at the listed grid nodes given per-state process values
/// at `refs`. Draws depend only on (seed, state, node, tag) and the neighbor
/// system, so a node with an unchanged neighbor set reproduces its draws.
pub(crate) fn draw_grid(
    views: &[StateView<'_>],
    refs: &[GeoPoint],
    grid: &PredictionGrid,
    nodes: &[usize],
    transform: &TransformSpec,
    opts: &PredictOptions,
    tag: u64,
) -> Result<Draws> {
    let per_node: Vec<Result<(Vec<f64>, usize, usize)>> = nodes
        .par_iter()
        .map(|&k| {
            let target = &grid.points[k];
            let nb = nearest_sites(target, refs, opts.m, opts.metric);
            let nb_sites: Vec<&GeoPoint> = nb.iter().map(|&j| &refs[j]).collect();
            let xk = grid.x.row(k);
            let zk = grid.z.row(k);
            let mut cached: Option<(CovarianceSpec, DVector<f64>, f64)> = None;
            let mut out = Vec::with_capacity(views.len() * opts.draws_per_state);
            let (mut rejected, mut clamped) = (0, 0);
            for (si, view) in views.iter().enumerate() {
                let st = view.state;
                let (weights, var) = match &cached {
                    Some((c, b, v)) if *c == st.cov => (b.clone(), *v),
                    _ => {
                        let (b, v) = conditional_weights(target, &nb_sites, &st.cov, opts.jitter)?;
                        cached = Some((st.cov, b.clone(), v));
                        (b, v)
                    }
                };
                let p = view.w.ncols();
                let mut mean_w = DVector::zeros(p);
                for (a, &j) in nb.iter().enumerate() {
                    mean_w.axpy(weights[a], &view.w.row(j).transpose(), 1.0);
                }
                let fixed = xk.dot(&st.beta.transpose());
                let sd_w = var.sqrt();
                let sd_e = if opts.nugget { st.tau2.a.sqrt() } else { 0.0 };
                let mut rng = keyed_rng(opts.seed, si, k, tag);
                for _ in 0..opts.draws_per_state {
                    let mut draw = || {
                        let xi = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
                        let w = &mean_w + &view.chol_v * xi * sd_w;
                        let eps: f64 = rng.sample(StandardNormal);
                        fixed + zk.dot(&w.transpose()) + sd_e * eps
                    };
                    let b = transform.inverse_resampled(&mut draw);
                    rejected += b.rejected;
                    clamped += b.clamped as usize;
                    out.push(b.value);
                }
            }
            Ok((out, rejected, clamped))
        })
        .collect();
    let mut samples = Vec::with_capacity(nodes.len());
    let (mut rejected, mut clamped) = (0, 0);
    for r in per_node {
        let (s, rj, cl) = r?;
        samples.push(s);
        rejected += rj;
        clamped += cl;
    }
    Ok(Draws {
        samples,
        rejected,
        clamped,
    })
}

/// Posterior predictive on a grid by composition sampling over chain states.
pub fn predict_grid(
    chain: &Chain,
    data: &Dataset,
    grid: &PredictionGrid,
    transform: &TransformSpec,
    opts: &PredictOptions,
) -> Result<PredictiveGrid> {
    opts.validate()?;
    if chain.is_empty() {
        return Err(Error::Data("chain has no recorded draws".into()));
    }
    if grid.is_empty() {
        return Err(Error::Data("prediction grid is empty".into()));
    }
    if grid.x.ncols() != data.px() || grid.z.ncols() != data.pz() {
        return Err(Error::Dimension {
            expected: data.px() + data.pz(),
            found: grid.x.ncols() + grid.z.ncols(),
        });
    }
    let views = spread_indices(chain.len(), opts.max_states)
        .into_iter()
        .map(|i| {
            StateView::new(
                &chain.draws[i],
                std::borrow::Cow::Borrowed(&chain.draws[i].w),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let nodes: Vec<usize> = (0..grid.len()).collect();
    let d = draw_grid(&views, data.sites(), grid, &nodes, transform, opts, 0)?;
    if d.rejected > 0 {
        log::info!(
            "{} predictive draws fell outside the transform image and were redrawn",
            d.rejected
        );
    }
    if d.clamped > 0 {
        log::warn!(
            "{} predictive draws were clamped to the transform boundary",
            d.clamped
        );
    }
    let mut pg = PredictiveGrid::from_samples(grid.points.clone(), grid.area.clone(), d.samples)?;
    pg.rejected = d.rejected;
    pg.clamped = d.clamped;
    Ok(pg)
}

/// Point estimate with a central 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn from_draws(x: &[f64]) -> Self {
        let s = sorted(x);
        Self {
            mean: mean(x),
            lo: quantile_sorted(&s, 0.025),
            hi: quantile_sorted(&s, 0.975),
        }
    }
}

/// Area-integrated mass balance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegralEstimate {
    /// Gton per year.
    pub net: Interval,
    /// mm w.e. per year.
    pub avg: Interval,
    pub total_area_km2: f64,
    pub net_draws: Vec<f64>,
    pub avg_draws: Vec<f64>,
}

/// Net (Gton/yr) and area-averaged (mm w.e./yr) mass balance per draw.
pub fn integrate_smb(pg: &PredictiveGrid) -> Result<IntegralEstimate> {
    let n = pg.n_draws();
    if n == 0 {
        return Err(Error::Data("no predictive draws to integrate".into()));
    }
    let total: f64 = pg.area.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Data("grid has zero total area".into()));
    }
    let mut sums = vec![0.0; n];
    for (row, &a) in pg.samples.iter().zip(&pg.area) {
        for (s, &y) in sums.iter_mut().zip(row) {
            *s += y * a;
        }
    }
    let net_draws: Vec<f64> = sums.iter().map(|s| s / MM_KM2_PER_GTON).collect();
    let avg_draws: Vec<f64> = sums.iter().map(|s| s / total).collect();
    Ok(IntegralEstimate {
        net: Interval::from_draws(&net_draws),
        avg: Interval::from_draws(&avg_draws),
        total_area_km2: total,
        net_draws,
        avg_draws,
    })
}
