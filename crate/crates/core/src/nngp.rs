//! Nearest-neighbor Gaussian process machinery: reference-set ordering,
//! neighbor DAG, per-node kriging weights and conditional variances, the
//! sparse joint density and neighbor-conditional prediction.
//!
//! Multivariate processes use the cross-covariance `V * C(s, s')`, so every
//! weight stays scalar per neighbor and every conditional variance is `F * V`.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{CovarianceSpec, Lag};
use crate::error::{Error, Result};
use crate::geo::{central_angle, GeoPoint};

/// Default neighbor count.
pub const DEFAULT_NEIGHBORS: usize = 20;

/// Default diagonal regularization, relative to the kernel variance.
pub const DEFAULT_JITTER: f64 = 1e-10;

/// Smallest-eigenvalue threshold (relative to the variance) that triggers jitter.
const NEAR_SINGULAR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum OrderingStrategy {
    /// Sort by latitude, then longitude, then elevation.
    #[default]
    Coordinate,
    /// Greedy maximum-minimum-distance ordering from the site nearest the centroid.
    MaxMin,
}

/// Distance used to pick neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum NeighborMetric {
    /// Great-circle angle only.
    #[default]
    GreatCircle,
    /// Euclidean combination of arc length (km) and scaled elevation gap;
    /// `elev_scale` is horizontal kilometers per kilometer of elevation.
    GreatCircleElevation { elev_scale: f64, radius_km: f64 },
}

impl NeighborMetric {
    pub fn distance(&self, a: &GeoPoint, b: &GeoPoint) -> f64 {
        match *self {
            NeighborMetric::GreatCircle => central_angle(a, b),
            NeighborMetric::GreatCircleElevation {
                elev_scale,
                radius_km,
            } => {
                let arc = central_angle(a, b) * radius_km;
                arc.hypot(elev_scale * (a.elev() - b.elev()))
            }
        }
    }
}

/// Errors if any two sites share latitude, longitude and elevation.
pub fn check_distinct(sites: &[GeoPoint]) -> Result<()> {
    let mut idx: Vec<usize> = (0..sites.len()).collect();
    let key = |p: &GeoPoint| (p.lat(), p.lon(), p.elev());
    idx.sort_by(|&a, &b| {
        let (ka, kb) = (key(&sites[a]), key(&sites[b]));
        ka.0.total_cmp(&kb.0)
            .then(ka.1.total_cmp(&kb.1))
            .then(ka.2.total_cmp(&kb.2))
    });
    for w in idx.windows(2) {
        if sites[w[0]] == sites[w[1]] {
            let p = sites[w[0]];
            return Err(Error::Data(format!(
                "duplicate reference sites {} and {} at ({}, {}, {})",
                w[0].min(w[1]),
                w[0].max(w[1]),
                p.lat(),
                p.lon(),
                p.elev()
            )));
        }
    }
    Ok(())
}

fn unit_vector(p: &GeoPoint) -> [f64; 3] {
    let (phi, lam) = (p.lat().to_radians(), p.lon().to_radians());
    [phi.cos() * lam.cos(), phi.cos() * lam.sin(), phi.sin()]
}

/// Ordering of the reference set. Returns the site indices in DAG order.
pub fn order_reference_set(sites: &[GeoPoint], strategy: OrderingStrategy) -> Result<Vec<usize>> {
    if sites.is_empty() {
        return Err(Error::Data("empty reference set".into()));
    }
    check_distinct(sites)?;
    let mut order: Vec<usize> = (0..sites.len()).collect();
    match strategy {
        OrderingStrategy::Coordinate => {
            order.sort_by(|&a, &b| {
                let (pa, pb) = (&sites[a], &sites[b]);
                pa.lat()
                    .total_cmp(&pb.lat())
                    .then(pa.lon().total_cmp(&pb.lon()))
                    .then(pa.elev().total_cmp(&pb.elev()))
                    .then(a.cmp(&b))
            });
        }
        OrderingStrategy::MaxMin => {
            let mut c = [0.0; 3];
            for p in sites {
                let u = unit_vector(p);
                for k in 0..3 {
                    c[k] += u[k];
                }
            }
            // angle to the centroid direction is monotone in -dot product
            let start = (0..sites.len())
                .max_by(|&a, &b| {
                    let (ua, ub) = (unit_vector(&sites[a]), unit_vector(&sites[b]));
                    let da: f64 = (0..3).map(|k| ua[k] * c[k]).sum();
                    let db: f64 = (0..3).map(|k| ub[k] * c[k]).sum();
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("nonempty");
            order.clear();
            order.push(start);
            let mut used = vec![false; sites.len()];
            used[start] = true;
            let mut min_d: Vec<f64> = sites
                .iter()
                .map(|p| central_angle(p, &sites[start]))
                .collect();
            for _ in 1..sites.len() {
                let mut best: Option<usize> = None;
                for i in 0..sites.len() {
                    if used[i] {
                        continue;
                    }
                    if best.is_none_or(|b| min_d[i] > min_d[b]) {
                        best = Some(i);
                    }
                }
                let next = best.expect("remaining site");
                used[next] = true;
                order.push(next);
                for i in 0..sites.len() {
                    if !used[i] {
                        min_d[i] = min_d[i].min(central_angle(&sites[i], &sites[next]));
                    }
                }
            }
        }
    }
    Ok(order)
}

/// Directed acyclic neighbor graph over an ordered reference set.
/// All indices refer to positions in the original site list.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    order: Vec<usize>,
    rank: Vec<usize>,
    neighbors: Vec<Vec<usize>>,
    /// For each site, `(child, slot)` pairs with `neighbors[child][slot] == site`.
    children: Vec<Vec<(usize, usize)>>,
    m: usize,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Position of a site in the DAG order.
    pub fn rank(&self, site: usize) -> usize {
        self.rank[site]
    }

    pub fn neighbors(&self, site: usize) -> &[usize] {
        &self.neighbors[site]
    }

    pub fn children(&self, site: usize) -> &[(usize, usize)] {
        &self.children[site]
    }

    /// `(node, neighbor)` edges in DAG order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.order
            .iter()
            .flat_map(move |&i| self.neighbors[i].iter().map(move |&j| (i, j)))
    }
}

/// For each site, its `m` nearest predecessors in `order`.
pub fn build_neighbor_graph(
    sites: &[GeoPoint],
    order: &[usize],
    m: usize,
    metric: NeighborMetric,
) -> Result<NeighborGraph> {
    if m == 0 {
        return Err(Error::param("m", "neighbor count must be at least 1"));
    }
    let k = sites.len();
    if order.len() != k {
        return Err(Error::Dimension {
            expected: k,
            found: order.len(),
        });
    }
    let mut rank = vec![usize::MAX; k];
    for (pos, &i) in order.iter().enumerate() {
        if i >= k || rank[i] != usize::MAX {
            return Err(Error::Data(
                "order is not a permutation of the sites".into(),
            ));
        }
        rank[i] = pos;
    }

    let per_position: Vec<Vec<usize>> = (0..k)
        .into_par_iter()
        .map(|pos| {
            let site = &sites[order[pos]];
            let mut cand: Vec<(f64, usize)> = order[..pos]
                .iter()
                .enumerate()
                .map(|(p, &j)| (metric.distance(site, &sites[j]), p))
                .collect();
            nearest_first(&mut cand, m);
            cand.into_iter().map(|(_, p)| order[p]).collect()
        })
        .collect();

    let mut neighbors = vec![Vec::new(); k];
    for (pos, nb) in per_position.into_iter().enumerate() {
        neighbors[order[pos]] = nb;
    }
    let mut children = vec![Vec::new(); k];
    for &t in order {
        for (slot, &s) in neighbors[t].iter().enumerate() {
            children[s].push((t, slot));
        }
    }
    Ok(NeighborGraph {
        order: order.to_vec(),
        rank,
        neighbors,
        children,
        m,
    })
}

// Keeps the m smallest (distance, tiebreak) entries, sorted ascending.
fn nearest_first(cand: &mut Vec<(f64, usize)>, m: usize) {
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if cand.len() > m {
        cand.select_nth_unstable_by(m - 1, cmp);
        cand.truncate(m);
    }
    cand.sort_by(cmp);
}

/// Indices of the `m` sites nearest to `target` (ties broken by index).
pub fn nearest_sites(
    target: &GeoPoint,
    sites: &[GeoPoint],
    m: usize,
    metric: NeighborMetric,
) -> Vec<usize> {
    let mut cand: Vec<(f64, usize)> = sites
        .iter()
        .enumerate()
        .map(|(i, s)| (metric.distance(target, s), i))
        .collect();
    nearest_first(&mut cand, m.min(sites.len()));
    cand.into_iter().map(|(_, i)| i).collect()
}

/// Kriging weights `B` and conditional variances `F` for every node.
#[derive(Debug, Clone, PartialEq)]
pub struct NngpFactors {
    b: Vec<Vec<f64>>,
    f: Vec<f64>,
    jittered: usize,
}

impl NngpFactors {
    pub fn b(&self, site: usize) -> &[f64] {
        &self.b[site]
    }

    pub fn f(&self, site: usize) -> f64 {
        self.f[site]
    }

    /// Number of nodes whose neighbor matrix needed regularization.
    pub fn jittered(&self) -> usize {
        self.jittered
    }
}

/// Weights `C_N^-1 c` for one neighbor system, regularizing the diagonal by
/// `jitter * sigma2` when `C_N` is numerically singular. Returns the weights
/// and whether jitter was applied.
pub(crate) fn kriging_weights(
    mut c_nn: DMatrix<f64>,
    c_sn: &DVector<f64>,
    sigma2: f64,
    jitter: f64,
) -> Option<(DVector<f64>, bool)> {
    let mut jittered = false;
    let chol = match Cholesky::new(c_nn.clone()) {
        Some(ch) if min_eigen_estimate(&ch) >= NEAR_SINGULAR * sigma2 => Some(ch),
        first => {
            if jitter > 0.0 {
                for i in 0..c_nn.nrows() {
                    c_nn[(i, i)] += jitter * sigma2;
                }
                jittered = true;
                Cholesky::new(c_nn)
            } else {
                first
            }
        }
    }?;
    Some((chol.solve(c_sn), jittered))
}

// Rayleigh-quotient estimate of the smallest eigenvalue by inverse iteration.
fn min_eigen_estimate(chol: &Cholesky<f64, Dyn>) -> f64 {
    let n = chol.l_dirty().nrows();
    let mut x = DVector::from_fn(n, |i, _| 1.0 + 0.1 * i as f64);
    x /= x.norm();
    let mut est = f64::INFINITY;
    for _ in 0..4 {
        let y = chol.solve(&x);
        let ny = y.norm();
        if !(ny.is_finite() && ny > 0.0) {
            return 0.0;
        }
        est = 1.0 / x.dot(&y);
        x = y / ny;
    }
    est
}

/// Per-node weights and conditional variances under `spec`.
pub fn compute_factors(
    graph: &NeighborGraph,
    sites: &[GeoPoint],
    spec: &CovarianceSpec,
    jitter: f64,
) -> Result<NngpFactors> {
    if sites.len() != graph.len() {
        return Err(Error::Dimension {
            expected: graph.len(),
            found: sites.len(),
        });
    }
    if !(jitter >= 0.0) {
        return Err(Error::param("jitter", "must be non-negative"));
    }
    let sigma2 = spec.eval(Lag::ZERO);
    let results: Vec<Result<(Vec<f64>, f64, bool)>> = (0..sites.len())
        .into_par_iter()
        .map(|i| {
            let nb = graph.neighbors(i);
            if nb.is_empty() {
                return Ok((Vec::new(), sigma2, false));
            }
            let n = nb.len();
            let mut c_nn = DMatrix::zeros(n, n);
            for a in 0..n {
                c_nn[(a, a)] = sigma2;
                for b in 0..a {
                    let c = spec.between(&sites[nb[a]], &sites[nb[b]]);
                    c_nn[(a, b)] = c;
                    c_nn[(b, a)] = c;
                }
            }
            let c_sn = DVector::from_fn(n, |a, _| spec.between(&sites[i], &sites[nb[a]]));
            let (b, jittered) =
                kriging_weights(c_nn, &c_sn, sigma2, jitter).ok_or(Error::Degenerate {
                    node: i,
                    value: 0.0,
                })?;
            let f = sigma2 - b.dot(&c_sn);
            if !(f > 1e-14 * sigma2) {
                return Err(Error::Degenerate { node: i, value: f });
            }
            Ok((b.as_slice().to_vec(), f, jittered))
        })
        .collect();

    let mut b = Vec::with_capacity(sites.len());
    let mut f = Vec::with_capacity(sites.len());
    let mut jittered = 0;
    for r in results {
        let (bi, fi, ji) = r?;
        b.push(bi);
        f.push(fi);
        jittered += ji as usize;
    }
    if jittered > 0 {
        log::debug!("jitter applied to {jittered} neighbor systems");
    }
    Ok(NngpFactors { b, f, jittered })
}

/// Neighbor-weighted mean `sum_j B_ij w_N(i)j` for node `i` (a row of length p).
pub fn parent_mean(
    w: &DMatrix<f64>,
    graph: &NeighborGraph,
    factors: &NngpFactors,
    i: usize,
) -> DVector<f64> {
    let mut mean = DVector::zeros(w.ncols());
    for (&j, &bj) in graph.neighbors(i).iter().zip(factors.b(i)) {
        for c in 0..w.ncols() {
            mean[c] += bj * w[(j, c)];
        }
    }
    mean
}

/// Log density of `w` (one row per site, one column per process component)
/// under the NNGP with cross-covariance `V * C`.
pub fn nngp_log_density(
    w: &DMatrix<f64>,
    factors: &NngpFactors,
    graph: &NeighborGraph,
    v: &DMatrix<f64>,
) -> Result<f64> {
    let p = w.ncols();
    if w.nrows() != graph.len() {
        return Err(Error::Dimension {
            expected: graph.len(),
            found: w.nrows(),
        });
    }
    if v.nrows() != p || v.ncols() != p {
        return Err(Error::Dimension {
            expected: p,
            found: v.nrows(),
        });
    }
    let chol = Cholesky::new(v.clone())
        .ok_or_else(|| Error::Numerical("V is not positive definite".into()))?;
    let log_det_v: f64 = 2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>();
    let pf = p as f64;
    // fixed summation order keeps results independent of thread scheduling
    let terms: Vec<f64> = (0..graph.len())
        .into_par_iter()
        .map(|i| {
            let fi = factors.f(i);
            let r = w.row(i).transpose() - parent_mean(w, graph, factors, i);
            let quad = r.dot(&chol.solve(&r)) / fi;
            -0.5 * (pf * (2.0 * PI).ln() + pf * fi.ln() + log_det_v + quad)
        })
        .collect();
    Ok(terms.iter().sum())
}

/// Gaussian conditional of the process at a new location given neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditional {
    pub neighbors: Vec<usize>,
    pub weights: DVector<f64>,
    /// Scalar conditional variance in correlation units times the kernel variance.
    pub variance: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Scalar weights and variance at `target` given a fixed neighbor set.
pub fn conditional_weights(
    target: &GeoPoint,
    neighbor_sites: &[&GeoPoint],
    spec: &CovarianceSpec,
    jitter: f64,
) -> Result<(DVector<f64>, f64)> {
    let sigma2 = spec.eval(Lag::ZERO);
    let n = neighbor_sites.len();
    if n == 0 {
        return Ok((DVector::zeros(0), sigma2));
    }
    let mut c_nn = DMatrix::zeros(n, n);
    for a in 0..n {
        c_nn[(a, a)] = sigma2;
        for b in 0..a {
            let c = spec.between(neighbor_sites[a], neighbor_sites[b]);
            c_nn[(a, b)] = c;
            c_nn[(b, a)] = c;
        }
    }
    let c_sn = DVector::from_fn(n, |a, _| spec.between(target, neighbor_sites[a]));
    let (b, _) = kriging_weights(c_nn, &c_sn, sigma2, jitter).ok_or_else(|| {
        Error::Numerical(format!(
            "singular neighbor covariance for target ({}, {})",
            target.lat(),
            target.lon()
        ))
    })?;
    let var = (sigma2 - b.dot(&c_sn)).max(0.0);
    Ok((b, var))
}

/// Conditional normal of `w(target)` given the `m` nearest reference sites.
#[allow(clippy::too_many_arguments)]
pub fn conditional_predict(
    target: &GeoPoint,
    reference: &[GeoPoint],
    w: &DMatrix<f64>,
    m: usize,
    spec: &CovarianceSpec,
    v: &DMatrix<f64>,
    metric: NeighborMetric,
    jitter: f64,
) -> Result<Conditional> {
    if w.nrows() != reference.len() {
        return Err(Error::Dimension {
            expected: reference.len(),
            found: w.nrows(),
        });
    }
    if v.nrows() != w.ncols() {
        return Err(Error::Dimension {
            expected: w.ncols(),
            found: v.nrows(),
        });
    }
    let neighbors = nearest_sites(target, reference, m, metric);
    let nb_sites: Vec<&GeoPoint> = neighbors.iter().map(|&j| &reference[j]).collect();
    let (weights, variance) = conditional_weights(target, &nb_sites, spec, jitter)?;
    let mut mean = DVector::zeros(w.ncols());
    for (a, &j) in neighbors.iter().enumerate() {
        for c in 0..w.ncols() {
            mean[c] += weights[a] * w[(j, c)];
        }
    }
    Ok(Conditional {
        neighbors,
        weights,
        variance,
        mean,
        cov: v * variance,
    })
}
