//! Sequential site selection by integrated predictive variance (IMSE).
//!
//! For each posterior state, proposed and pending sites enter the reference
//! set with their conditional-mean process value under that state. Each grid
//! node's predictive variance is then taken across states and draws on the
//! original scale and weighted by cell area.

use std::borrow::Cow;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::mcmc::Chain;
use crate::model::{Dataset, ModelState};
use crate::nngp::{conditional_predict, nearest_sites};
use crate::predict::{draw_grid, spread_indices, PredictOptions, PredictionGrid, StateView};
use crate::stats::sample_variance;
use crate::transform::TransformSpec;

const DESIGN_TAG: u64 = 0x1d5e;

#[derive(Debug, Clone, PartialEq)]
pub struct DesignProblem {
    pub candidates: Vec<GeoPoint>,
    pub grid: PredictionGrid,
    pub n_select: usize,
    /// Neighbor count, nugget mode, posterior-state budget (`max_states`),
    /// draws per state and seed.
    pub predict: PredictOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignResult {
    /// Candidate indices in priority order.
    pub selected: Vec<usize>,
    pub sites: Vec<GeoPoint>,
    /// Per round, `(candidate index, IMSE)` for every candidate still available.
    pub imse_trace: Vec<Vec<(usize, f64)>>,
}

/// Reference set and per-state process values for one selection round.
struct RoundState<'a> {
    refs: Vec<GeoPoint>,
    states: Vec<&'a ModelState>,
    w: Vec<DMatrix<f64>>,
    /// Baseline per-node variance and distance to the m-th nearest reference.
    base_var: Vec<f64>,
    mth_dist: Vec<f64>,
}

fn check_distinct(c: &GeoPoint, refs: &[GeoPoint]) -> Result<()> {
    if let Some(r) = refs.iter().find(|r| r.same_location(c)) {
        return Err(Error::Data(format!(
            "candidate ({}, {}, {}) duplicates reference site ({}, {}, {})",
            c.lat(),
            c.lon(),
            c.elev(),
            r.lat(),
            r.lon(),
            r.elev()
        )));
    }
    Ok(())
}

/// Conditional-mean process value at `site` for each state.
fn conditional_rows(
    site: &GeoPoint,
    refs: &[GeoPoint],
    round: &RoundState<'_>,
    opts: &PredictOptions,
) -> Result<Vec<nalgebra::RowDVector<f64>>> {
    round
        .states
        .iter()
        .zip(&round.w)
        .map(|(st, w)| {
            let c = conditional_predict(
                site,
                refs,
                w,
                opts.m,
                &st.cov,
                &st.v,
                opts.metric,
                opts.jitter,
            )?;
            Ok(c.mean.transpose())
        })
        .collect()
}

fn node_variances(
    round: &RoundState<'_>,
    refs: &[GeoPoint],
    w: &[DMatrix<f64>],
    grid: &PredictionGrid,
    nodes: &[usize],
    transform: &TransformSpec,
    opts: &PredictOptions,
) -> Result<Vec<f64>> {
    let views = round
        .states
        .iter()
        .zip(w)
        .map(|(st, w)| StateView::new(st, Cow::Borrowed(w)))
        .collect::<Result<Vec<_>>>()?;
    let d = draw_grid(&views, refs, grid, nodes, transform, opts, DESIGN_TAG)?;
    Ok(d.samples.iter().map(|s| sample_variance(s)).collect())
}

impl<'a> RoundState<'a> {
    fn new(
        data: &Dataset,
        states: Vec<&'a ModelState>,
        grid: &PredictionGrid,
        transform: &TransformSpec,
        opts: &PredictOptions,
    ) -> Result<Self> {
        let mut r = RoundState {
            refs: data.sites().to_vec(),
            w: states.iter().map(|s| s.w.clone()).collect(),
            states,
            base_var: Vec::new(),
            mth_dist: Vec::new(),
        };
        r.refresh(grid, transform, opts)?;
        Ok(r)
    }

    fn refresh(
        &mut self,
        grid: &PredictionGrid,
        transform: &TransformSpec,
        opts: &PredictOptions,
    ) -> Result<()> {
        let nodes: Vec<usize> = (0..grid.len()).collect();
        self.base_var = node_variances(self, &self.refs, &self.w, grid, &nodes, transform, opts)?;
        self.mth_dist = grid
            .points()
            .iter()
            .map(|p| {
                if self.refs.len() < opts.m {
                    f64::INFINITY
                } else {
                    let nb = nearest_sites(p, &self.refs, opts.m, opts.metric);
                    opts.metric
                        .distance(p, &self.refs[*nb.last().expect("m >= 1")])
                }
            })
            .collect();
        Ok(())
    }

    /// Appends a site with its conditional-mean values.
    fn push(&mut self, site: GeoPoint, opts: &PredictOptions) -> Result<()> {
        let rows = conditional_rows(&site, &self.refs, self, opts)?;
        for (w, row) in self.w.iter_mut().zip(rows) {
            let n = w.nrows();
            let mut grown = w.clone().insert_row(n, 0.0);
            grown.set_row(n, &row);
            *w = grown;
        }
        self.refs.push(site);
        Ok(())
    }

    fn imse(
        &self,
        candidate: &GeoPoint,
        grid: &PredictionGrid,
        transform: &TransformSpec,
        opts: &PredictOptions,
    ) -> Result<f64> {
        check_distinct(candidate, &self.refs)?;
        // nodes whose m nearest references would include the candidate
        let affected: Vec<usize> = (0..grid.len())
            .filter(|&k| opts.metric.distance(&grid.points()[k], candidate) < self.mth_dist[k])
            .collect();
        let mut var = self.base_var.clone();
        if !affected.is_empty() {
            let rows = conditional_rows(candidate, &self.refs, self, opts)?;
            let w: Vec<DMatrix<f64>> = self
                .w
                .iter()
                .zip(rows)
                .map(|(w, row)| {
                    let n = w.nrows();
                    let mut g = w.clone().insert_row(n, 0.0);
                    g.set_row(n, &row);
                    g
                })
                .collect();
            let mut refs = self.refs.clone();
            refs.push(*candidate);
            let new_var = node_variances(self, &refs, &w, grid, &affected, transform, opts)?;
            for (&k, v) in affected.iter().zip(new_var) {
                var[k] = v;
            }
        }
        Ok(var.iter().zip(grid.area()).map(|(v, a)| v * a).sum())
    }
}

fn design_states<'a>(chain: &'a Chain, opts: &PredictOptions) -> Result<Vec<&'a ModelState>> {
    opts.validate()?;
    if chain.is_empty() {
        return Err(Error::Data("chain has no recorded draws".into()));
    }
    let states: Vec<&ModelState> = spread_indices(chain.len(), opts.max_states)
        .into_iter()
        .map(|i| &chain.draws[i])
        .collect();
    if states.len() * opts.draws_per_state < 2 {
        return Err(Error::param(
            "design.draws",
            "need at least two predictive draws per node to estimate a variance",
        ));
    }
    Ok(states)
}

/// Area-weighted predictive variance over the grid after adding `candidate`
/// (and any `pending` sites) to the reference set.
pub fn imse_candidate(
    candidate: &GeoPoint,
    pending: &[GeoPoint],
    data: &Dataset,
    chain: &Chain,
    grid: &PredictionGrid,
    transform: &TransformSpec,
    opts: &PredictOptions,
) -> Result<f64> {
    let states = design_states(chain, opts)?;
    let mut round = RoundState::new(data, states, grid, transform, opts)?;
    for p in pending {
        check_distinct(p, &round.refs)?;
        round.push(*p, opts)?;
    }
    round.refresh(grid, transform, opts)?;
    round.imse(candidate, grid, transform, opts)
}

/// Area-weighted predictive variance with no added site.
pub fn imse_baseline(
    data: &Dataset,
    chain: &Chain,
    grid: &PredictionGrid,
    transform: &TransformSpec,
    opts: &PredictOptions,
) -> Result<f64> {
    let states = design_states(chain, opts)?;
    let round = RoundState::new(data, states, grid, transform, opts)?;
    Ok(round
        .base_var
        .iter()
        .zip(grid.area())
        .map(|(v, a)| v * a)
        .sum())
}

/// Greedy sequential selection: each round adds the candidate with the
/// smallest IMSE (ties to the lower index).
pub fn select_sites(
    problem: &DesignProblem,
    data: &Dataset,
    chain: &Chain,
    transform: &TransformSpec,
) -> Result<DesignResult> {
    let opts = &problem.predict;
    if problem.n_select > problem.candidates.len() {
        return Err(Error::param(
            "design.n_select",
            format!(
                "{} exceeds the {} candidates",
                problem.n_select,
                problem.candidates.len()
            ),
        ));
    }
    for (i, c) in problem.candidates.iter().enumerate() {
        check_distinct(c, data.sites())?;
        check_distinct(c, &problem.candidates[..i])?;
    }
    let mut result = DesignResult {
        selected: Vec::new(),
        sites: Vec::new(),
        imse_trace: Vec::new(),
    };
    if problem.n_select == 0 {
        return Ok(result);
    }
    let states = design_states(chain, opts)?;
    let mut round = RoundState::new(data, states, &problem.grid, transform, opts)?;
    let mut remaining: Vec<usize> = (0..problem.candidates.len()).collect();
    for r in 0..problem.n_select {
        let scores = remaining
            .par_iter()
            .map(|&i| {
                Ok((
                    i,
                    round.imse(&problem.candidates[i], &problem.grid, transform, opts)?,
                ))
            })
            .collect::<Result<Vec<(usize, f64)>>>()?;
        let &(best, best_val) = scores
            .iter()
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .expect("candidates remain");
        assert!(
            scores.iter().all(|&(_, v)| best_val <= v),
            "round {r} winner is not the minimum"
        );
        log::info!(
            "design round {}: candidate {best} with IMSE {best_val:.6e}",
            r + 1
        );
        result.selected.push(best);
        result.sites.push(problem.candidates[best]);
        result.imse_trace.push(scores);
        remaining.retain(|&i| i != best);
        if r + 1 < problem.n_select {
            round.push(problem.candidates[best], opts)?;
            round.refresh(&problem.grid, transform, opts)?;
        }
    }
    Ok(result)
}
