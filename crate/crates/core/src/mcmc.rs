//! Gibbs sampler with Metropolis-Hastings updates for the kernel parameters.
//!
//! Sweep order per iteration: w, beta, tau2, latent labels and theta, V,
//! kernel parameters.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta as BetaDist, Distribution, Exp, Gamma as GammaDist, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, gamma_ur};

use crate::covariance::{CovParam, CovarianceSpec};
use crate::error::{Error, Result};
use crate::model::{
    inv_wishart_ln_pdf, log_prior_cov_param, loglik_obs, rng_from_seed, Dataset, Label, ModelState,
    PriorSpec, Rating, ShapeRate, Tau2,
};
use crate::nngp::{
    build_neighbor_graph, compute_factors, nngp_log_density, order_reference_set, parent_mean,
    NeighborGraph, NeighborMetric, NngpFactors, OrderingStrategy, DEFAULT_JITTER,
    DEFAULT_NEIGHBORS,
};

const TARGET_ACCEPT: f64 = 0.3;

/// Reference-set graph settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NngpConfig {
    pub m: usize,
    pub ordering: OrderingStrategy,
    pub metric: NeighborMetric,
    pub jitter: f64,
}

impl Default for NngpConfig {
    fn default() -> Self {
        Self {
            m: DEFAULT_NEIGHBORS,
            ordering: OrderingStrategy::Coordinate,
            metric: NeighborMetric::GreatCircle,
            jitter: DEFAULT_JITTER,
        }
    }
}

impl NngpConfig {
    pub fn build(&self, sites: &[crate::geo::GeoPoint]) -> Result<NeighborGraph> {
        let order = order_reference_set(sites, self.ordering)?;
        build_neighbor_graph(sites, &order, self.m, self.metric)
    }
}

/// Random-walk scales on the transformed (log or logit) scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MhSteps {
    pub rho1: f64,
    pub rho2: f64,
    pub alpha: f64,
    pub delta: f64,
    pub nu: f64,
}

impl Default for MhSteps {
    fn default() -> Self {
        Self {
            rho1: 0.2,
            rho2: 0.2,
            alpha: 0.3,
            delta: 0.2,
            nu: 0.3,
        }
    }
}

impl MhSteps {
    pub fn get(&self, p: CovParam) -> f64 {
        match p {
            CovParam::Rho1 => self.rho1,
            CovParam::Rho2 => self.rho2,
            CovParam::Alpha => self.alpha,
            CovParam::Delta => self.delta,
            CovParam::Nu => self.nu,
        }
    }

    pub fn set(&mut self, p: CovParam, v: f64) {
        match p {
            CovParam::Rho1 => self.rho1 = v,
            CovParam::Rho2 => self.rho2 = v,
            CovParam::Alpha => self.alpha = v,
            CovParam::Delta => self.delta = v,
            CovParam::Nu => self.nu = v,
        }
    }
}

/// Which Gibbs blocks run; a disabled block keeps its current value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Blocks {
    pub w: bool,
    pub beta: bool,
    /// Joint beta/w move along shared design columns.
    pub shift: bool,
    pub tau: bool,
    pub labels: bool,
    pub v: bool,
    pub cov: bool,
    /// Extra kernel moves that hold the whitened process fixed.
    pub whitened: bool,
    /// Joint scale and shear moves on `(w, V)`.
    pub v_linear: bool,
    /// Mixing-weight move with the B/C labels summed out.
    pub theta_collapsed: bool,
}

impl Default for Blocks {
    fn default() -> Self {
        Self {
            w: true,
            beta: true,
            shift: true,
            tau: true,
            labels: true,
            v: true,
            cov: true,
            whitened: true,
            v_linear: true,
            theta_collapsed: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub iterations: usize,
    pub burnin: usize,
    pub thin: usize,
    pub seed: u64,
    pub mh_step: MhSteps,
    pub adapt: bool,
    /// Kernel parameters updated by MH; `None` means every active parameter.
    pub free_params: Option<Vec<CovParam>>,
    pub blocks: Blocks,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            iterations: 60_000,
            burnin: 10_000,
            thin: 1,
            seed: 1,
            mh_step: MhSteps::default(),
            adapt: true,
            free_params: None,
            blocks: Blocks::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burnin >= self.iterations {
            return Err(Error::param(
                "sampler.burnin",
                format!(
                    "burnin {} must be less than iterations {}",
                    self.burnin, self.iterations
                ),
            ));
        }
        if self.thin == 0 {
            return Err(Error::param("sampler.thin", "must be at least 1"));
        }
        for p in CovParam::ALL {
            let s = self.mh_step.get(p);
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::param(
                    "sampler.mh_step",
                    format!("{} step {s} must be positive", p.name()),
                ));
            }
        }
        Ok(())
    }

    pub fn recorded_draws(&self) -> usize {
        (self.iterations - self.burnin) / self.thin
    }
}

/// Draw from `N(P^-1 b, P^-1)` given precision `P` and linear term `b`.
pub fn draw_canonical(
    precision: &DMatrix<f64>,
    lin: &DVector<f64>,
    rng: &mut impl Rng,
) -> Option<DVector<f64>> {
    let chol = Cholesky::new(precision.clone())?;
    let mean = chol.solve(lin);
    let xi = DVector::from_fn(lin.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    // L' u = xi gives u ~ N(0, P^-1)
    let u = chol.l().transpose().solve_upper_triangular(&xi)?;
    Some(mean + u)
}

/// Fixed-effect update from its Gaussian full conditional.
pub fn update_beta(
    state: &mut ModelState,
    data: &Dataset,
    priors: &PriorSpec,
    rng: &mut impl Rng,
) -> Result<()> {
    let px = data.px();
    let mut prec = DMatrix::identity(px, px) / priors.beta_var;
    let mut lin = DVector::from_element(px, priors.beta_mean / priors.beta_var);
    for (j, o) in data.obs().iter().enumerate() {
        let t2 = state.obs_variance(data, j);
        let x = data.x().row(o.site).transpose();
        let zw = data.z().row(o.site).dot(&state.w.row(o.site));
        prec.ger(1.0 / t2, &x, &x, 1.0);
        lin.axpy((o.value - zw) / t2, &x, 1.0);
    }
    state.beta = draw_canonical(&prec, &lin, rng).ok_or_else(|| {
        Error::Numerical("beta full-conditional precision is not positive definite".into())
    })?;
    Ok(())
}

/// Pairs `(x column, z column)` with identical values at every site.
pub fn shared_columns(data: &Dataset) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    if data.n_sites() == 0 {
        return out;
    }
    for jx in 0..data.px() {
        if let Some(jz) = (0..data.pz()).find(|&jz| {
            data.x().column(jx) == data.z().column(jz) && !out.iter().any(|&(_, used)| used == jz)
        }) {
            out.push((jx, jz));
        }
    }
    out
}

/// Moves `beta[jx] += c` and `w[.., jz] -= c` for each shared pair, with `c`
/// drawn from its Gaussian full conditional. The linear predictor is unchanged.
pub fn update_shared_shift(
    state: &mut ModelState,
    graph: &NeighborGraph,
    factors: &NngpFactors,
    priors: &PriorSpec,
    pairs: &[(usize, usize)],
    rng: &mut impl Rng,
) -> Result<()> {
    if pairs.is_empty() {
        return Ok(());
    }
    let v_inv = Cholesky::new(state.v.clone())
        .ok_or_else(|| Error::Numerical("V is not positive definite".into()))?
        .inverse();
    for &(jx, jz) in pairs {
        let mut prec = 1.0 / priors.beta_var;
        let mut lin = -(state.beta[jx] - priors.beta_mean) / priors.beta_var;
        for i in 0..graph.len() {
            let s = 1.0 - factors.b(i).iter().sum::<f64>();
            let r = state.w.row(i).transpose() - parent_mean(&state.w, graph, factors, i);
            let f = factors.f(i);
            prec += s * s * v_inv[(jz, jz)] / f;
            lin += s * v_inv.row(jz).transpose().dot(&r) / f;
        }
        let c = lin / prec + rng.sample::<f64, _>(StandardNormal) / prec.sqrt();
        state.beta[jx] += c;
        state.w.column_mut(jz).add_scalar_mut(-c);
    }
    Ok(())
}

/// Sequential sweep over sites in graph order.
pub fn update_w(
    state: &mut ModelState,
    data: &Dataset,
    graph: &NeighborGraph,
    factors: &NngpFactors,
    rng: &mut impl Rng,
) -> Result<()> {
    let p = data.pz();
    let v_inv = Cholesky::new(state.v.clone())
        .ok_or_else(|| Error::Numerical("V is not positive definite".into()))?
        .inverse();
    for &i in graph.order() {
        let mut prec = DMatrix::zeros(p, p);
        let mut lin = DVector::zeros(p);
        let z = data.z().row(i).transpose();
        let xb = data.x().row(i).dot(&state.beta.transpose());
        for &j in data.site_obs(i) {
            let t2 = state.obs_variance(data, j);
            prec.ger(1.0 / t2, &z, &z, 1.0);
            lin.axpy((data.obs()[j].value - xb) / t2, &z, 1.0);
        }
        let fi = factors.f(i);
        let mut scalar = 1.0 / fi;
        let mut prior_lin = parent_mean(&state.w, graph, factors, i) / fi;
        for &(t, slot) in graph.children(i) {
            let bt = factors.b(t);
            let b_ti = bt[slot];
            let ft = factors.f(t);
            // partial residual of child t without site i
            let mut a = state.w.row(t).transpose();
            for (k, (&s, &b)) in graph.neighbors(t).iter().zip(bt).enumerate() {
                if k != slot {
                    a.axpy(-b, &state.w.row(s).transpose(), 1.0);
                }
            }
            scalar += b_ti * b_ti / ft;
            prior_lin.axpy(b_ti / ft, &a, 1.0);
        }
        prec += &v_inv * scalar;
        lin += &v_inv * prior_lin;
        let draw = draw_canonical(&prec, &lin, rng).ok_or_else(|| {
            Error::Numerical(format!("w precision at site {i} is not positive definite"))
        })?;
        state.w.set_row(i, &draw.transpose());
    }
    Ok(())
}

/// Inverse-gamma variate restricted to `(lo, hi)`; `hi` may be infinite.
pub fn sample_truncated_inv_gamma(
    p: ShapeRate,
    lo: f64,
    hi: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    if !(lo >= 0.0 && hi > lo) {
        return Err(Error::Numerical(format!(
            "empty truncation interval ({lo}, {hi})"
        )));
    }
    // 1/X ~ Gamma(shape, rate) on (1/hi, 1/lo)
    let g_lo = if hi.is_finite() { 1.0 / hi } else { 0.0 };
    let g_hi = if lo > 0.0 { 1.0 / lo } else { f64::INFINITY };
    let g = sample_truncated_gamma(p.shape, p.rate, g_lo, g_hi, rng)?;
    Ok(1.0 / g)
}

fn sample_truncated_gamma(
    shape: f64,
    rate: f64,
    lo: f64,
    hi: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    if lo == 0.0 && hi.is_infinite() {
        let d = GammaDist::new(shape, 1.0 / rate).map_err(|e| Error::Numerical(e.to_string()))?;
        return Ok(d.sample(rng));
    }
    let lower = |x: f64| {
        if x <= 0.0 {
            0.0
        } else if x.is_infinite() {
            1.0
        } else {
            gamma_lr(shape, rate * x)
        }
    };
    let upper = |x: f64| {
        if x <= 0.0 {
            1.0
        } else if x.is_infinite() {
            0.0
        } else {
            gamma_ur(shape, rate * x)
        }
    };
    let mode = ((shape - 1.0) / rate).max(0.0);
    // use whichever tail keeps precision
    let use_upper = lo > mode;
    let (f_lo, f_hi) = if use_upper {
        (upper(lo), upper(hi))
    } else {
        (lower(lo), lower(hi))
    };
    let mass = (f_hi - f_lo).abs();
    if mass > 1e-12 * f_lo.abs().max(f_hi.abs()) && mass > 1e-280 {
        let u: f64 = rng.random();
        let target = f_lo + u * (f_hi - f_lo);
        let cdf = |x: f64| if use_upper { upper(x) } else { lower(x) };
        let increasing = !use_upper;
        let (mut a, mut b) = (lo, hi);
        if b.is_infinite() {
            b = lo.max(mode).max(shape / rate) * 2.0 + 1.0;
            while (cdf(b) < target) == increasing && b < 1e300 {
                b *= 2.0;
            }
        }
        for _ in 0..200 {
            let mid = if a > 0.0 {
                (a * b).sqrt()
            } else {
                0.5 * (a + b)
            };
            if (cdf(mid) < target) == increasing {
                a = mid;
            } else {
                b = mid;
            }
            if b - a <= 1e-15 * b {
                break;
            }
        }
        return Ok(0.5 * (a + b));
    }
    tangent_rejection(shape, rate, lo, hi, rng)
}

// Rejection from an exponential envelope tangent to the log-concave density
// at the interval end nearest the mode.
fn tangent_rejection(shape: f64, rate: f64, lo: f64, hi: f64, rng: &mut impl Rng) -> Result<f64> {
    if shape < 1.0 {
        return Err(Error::Numerical(format!(
            "truncated gamma tail with shape {shape} < 1"
        )));
    }
    let log_f = |x: f64| (shape - 1.0) * x.ln() - rate * x;
    let mode = (shape - 1.0) / rate;
    let (anchor, slope) = if lo >= mode {
        (lo, rate - (shape - 1.0) / lo)
    } else if hi <= mode {
        (hi, (shape - 1.0) / hi - rate)
    } else {
        return Err(Error::Numerical(
            "truncated gamma interval contains the mode but has no mass".into(),
        ));
    };
    let exp = Exp::new(slope.max(1e-300)).map_err(|e| Error::Numerical(e.to_string()))?;
    for _ in 0..100_000 {
        let step = exp.sample(rng);
        let x = if lo >= mode {
            anchor + step
        } else {
            anchor - step
        };
        if x <= lo.max(0.0) && lo >= mode {
            continue;
        }
        if !(x > lo && x < hi) {
            continue;
        }
        let log_ratio = log_f(x) - log_f(anchor) + slope * step;
        if rng.random::<f64>().ln() < log_ratio {
            return Ok(x);
        }
    }
    Err(Error::Numerical(
        "truncated gamma rejection sampler did not accept".into(),
    ))
}

/// Per-class observation counts and residual sums of squares.
fn residual_summary(state: &ModelState, data: &Dataset) -> [(f64, f64); 3] {
    let mut out = [(0.0, 0.0); 3];
    for (j, o) in data.obs().iter().enumerate() {
        let r = o.value - state.site_mean(data, o.site);
        let k = match (o.rating, state.labels[j]) {
            (Rating::A, _) => 0,
            (Rating::NonA, Some(Label::B)) => 1,
            _ => 2,
        };
        out[k].0 += 1.0;
        out[k].1 += r * r;
    }
    out
}

/// Nugget variances from their inverse-gamma conditionals, truncated to the
/// ordering when the prior enforces it.
pub fn update_tau(
    state: &mut ModelState,
    data: &Dataset,
    priors: &PriorSpec,
    rng: &mut impl Rng,
) -> Result<()> {
    let s = residual_summary(state, data);
    let post =
        |p: ShapeRate, (n, ss): (f64, f64)| ShapeRate::new(p.shape + n / 2.0, p.rate + ss / 2.0);
    let (pa, pb, pc) = (
        post(priors.tau_a, s[0]),
        post(priors.tau_b, s[1]),
        post(priors.tau_c, s[2]),
    );
    let mut t = state.tau2;
    if priors.tau_ordered {
        t.a = sample_truncated_inv_gamma(pa, 0.0, t.b, rng)?;
        t.b = sample_truncated_inv_gamma(pb, t.a, t.c, rng)?;
        t.c = sample_truncated_inv_gamma(pc, t.b, f64::INFINITY, rng)?;
    } else {
        t.a = sample_truncated_inv_gamma(pa, 0.0, f64::INFINITY, rng)?;
        t.b = sample_truncated_inv_gamma(pb, 0.0, f64::INFINITY, rng)?;
        t.c = sample_truncated_inv_gamma(pc, 0.0, f64::INFINITY, rng)?;
    }
    state.tau2 = t;
    Ok(())
}

/// Probability that a non-A observation with residual `r` belongs to class B.
pub fn prob_b(r: f64, theta: f64, tau2: &Tau2) -> f64 {
    if theta <= 0.0 {
        return 0.0;
    }
    if theta >= 1.0 {
        return 1.0;
    }
    let lb = theta.ln() - 0.5 * (tau2.b.ln() + r * r / tau2.b);
    let lc = (1.0 - theta).ln() - 0.5 * (tau2.c.ln() + r * r / tau2.c);
    1.0 / (1.0 + (lc - lb).exp())
}

/// Relabels every non-A observation, then draws theta.
pub fn update_latent_ratings(
    state: &mut ModelState,
    data: &Dataset,
    priors: &PriorSpec,
    rng: &mut impl Rng,
) -> Result<()> {
    let (mut nb, mut nc) = (0.0, 0.0);
    for (j, o) in data.obs().iter().enumerate() {
        if o.rating == Rating::A {
            continue;
        }
        let r = o.value - state.site_mean(data, o.site);
        let p = prob_b(r, state.theta, &state.tau2);
        let label = if rng.random::<f64>() < p {
            Label::B
        } else {
            Label::C
        };
        match label {
            Label::B => nb += 1.0,
            Label::C => nc += 1.0,
        }
        state.labels[j] = Some(label);
    }
    let d = BetaDist::new(priors.theta_a + nb, priors.theta_b + nc)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    state.theta = d.sample(rng);
    Ok(())
}

/// Log likelihood of the non-A observations with their B/C labels summed out.
pub fn mixture_loglik(state: &ModelState, data: &Dataset, theta: f64) -> f64 {
    let t = state.tau2;
    let norm = |r: f64, v: f64| -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + r * r / v);
    data.obs()
        .iter()
        .filter(|o| o.rating == Rating::NonA)
        .map(|o| {
            let r = o.value - state.site_mean(data, o.site);
            let (lb, lc) = (theta.ln() + norm(r, t.b), (1.0 - theta).ln() + norm(r, t.c));
            let hi = lb.max(lc);
            hi + ((lb - hi).exp() + (lc - hi).exp()).ln()
        })
        .sum()
}

/// Random-walk MH on `logit(theta)` against the label-free likelihood. Run
/// it directly before [`update_latent_ratings`] so the labels are redrawn.
pub fn update_theta_collapsed(
    state: &mut ModelState,
    data: &Dataset,
    priors: &PriorSpec,
    step: f64,
    rng: &mut impl Rng,
) -> Result<MhOutcome> {
    let cur = state.theta;
    let prop = sigmoid(logit(cur) + step * rng.sample::<f64, _>(StandardNormal));
    if !(prop > 0.0 && prop < 1.0) {
        return Ok(MhOutcome::Rejected);
    }
    let target = |th: f64| {
        mixture_loglik(state, data, th)
            + priors.theta_a * th.ln()
            + priors.theta_b * (1.0 - th).ln()
    };
    let log_ratio = target(prop) - target(cur);
    if log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio {
        state.theta = prop;
        Ok(MhOutcome::Accepted)
    } else {
        Ok(MhOutcome::Rejected)
    }
}

/// Linear reparameterization moves on the process.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearMove {
    /// Scale column `j` of `w`.
    Scale(usize),
    /// Add a multiple of column `k` of `w` to column `j`.
    Shear(usize, usize),
}

/// Proposes `(w, V) -> (w A', A V A')` and accepts against the observation
/// likelihood and the `V` prior. `A` is diagonal for a scale move and a unit
/// shear otherwise; the NNGP density of `w` only changes through `det A`.
pub fn update_v_linear(
    state: &mut ModelState,
    data: &Dataset,
    priors: &PriorSpec,
    mv: LinearMove,
    step: f64,
    rng: &mut impl Rng,
) -> Result<MhOutcome> {
    let p = state.v.nrows();
    let e: f64 = step * rng.sample::<f64, _>(StandardNormal);
    let mut a = DMatrix::identity(p, p);
    let log_det = match mv {
        LinearMove::Scale(j) => {
            a[(j, j)] = e.exp();
            e
        }
        LinearMove::Shear(j, k) => {
            a[(j, k)] = e;
            0.0
        }
    };
    let v_new = &a * &state.v * a.transpose();
    let psi = DMatrix::identity(p, p) * priors.v_scale;
    let df = priors.iw_df(p);
    let lp_new = inv_wishart_ln_pdf(&v_new, &psi, df);
    if !lp_new.is_finite() {
        return Ok(MhOutcome::Rejected);
    }
    let mut next = state.clone();
    next.w = &state.w * a.transpose();
    next.v = v_new;
    let log_ratio = loglik_obs(&next, data) + lp_new + (p + 1) as f64 * log_det
        - loglik_obs(state, data)
        - inv_wishart_ln_pdf(&state.v, &psi, df);
    if log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio {
        state.w = next.w;
        state.v = next.v;
        Ok(MhOutcome::Accepted)
    } else {
        Ok(MhOutcome::Rejected)
    }
}

/// Inverse-Wishart variate `IW(scale, df)` by the Bartlett decomposition.
pub fn sample_inv_wishart(
    scale: &DMatrix<f64>,
    df: f64,
    rng: &mut impl Rng,
) -> Result<DMatrix<f64>> {
    let p = scale.nrows();
    if !(df > p as f64 - 1.0) {
        return Err(Error::Numerical(format!(
            "inverse-Wishart df {df} too small for dimension {p}"
        )));
    }
    let u = Cholesky::new(scale.clone())
        .ok_or_else(|| Error::Numerical("inverse-Wishart scale is not positive definite".into()))?
        .l();
    let mut a = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        let chi = GammaDist::new((df - i as f64) / 2.0, 2.0)
            .map_err(|e| Error::Numerical(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    // Wishart(df, scale^-1) = M A A' M' with M = U^-T; its inverse is (U A^-T)(U A^-T)'
    let a_inv = a
        .solve_lower_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::Numerical("singular Bartlett factor".into()))?;
    let t = u * a_inv.transpose();
    let v = &t * t.transpose();
    Ok((&v + v.transpose()) * 0.5)
}

/// Cross-covariance update from its inverse-Wishart conditional.
pub fn update_v(
    state: &mut ModelState,
    graph: &NeighborGraph,
    factors: &NngpFactors,
    priors: &PriorSpec,
    rng: &mut impl Rng,
) -> Result<()> {
    let p = state.w.ncols();
    let mut b = DMatrix::identity(p, p) * priors.v_scale;
    for i in 0..graph.len() {
        let r = state.w.row(i).transpose() - parent_mean(&state.w, graph, factors, i);
        b.ger(1.0 / factors.f(i), &r, &r, 1.0);
    }
    let df = priors.iw_df(p) + graph.len() as f64;
    state.v = sample_inv_wishart(&b, df, rng)?;
    Ok(())
}

/// Unconstrained coordinate of a kernel parameter.
fn to_free(p: CovParam, x: f64, priors: &PriorSpec) -> f64 {
    match p {
        CovParam::Alpha => logit(x / priors.alpha_max),
        CovParam::Nu => logit(x / priors.nu_max),
        _ => x.ln(),
    }
}

fn from_free(p: CovParam, y: f64, priors: &PriorSpec) -> f64 {
    match p {
        CovParam::Alpha => priors.alpha_max * sigmoid(y),
        CovParam::Nu => priors.nu_max * sigmoid(y),
        _ => y.exp(),
    }
}

/// `log |dx/dy|` up to a constant.
fn log_jacobian(p: CovParam, x: f64, priors: &PriorSpec) -> f64 {
    match p {
        CovParam::Alpha => {
            let s = x / priors.alpha_max;
            s.ln() + (1.0 - s).ln()
        }
        CovParam::Nu => {
            let s = x / priors.nu_max;
            s.ln() + (1.0 - s).ln()
        }
        _ => x.ln(),
    }
}

fn logit(s: f64) -> f64 {
    (s / (1.0 - s)).ln()
}

fn sigmoid(y: f64) -> f64 {
    1.0 / (1.0 + (-y).exp())
}

/// Cached kernel-dependent quantities of the current state.
#[derive(Debug, Clone)]
pub struct CovCache {
    pub factors: NngpFactors,
    pub log_density: f64,
}

impl CovCache {
    pub fn new(
        state: &ModelState,
        data: &Dataset,
        graph: &NeighborGraph,
        jitter: f64,
    ) -> Result<Self> {
        let factors = compute_factors(graph, data.sites(), &state.cov, jitter)?;
        let log_density = nngp_log_density(&state.w, &factors, graph, &state.v)?;
        Ok(Self {
            factors,
            log_density,
        })
    }

    /// Refreshes the density after `w` or `V` changed.
    pub fn refresh_density(&mut self, state: &ModelState, graph: &NeighborGraph) -> Result<()> {
        self.log_density = nngp_log_density(&state.w, &self.factors, graph, &state.v)?;
        Ok(())
    }
}

/// Outcome of one MH proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MhOutcome {
    Accepted,
    Rejected,
    /// Proposal produced a degenerate conditional variance.
    Degenerate,
}

/// One random-walk MH step for a single kernel parameter, on the log or
/// logit scale. `cache` must match `state` on entry and is kept in sync.
#[allow(clippy::too_many_arguments)]
pub fn update_cov_param(
    state: &mut ModelState,
    data: &Dataset,
    graph: &NeighborGraph,
    priors: &PriorSpec,
    param: CovParam,
    step: f64,
    jitter: f64,
    cache: &mut CovCache,
    rng: &mut impl Rng,
) -> Result<MhOutcome> {
    let family = state.cov.family();
    let radius = state.cov.sphere().radius();
    let cur = state.cov.get(param);
    let y = to_free(param, cur, priors);
    let y_new = y + step * rng.sample::<f64, _>(StandardNormal);
    let prop = from_free(param, y_new, priors);
    let lp_new = log_prior_cov_param(param, prop, family, radius, priors);
    let Ok(spec) = state.cov.with(param, prop) else {
        return Ok(MhOutcome::Rejected);
    };
    if !lp_new.is_finite() {
        return Ok(MhOutcome::Rejected);
    }
    let factors = match compute_factors(graph, data.sites(), &spec, jitter) {
        Ok(f) => f,
        Err(Error::Degenerate { .. }) => return Ok(MhOutcome::Degenerate),
        Err(e) => return Err(e),
    };
    let ld_new = nngp_log_density(&state.w, &factors, graph, &state.v)?;
    let lp_cur = log_prior_cov_param(param, cur, family, radius, priors);
    let log_ratio = (ld_new + lp_new + log_jacobian(param, prop, priors))
        - (cache.log_density + lp_cur + log_jacobian(param, cur, priors));
    if log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio {
        state.cov = spec;
        cache.factors = factors;
        cache.log_density = ld_new;
        Ok(MhOutcome::Accepted)
    } else {
        Ok(MhOutcome::Rejected)
    }
}

/// Innovations `(w_i - B_i w_N(i)) / sqrt(F_i)`, one row per site.
pub fn whiten(w: &DMatrix<f64>, graph: &NeighborGraph, factors: &NngpFactors) -> DMatrix<f64> {
    let mut u = w.clone();
    for i in 0..graph.len() {
        let r = (w.row(i).transpose() - parent_mean(w, graph, factors, i)) / factors.f(i).sqrt();
        u.set_row(i, &r.transpose());
    }
    u
}

/// Inverse of [`whiten`], filled in graph order.
pub fn color(u: &DMatrix<f64>, graph: &NeighborGraph, factors: &NngpFactors) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(u.nrows(), u.ncols());
    for &i in graph.order() {
        let row = parent_mean(&w, graph, factors, i) + u.row(i).transpose() * factors.f(i).sqrt();
        w.set_row(i, &row.transpose());
    }
    w
}

/// Random-walk MH step for one kernel parameter with the whitened process
/// held fixed, so `w` moves with the kernel. The target is the observation
/// likelihood times the parameter prior.
#[allow(clippy::too_many_arguments)]
pub fn update_cov_param_whitened(
    state: &mut ModelState,
    data: &Dataset,
    graph: &NeighborGraph,
    priors: &PriorSpec,
    param: CovParam,
    step: f64,
    jitter: f64,
    cache: &mut CovCache,
    rng: &mut impl Rng,
) -> Result<MhOutcome> {
    let dy = step * rng.sample::<f64, _>(StandardNormal);
    update_cov_whitened_joint(
        state,
        data,
        graph,
        priors,
        &[param],
        &[dy],
        jitter,
        cache,
        rng,
    )
}

/// Whitened MH step moving several kernel parameters at once by `dy` on
/// their free scales.
#[allow(clippy::too_many_arguments)]
pub fn update_cov_whitened_joint(
    state: &mut ModelState,
    data: &Dataset,
    graph: &NeighborGraph,
    priors: &PriorSpec,
    params: &[CovParam],
    dy: &[f64],
    jitter: f64,
    cache: &mut CovCache,
    rng: &mut impl Rng,
) -> Result<MhOutcome> {
    let family = state.cov.family();
    let radius = state.cov.sphere().radius();
    let mut spec = state.cov;
    let mut log_q = 0.0;
    for (&param, &d) in params.iter().zip(dy) {
        let cur = state.cov.get(param);
        let prop = from_free(param, to_free(param, cur, priors) + d, priors);
        let lp_new = log_prior_cov_param(param, prop, family, radius, priors);
        if !lp_new.is_finite() {
            return Ok(MhOutcome::Rejected);
        }
        let Ok(next) = spec.with(param, prop) else {
            return Ok(MhOutcome::Rejected);
        };
        spec = next;
        log_q += lp_new + log_jacobian(param, prop, priors)
            - log_prior_cov_param(param, cur, family, radius, priors)
            - log_jacobian(param, cur, priors);
    }
    let factors = match compute_factors(graph, data.sites(), &spec, jitter) {
        Ok(f) => f,
        Err(Error::Degenerate { .. }) => return Ok(MhOutcome::Degenerate),
        Err(e) => return Err(e),
    };
    let u = whiten(&state.w, graph, &cache.factors);
    let mut next = state.clone();
    next.w = color(&u, graph, &factors);
    let log_ratio = loglik_obs(&next, data) - loglik_obs(state, data) + log_q;
    if log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio {
        state.cov = spec;
        state.w = next.w;
        cache.log_density = nngp_log_density(&state.w, &factors, graph, &state.v)?;
        cache.factors = factors;
        Ok(MhOutcome::Accepted)
    } else {
        Ok(MhOutcome::Rejected)
    }
}

/// Running mean and covariance of the free-scale kernel parameters, used to
/// shape the joint proposal during burn-in.
#[derive(Debug, Clone)]
struct JointProposal {
    n: f64,
    mean: DVector<f64>,
    scatter: DMatrix<f64>,
    factor: Option<DMatrix<f64>>,
    /// Multiplier on the empirical standard deviations.
    step: f64,
}

impl JointProposal {
    fn new(d: usize) -> Self {
        Self {
            n: 0.0,
            mean: DVector::zeros(d),
            scatter: DMatrix::zeros(d, d),
            factor: None,
            step: 2.38 / (d as f64).sqrt(),
        }
    }

    fn observe(&mut self, y: &DVector<f64>) {
        self.n += 1.0;
        let delta = y - &self.mean;
        self.mean += &delta / self.n;
        self.scatter.ger(1.0, &delta, &(y - &self.mean), 1.0);
    }

    /// Refreshes the proposal factor from the samples seen so far.
    fn refresh(&mut self) {
        let d = self.mean.len();
        if self.n < 10.0 * d as f64 {
            return;
        }
        let cov = &self.scatter / (self.n - 1.0) + DMatrix::identity(d, d) * 1e-8;
        if let Some(c) = Cholesky::new(cov) {
            self.factor = Some(c.l());
        }
    }
}

/// Per-parameter MH bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MhStats {
    pub proposed: usize,
    pub accepted: usize,
    pub degenerate: usize,
    /// Proposals after burn-in only.
    pub proposed_post: usize,
    pub accepted_post: usize,
    pub final_step: f64,
}

impl MhStats {
    /// Post-burn-in acceptance rate, or the overall rate if nothing was recorded after burn-in.
    pub fn rate(&self) -> f64 {
        if self.proposed_post > 0 {
            self.accepted_post as f64 / self.proposed_post as f64
        } else if self.proposed > 0 {
            self.accepted as f64 / self.proposed as f64
        } else {
            0.0
        }
    }
}

/// Recorded posterior draws plus sampler diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    pub draws: Vec<ModelState>,
    /// Iteration index (1-based) of each recorded draw.
    pub iterations: Vec<usize>,
    pub acceptance: BTreeMap<String, MhStats>,
    pub config: SamplerConfig,
    pub free_params: Vec<CovParam>,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    /// Scalar parameters tracked for diagnostics, in a fixed order.
    pub fn monitored(&self) -> Vec<(String, Vec<f64>)> {
        let Some(first) = self.draws.first() else {
            return Vec::new();
        };
        let names = monitored_names(first, &self.free_params);
        let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(self.draws.len()); names.len()];
        for d in &self.draws {
            for (c, v) in cols.iter_mut().zip(monitored_values(d, &self.free_params)) {
                c.push(v);
            }
        }
        names.into_iter().zip(cols).collect()
    }
}

/// Names of monitored scalars: beta, tau2, theta, upper triangle of V, free kernel parameters.
pub fn monitored_names(state: &ModelState, free: &[CovParam]) -> Vec<String> {
    let mut n: Vec<String> = (1..=state.beta.len()).map(|k| format!("beta{k}")).collect();
    n.extend(["tau2_A", "tau2_B", "tau2_C", "theta"].map(String::from));
    let p = state.v.nrows();
    for i in 0..p {
        for j in i..p {
            n.push(format!("V{}{}", i + 1, j + 1));
        }
    }
    n.extend(free.iter().map(|p| p.name().to_string()));
    n
}

pub fn monitored_values(state: &ModelState, free: &[CovParam]) -> Vec<f64> {
    let mut v: Vec<f64> = state.beta.iter().copied().collect();
    v.extend([state.tau2.a, state.tau2.b, state.tau2.c, state.theta]);
    let p = state.v.nrows();
    for i in 0..p {
        for j in i..p {
            v.push(state.v[(i, j)]);
        }
    }
    v.extend(free.iter().map(|&p| state.cov.get(p)));
    v
}

/// Runs the sampler from the default initial state.
pub fn run_chain(
    data: &Dataset,
    priors: &PriorSpec,
    cov: CovarianceSpec,
    nngp: &NngpConfig,
    config: &SamplerConfig,
) -> Result<Chain> {
    let mut rng = rng_from_seed(config.seed);
    let init = ModelState::initial(data, priors, cov, &mut rng)?;
    run_chain_from(init, data, priors, nngp, config, &mut rng)
}

/// Runs the sampler from a given state with a caller-supplied generator.
pub fn run_chain_from(
    mut state: ModelState,
    data: &Dataset,
    priors: &PriorSpec,
    nngp: &NngpConfig,
    config: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Chain> {
    config.validate()?;
    priors.validate()?;
    if data.obs().is_empty() {
        return Err(Error::Data("dataset has no observations".into()));
    }
    state.check(data)?;
    let family = state.cov.family();
    let free: Vec<CovParam> = match &config.free_params {
        Some(list) => {
            for p in list {
                if !family.active_params().contains(p) {
                    return Err(Error::param(
                        "sampler.free_params",
                        format!("{} is not a parameter of {family:?}", p.name()),
                    ));
                }
            }
            list.clone()
        }
        None => family.active_params().to_vec(),
    };
    if config.blocks.cov || config.blocks.whitened {
        for &p in &free {
            let y = to_free(p, state.cov.get(p), priors);
            if !y.is_finite() {
                return Err(Error::param(
                    "sampler.free_params",
                    format!(
                        "{} = {} sits on the boundary of its prior support",
                        p.name(),
                        state.cov.get(p)
                    ),
                ));
            }
        }
    }
    let graph = nngp.build(data.sites())?;
    let shared = shared_columns(data);
    let mut cache = CovCache::new(&state, data, &graph, nngp.jitter)?;
    let mut steps = config.mh_step;
    let mut stats: BTreeMap<CovParam, MhStats> =
        free.iter().map(|&p| (p, MhStats::default())).collect();
    let mut wsteps = config.mh_step;
    let mut wstats = stats.clone();
    let record = |s: &mut MhStats, step: &mut f64, outcome: MhOutcome, it: usize| {
        let acc = outcome == MhOutcome::Accepted;
        s.proposed += 1;
        s.accepted += acc as usize;
        s.degenerate += (outcome == MhOutcome::Degenerate) as usize;
        if it > config.burnin {
            s.proposed_post += 1;
            s.accepted_post += acc as usize;
        } else if config.adapt {
            let gain = (it as f64).powf(-0.6);
            *step = (step.ln() + gain * (acc as u8 as f64 - TARGET_ACCEPT))
                .exp()
                .clamp(1e-4, 10.0);
        }
    };
    let pz = data.pz();
    let linear_moves: Vec<LinearMove> = (0..pz)
        .map(LinearMove::Scale)
        .chain((0..pz).flat_map(|j| {
            (0..pz)
                .filter(move |&k| k != j)
                .map(move |k| LinearMove::Shear(j, k))
        }))
        .collect();
    let mut extra_steps = [0.1, 0.1, 1.0];
    let mut joint = JointProposal::new(free.len());
    let mut joint_stats = MhStats::default();
    let mut extra_stats: [MhStats; 3] = Default::default();
    let mut draws = Vec::with_capacity(config.recorded_draws());
    let mut iterations = Vec::with_capacity(config.recorded_draws());

    for it in 1..=config.iterations {
        let wrap = |e: Error| match e {
            Error::Numerical(msg) => Error::Numerical(format!("iteration {it}: {msg}")),
            other => other,
        };
        let b = config.blocks;
        if b.w {
            update_w(&mut state, data, &graph, &cache.factors, rng).map_err(wrap)?;
        }
        if b.beta {
            update_beta(&mut state, data, priors, rng).map_err(wrap)?;
        }
        if b.shift && b.beta && b.w {
            update_shared_shift(&mut state, &graph, &cache.factors, priors, &shared, rng)
                .map_err(wrap)?;
        }
        if b.tau {
            update_tau(&mut state, data, priors, rng).map_err(wrap)?;
        }
        if b.labels {
            if b.theta_collapsed {
                let outcome = update_theta_collapsed(&mut state, data, priors, extra_steps[2], rng)
                    .map_err(wrap)?;
                record(&mut extra_stats[2], &mut extra_steps[2], outcome, it);
            }
            update_latent_ratings(&mut state, data, priors, rng).map_err(wrap)?;
        }
        if b.v {
            update_v(&mut state, &graph, &cache.factors, priors, rng).map_err(wrap)?;
        }
        if b.v_linear && b.v && b.w {
            for &mv in &linear_moves {
                let k = matches!(mv, LinearMove::Shear(..)) as usize;
                let outcome = update_v_linear(&mut state, data, priors, mv, extra_steps[k], rng)
                    .map_err(wrap)?;
                record(&mut extra_stats[k], &mut extra_steps[k], outcome, it);
            }
        }
        if b.cov {
            if b.w || b.v || b.shift || b.v_linear {
                cache.refresh_density(&state, &graph)?;
            }
            for &p in &free {
                let outcome = update_cov_param(
                    &mut state,
                    data,
                    &graph,
                    priors,
                    p,
                    steps.get(p),
                    nngp.jitter,
                    &mut cache,
                    rng,
                )
                .map_err(wrap)?;
                let mut step = steps.get(p);
                record(
                    stats.get_mut(&p).expect("tracked parameter"),
                    &mut step,
                    outcome,
                    it,
                );
                steps.set(p, step);
            }
        }
        if b.whitened && b.w {
            for &p in &free {
                let outcome = update_cov_param_whitened(
                    &mut state,
                    data,
                    &graph,
                    priors,
                    p,
                    wsteps.get(p),
                    nngp.jitter,
                    &mut cache,
                    rng,
                )
                .map_err(wrap)?;
                let mut step = wsteps.get(p);
                record(
                    wstats.get_mut(&p).expect("tracked parameter"),
                    &mut step,
                    outcome,
                    it,
                );
                wsteps.set(p, step);
            }
            if free.len() > 1 {
                let y = DVector::from_iterator(
                    free.len(),
                    free.iter().map(|&p| to_free(p, state.cov.get(p), priors)),
                );
                if it <= config.burnin && it > config.burnin / 4 {
                    joint.observe(&y);
                    if it % 50 == 0 {
                        joint.refresh();
                    }
                }
                if let Some(l) = joint.factor.clone() {
                    let e =
                        DVector::from_fn(free.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
                    let dy = l * e * joint.step;
                    let outcome = update_cov_whitened_joint(
                        &mut state,
                        data,
                        &graph,
                        priors,
                        &free,
                        dy.as_slice(),
                        nngp.jitter,
                        &mut cache,
                        rng,
                    )
                    .map_err(wrap)?;
                    record(&mut joint_stats, &mut joint.step, outcome, it);
                }
            }
        }
        if it > config.burnin && (it - config.burnin).is_multiple_of(config.thin) {
            draws.push(state.clone());
            iterations.push(it);
        }
    }
    let mut acceptance: BTreeMap<String, MhStats> = BTreeMap::new();
    for (p, mut s) in stats {
        s.final_step = steps.get(p);
        acceptance.insert(p.name().to_string(), s);
    }
    let bl = config.blocks;
    let linear_on = bl.v_linear && bl.v && bl.w;
    let extra = [
        ("V_scale", linear_on),
        ("V_shear", linear_on && pz > 1),
        ("theta_collapsed", bl.labels && bl.theta_collapsed),
    ];
    for (((name, on), mut s), step) in extra.into_iter().zip(extra_stats).zip(extra_steps) {
        if on {
            s.final_step = step;
            acceptance.insert(name.to_string(), s);
        }
    }
    if joint_stats.proposed > 0 {
        joint_stats.final_step = joint.step;
        acceptance.insert("kernel_joint".to_string(), joint_stats);
    }
    if bl.whitened && bl.w {
        for (p, mut s) in wstats {
            s.final_step = wsteps.get(p);
            acceptance.insert(format!("{}_whitened", p.name()), s);
        }
    }
    Ok(Chain {
        draws,
        iterations,
        acceptance,
        config: config.clone(),
        free_params: free,
    })
}
