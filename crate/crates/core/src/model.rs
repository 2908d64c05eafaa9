//! Hierarchical model: data layout, parameter state, priors, likelihood and
//! a synthetic-data generator.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, Continuous, Gamma, InverseGamma};
use statrs::function::gamma::ln_gamma;

use crate::covariance::{CovParam, CovarianceSpec, KernelFamily};
use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::nngp::{
    build_neighbor_graph, compute_factors, order_reference_set, NeighborMetric, OrderingStrategy,
    DEFAULT_JITTER,
};

/// Fixed-effect dimension of the standard design.
pub const P_X: usize = 7;
/// Spatially varying coefficient dimension of the standard design.
pub const P_Z: usize = 4;

/// Seeded generator used throughout.
pub type ModelRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> ModelRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rating {
    A,
    NonA,
}

/// Latent reliability class of a non-A observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    B,
    C,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub site: usize,
    /// Value on the transformed scale.
    pub value: f64,
    pub rating: Rating,
}

/// Raw per-site covariates: elevation (km), distance to coast (km), temperature (K).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteCovariates {
    pub el: f64,
    pub dc: f64,
    pub temp: f64,
}

/// Training means and standard deviations of the three base covariates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; 3],
    pub sd: [f64; 3],
}

impl Standardizer {
    pub fn fit(covs: &[SiteCovariates]) -> Result<Self> {
        if covs.len() < 2 {
            return Err(Error::Data(
                "need at least two sites to standardize covariates".into(),
            ));
        }
        let cols = |c: &SiteCovariates| [c.el, c.dc, c.temp];
        let n = covs.len() as f64;
        let mut mean = [0.0; 3];
        for c in covs {
            for (m, v) in mean.iter_mut().zip(cols(c)) {
                *m += v / n;
            }
        }
        let mut sd = [0.0; 3];
        for c in covs {
            for k in 0..3 {
                sd[k] += (cols(c)[k] - mean[k]).powi(2) / (n - 1.0);
            }
        }
        for (k, name) in ["elevation", "distance to coast", "temperature"]
            .iter()
            .enumerate()
        {
            sd[k] = sd[k].sqrt();
            if !(sd[k] > 0.0) {
                return Err(Error::Data(format!("{name} covariate is constant")));
            }
        }
        Ok(Self { mean, sd })
    }

    pub fn apply(&self, c: &SiteCovariates) -> [f64; 3] {
        [
            (c.el - self.mean[0]) / self.sd[0],
            (c.dc - self.mean[1]) / self.sd[1],
            (c.temp - self.mean[2]) / self.sd[2],
        ]
    }

    /// Fixed-effect row `(el, dc, temp, el*dc, el*temp, dc*temp, el*dc*temp)`.
    pub fn x_row(&self, c: &SiteCovariates) -> [f64; P_X] {
        let [e, d, t] = self.apply(c);
        [e, d, t, e * d, e * t, d * t, e * d * t]
    }

    /// Varying-coefficient row `(1, el, dc, temp)`.
    pub fn z_row(&self, c: &SiteCovariates) -> [f64; P_Z] {
        let [e, d, t] = self.apply(c);
        [1.0, e, d, t]
    }

    pub fn design(&self, covs: &[SiteCovariates]) -> (DMatrix<f64>, DMatrix<f64>) {
        let x = DMatrix::from_fn(covs.len(), P_X, |i, j| self.x_row(&covs[i])[j]);
        let z = DMatrix::from_fn(covs.len(), P_Z, |i, j| self.z_row(&covs[i])[j]);
        (x, z)
    }
}

/// Unique sites with per-site design rows and the observations made there.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sites: Vec<GeoPoint>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    obs: Vec<Observation>,
    site_obs: Vec<Vec<usize>>,
}

impl Dataset {
    /// `x` and `z` hold one row per site.
    pub fn new(
        sites: Vec<GeoPoint>,
        x: DMatrix<f64>,
        z: DMatrix<f64>,
        obs: Vec<Observation>,
    ) -> Result<Self> {
        if x.nrows() != sites.len() {
            return Err(Error::Dimension {
                expected: sites.len(),
                found: x.nrows(),
            });
        }
        if z.nrows() != sites.len() {
            return Err(Error::Dimension {
                expected: sites.len(),
                found: z.nrows(),
            });
        }
        let mut site_obs = vec![Vec::new(); sites.len()];
        for (j, o) in obs.iter().enumerate() {
            if o.site >= sites.len() {
                return Err(Error::Data(format!(
                    "observation {j} references site {} of {}",
                    o.site,
                    sites.len()
                )));
            }
            if !o.value.is_finite() {
                return Err(Error::Data(format!("observation {j} has non-finite value")));
            }
            site_obs[o.site].push(j);
        }
        Ok(Self {
            sites,
            x,
            z,
            obs,
            site_obs,
        })
    }

    /// Standard 7/4 design from raw covariates; returns the fitted standardizer.
    pub fn from_covariates(
        sites: Vec<GeoPoint>,
        covs: &[SiteCovariates],
        obs: Vec<Observation>,
    ) -> Result<(Self, Standardizer)> {
        if covs.len() != sites.len() {
            return Err(Error::Dimension {
                expected: sites.len(),
                found: covs.len(),
            });
        }
        let std = Standardizer::fit(covs)?;
        let (x, z) = std.design(covs);
        Ok((Self::new(sites, x, z, obs)?, std))
    }

    pub fn sites(&self) -> &[GeoPoint] {
        &self.sites
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn px(&self) -> usize {
        self.x.ncols()
    }

    pub fn pz(&self) -> usize {
        self.z.ncols()
    }

    pub fn obs(&self) -> &[Observation] {
        &self.obs
    }

    /// Observation indices at a site.
    pub fn site_obs(&self, site: usize) -> &[usize] {
        &self.site_obs[site]
    }

    /// Copy with observation values replaced (same order).
    pub fn with_values(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.obs.len() {
            return Err(Error::Dimension {
                expected: self.obs.len(),
                found: values.len(),
            });
        }
        let mut d = self.clone();
        for (o, &v) in d.obs.iter_mut().zip(values) {
            o.value = v;
        }
        Ok(d)
    }
}

/// Rating-specific nugget variances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tau2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Tau2 {
    pub fn new(a: f64, b: f64, c: f64) -> Result<Self> {
        let t = Self { a, b, c };
        if !(a > 0.0 && b > 0.0 && c > 0.0 && c.is_finite()) {
            return Err(Error::param(
                "tau2",
                format!("({a}, {b}, {c}) must be positive"),
            ));
        }
        if !t.is_ordered() {
            return Err(Error::param(
                "tau2",
                format!("({a}, {b}, {c}) violates A < B < C"),
            ));
        }
        Ok(t)
    }

    pub fn is_ordered(&self) -> bool {
        self.a < self.b && self.b < self.c
    }

    pub fn for_label(&self, rating: Rating, label: Option<Label>) -> f64 {
        match (rating, label) {
            (Rating::A, _) => self.a,
            (Rating::NonA, Some(Label::B)) => self.b,
            (Rating::NonA, Some(Label::C)) | (Rating::NonA, None) => self.c,
        }
    }
}

/// One configuration of every model unknown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub beta: DVector<f64>,
    /// One row per site, one column per varying coefficient.
    pub w: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub tau2: Tau2,
    pub theta: f64,
    /// Latent label per observation; `None` for A-rated observations.
    pub labels: Vec<Option<Label>>,
    /// Kernel with unit variance.
    pub cov: CovarianceSpec,
}

impl ModelState {
    /// Starting state: zero effects, identity `V`, prior-mean nuggets, random labels.
    pub fn initial(
        data: &Dataset,
        priors: &PriorSpec,
        cov: CovarianceSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let cov = cov.with_sigma2(1.0)?;
        let ig_mean = |p: ShapeRate| {
            if p.shape > 1.0 {
                p.rate / (p.shape - 1.0)
            } else {
                p.rate / p.shape
            }
        };
        let (mut a, mut b, mut c) = (
            ig_mean(priors.tau_a),
            ig_mean(priors.tau_b),
            ig_mean(priors.tau_c),
        );
        if !(a < b && b < c) {
            let mut v = [a, b, c];
            v.sort_by(f64::total_cmp);
            (a, b, c) = (v[0], v[1] * (1.0 + 1e-6), v[2] * (1.0 + 2e-6));
        }
        let labels = data
            .obs()
            .iter()
            .map(|o| match o.rating {
                Rating::A => None,
                Rating::NonA => Some(if rng.random::<bool>() {
                    Label::B
                } else {
                    Label::C
                }),
            })
            .collect();
        Ok(Self {
            beta: DVector::zeros(data.px()),
            w: DMatrix::zeros(data.n_sites(), data.pz()),
            v: DMatrix::identity(data.pz(), data.pz()),
            tau2: Tau2::new(a, b, c)?,
            theta: 0.5,
            labels,
            cov,
        })
    }

    pub fn obs_variance(&self, data: &Dataset, j: usize) -> f64 {
        self.tau2.for_label(data.obs()[j].rating, self.labels[j])
    }

    /// `x_i' beta + z_i' w_i` at a site.
    pub fn site_mean(&self, data: &Dataset, site: usize) -> f64 {
        data.x().row(site).dot(&self.beta.transpose()) + data.z().row(site).dot(&self.w.row(site))
    }

    pub fn check(&self, data: &Dataset) -> Result<()> {
        if self.beta.len() != data.px() {
            return Err(Error::Dimension {
                expected: data.px(),
                found: self.beta.len(),
            });
        }
        if self.w.nrows() != data.n_sites() || self.w.ncols() != data.pz() {
            return Err(Error::Dimension {
                expected: data.n_sites() * data.pz(),
                found: self.w.nrows() * self.w.ncols(),
            });
        }
        if self.labels.len() != data.obs().len() {
            return Err(Error::Dimension {
                expected: data.obs().len(),
                found: self.labels.len(),
            });
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::param(
                "theta",
                format!("{} outside [0, 1]", self.theta),
            ));
        }
        crate::covariance::check_spd(&self.v, "V")
    }
}

/// Shape-rate pair for Gamma and inverse-Gamma priors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeRate {
    pub shape: f64,
    pub rate: f64,
}

impl ShapeRate {
    pub const fn new(shape: f64, rate: f64) -> Self {
        Self { shape, rate }
    }

    fn validate(&self, name: &'static str) -> Result<()> {
        if self.shape > 0.0 && self.rate > 0.0 && self.shape.is_finite() && self.rate.is_finite() {
            Ok(())
        } else {
            Err(Error::param(
                name,
                format!(
                    "shape {} and rate {} must be positive",
                    self.shape, self.rate
                ),
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSpec {
    pub tau_a: ShapeRate,
    pub tau_b: ShapeRate,
    pub tau_c: ShapeRate,
    /// Beta(a, b) on the B-class probability.
    pub theta_a: f64,
    pub theta_b: f64,
    /// `beta ~ N(beta_mean * 1, beta_var * I)`.
    pub beta_mean: f64,
    pub beta_var: f64,
    pub rho1: ShapeRate,
    pub rho2: ShapeRate,
    pub delta: ShapeRate,
    pub alpha_max: f64,
    pub nu_max: f64,
    /// Inverse-Wishart scale `v_scale * I`.
    pub v_scale: f64,
    /// Inverse-Wishart degrees of freedom; `None` means dimension + 1.
    pub v_df: Option<f64>,
    /// Enforce `tau2.a < tau2.b < tau2.c`.
    pub tau_ordered: bool,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            tau_a: ShapeRate::new(20.0, 6.0),
            tau_b: ShapeRate::new(20.0, 8.0),
            tau_c: ShapeRate::new(20.0, 10.0),
            theta_a: 1.0,
            theta_b: 1.0,
            beta_mean: 0.0,
            beta_var: 1.0,
            rho1: ShapeRate::new(2.0, 20.0),
            rho2: ShapeRate::new(1.0, 10.0),
            delta: ShapeRate::new(1.0, 1.0),
            alpha_max: 2.0,
            nu_max: 1.0,
            v_scale: 1.0,
            v_df: None,
            tau_ordered: true,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        self.tau_a.validate("priors.tau_a")?;
        self.tau_b.validate("priors.tau_b")?;
        self.tau_c.validate("priors.tau_c")?;
        self.rho1.validate("priors.rho1")?;
        self.rho2.validate("priors.rho2")?;
        self.delta.validate("priors.delta")?;
        let pos = |name, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::param(name, format!("{v} must be positive")))
            }
        };
        pos("priors.theta_a", self.theta_a)?;
        pos("priors.theta_b", self.theta_b)?;
        pos("priors.beta_var", self.beta_var)?;
        pos("priors.v_scale", self.v_scale)?;
        if !(self.alpha_max > 0.0 && self.alpha_max <= 2.0) {
            return Err(Error::param("priors.alpha_max", "must lie in (0, 2]"));
        }
        if !(self.nu_max > 0.0 && self.nu_max <= 1.0) {
            return Err(Error::param("priors.nu_max", "must lie in (0, 1]"));
        }
        if !self.beta_mean.is_finite() {
            return Err(Error::param("priors.beta_mean", "must be finite"));
        }
        if let Some(df) = self.v_df {
            pos("priors.v_df", df)?;
        }
        Ok(())
    }

    pub fn iw_df(&self, p: usize) -> f64 {
        self.v_df.unwrap_or(p as f64 + 1.0)
    }

    /// Gamma prior on `rho1` in the kernel's own units. The Euclidean family
    /// measures range in kilometers, so the rate is divided by the radius.
    pub fn rho1_prior(&self, family: KernelFamily, radius_km: f64) -> ShapeRate {
        match family {
            KernelFamily::GneitingEuclidean => {
                ShapeRate::new(self.rho1.shape, self.rho1.rate / radius_km)
            }
            _ => self.rho1,
        }
    }
}

fn gamma_ln_pdf(p: ShapeRate, x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    Gamma::new(p.shape, p.rate)
        .map(|d| d.ln_pdf(x))
        .unwrap_or(f64::NEG_INFINITY)
}

fn inv_gamma_ln_pdf(p: ShapeRate, x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    InverseGamma::new(p.shape, p.rate)
        .map(|d| d.ln_pdf(x))
        .unwrap_or(f64::NEG_INFINITY)
}

/// Log prior of one covariance parameter value, `-inf` outside its support.
pub fn log_prior_cov_param(
    param: CovParam,
    value: f64,
    family: KernelFamily,
    radius_km: f64,
    priors: &PriorSpec,
) -> f64 {
    match param {
        CovParam::Rho1 => gamma_ln_pdf(priors.rho1_prior(family, radius_km), value),
        CovParam::Rho2 => gamma_ln_pdf(priors.rho2, value),
        CovParam::Delta => gamma_ln_pdf(priors.delta, value),
        CovParam::Alpha => {
            if value > 0.0 && value <= priors.alpha_max {
                -priors.alpha_max.ln()
            } else {
                f64::NEG_INFINITY
            }
        }
        CovParam::Nu => {
            if (0.0..=priors.nu_max).contains(&value) {
                -priors.nu_max.ln()
            } else {
                f64::NEG_INFINITY
            }
        }
    }
}

/// Log density of the inverse-Wishart `IW(psi, df)` at `v`.
pub fn inv_wishart_ln_pdf(v: &DMatrix<f64>, psi: &DMatrix<f64>, df: f64) -> f64 {
    let p = v.nrows();
    let pf = p as f64;
    let Some(cv) = Cholesky::new(v.clone()) else {
        return f64::NEG_INFINITY;
    };
    let Some(cp) = Cholesky::new(psi.clone()) else {
        return f64::NEG_INFINITY;
    };
    let ld = |c: &Cholesky<f64, nalgebra::Dyn>| {
        2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    };
    let trace = cv.solve(psi).trace();
    let log_mvgamma = pf * (pf - 1.0) / 4.0 * PI.ln()
        + (0..p)
            .map(|j| ln_gamma(df / 2.0 - j as f64 / 2.0))
            .sum::<f64>();
    0.5 * df * ld(&cp)
        - 0.5 * df * pf * 2f64.ln()
        - log_mvgamma
        - 0.5 * (df + pf + 1.0) * ld(&cv)
        - 0.5 * trace
}

/// Sum of the observation log densities.
pub fn loglik_obs(state: &ModelState, data: &Dataset) -> f64 {
    data.obs()
        .iter()
        .enumerate()
        .map(|(j, o)| {
            let t2 = state.obs_variance(data, j);
            let r = o.value - state.site_mean(data, o.site);
            -0.5 * ((2.0 * PI * t2).ln() + r * r / t2)
        })
        .sum()
}

/// Sum of all prior log densities; `-inf` outside the support.
pub fn log_prior(state: &ModelState, priors: &PriorSpec) -> f64 {
    let t = state.tau2;
    if priors.tau_ordered && !t.is_ordered() {
        return f64::NEG_INFINITY;
    }
    let mut lp = inv_gamma_ln_pdf(priors.tau_a, t.a)
        + inv_gamma_ln_pdf(priors.tau_b, t.b)
        + inv_gamma_ln_pdf(priors.tau_c, t.c);
    if !(0.0..=1.0).contains(&state.theta) {
        return f64::NEG_INFINITY;
    }
    if !(priors.theta_a == 1.0 && priors.theta_b == 1.0) {
        lp += Beta::new(priors.theta_a, priors.theta_b)
            .map(|d| d.ln_pdf(state.theta))
            .unwrap_or(f64::NEG_INFINITY);
    }
    let k = state.beta.len() as f64;
    let ss: f64 = state
        .beta
        .iter()
        .map(|b| (b - priors.beta_mean).powi(2))
        .sum();
    lp += -0.5 * (k * (2.0 * PI * priors.beta_var).ln() + ss / priors.beta_var);
    let p = state.v.nrows();
    lp += inv_wishart_ln_pdf(
        &state.v,
        &(DMatrix::identity(p, p) * priors.v_scale),
        priors.iw_df(p),
    );
    let family = state.cov.family();
    for &param in family.active_params() {
        lp += log_prior_cov_param(
            param,
            state.cov.get(param),
            family,
            state.cov.sphere().radius(),
            priors,
        );
    }
    lp
}

/// Synthetic-data settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingMix {
    /// Probability that an observation is A-rated.
    pub prob_a: f64,
    pub obs_per_site: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub data: Dataset,
    /// Process values used (drawn or supplied).
    pub w: DMatrix<f64>,
    /// True class of every observation.
    pub labels: Vec<Option<Label>>,
}

/// Draws `w` from the NNGP prior with cross-covariance `v * cov`.
pub fn sample_nngp_prior(
    sites: &[GeoPoint],
    cov: &CovarianceSpec,
    v: &DMatrix<f64>,
    m: usize,
    rng: &mut impl Rng,
) -> Result<DMatrix<f64>> {
    let order = order_reference_set(sites, OrderingStrategy::Coordinate)?;
    let graph = build_neighbor_graph(sites, &order, m, NeighborMetric::GreatCircle)?;
    let factors = compute_factors(&graph, sites, &cov.with_sigma2(1.0)?, DEFAULT_JITTER)?;
    let p = v.nrows();
    let lv = Cholesky::new(v.clone())
        .ok_or_else(|| Error::Numerical("V is not positive definite".into()))?
        .l();
    let mut w = DMatrix::zeros(sites.len(), p);
    for &i in graph.order() {
        let mean = crate::nngp::parent_mean(&w, &graph, &factors, i);
        let xi = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let draw = mean + &lv * xi * factors.f(i).sqrt();
        w.set_row(i, &draw.transpose());
    }
    Ok(w)
}

/// Generates observations from the model at `truth`. With `draw_w` false the
/// supplied `truth.w` is used as the process.
#[allow(clippy::too_many_arguments)]
pub fn simulate_dataset(
    truth: &ModelState,
    sites: Vec<GeoPoint>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    mix: RatingMix,
    draw_w: bool,
    m: usize,
    seed: u64,
) -> Result<Simulated> {
    if !(0.0..=1.0).contains(&mix.prob_a) {
        return Err(Error::param("prob_a", "must lie in [0, 1]"));
    }
    if mix.obs_per_site == 0 {
        return Err(Error::param("obs_per_site", "must be at least 1"));
    }
    let mut rng = rng_from_seed(seed);
    let w = if draw_w {
        sample_nngp_prior(&sites, &truth.cov, &truth.v, m, &mut rng)?
    } else {
        truth.w.clone()
    };
    let mut obs = Vec::with_capacity(sites.len() * mix.obs_per_site);
    let mut labels = Vec::with_capacity(obs.capacity());
    for i in 0..sites.len() {
        let mean = x.row(i).dot(&truth.beta.transpose()) + z.row(i).dot(&w.row(i));
        for _ in 0..mix.obs_per_site {
            let (rating, label) = if rng.random::<f64>() < mix.prob_a {
                (Rating::A, None)
            } else {
                let l = if rng.random::<f64>() < truth.theta {
                    Label::B
                } else {
                    Label::C
                };
                (Rating::NonA, Some(l))
            };
            let sd = truth.tau2.for_label(rating, label).sqrt();
            let value = mean + sd * rng.sample::<f64, _>(StandardNormal);
            obs.push(Observation {
                site: i,
                value,
                rating,
            });
            labels.push(label);
        }
    }
    let data = Dataset::new(sites, x, z, obs)?;
    Ok(Simulated { data, w, labels })
}
