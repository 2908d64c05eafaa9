//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! `cargo test -p nngp-cli --test acceptance -- <filter>` runs the criteria
//! whose names contain the filter.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{dmatrix, Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use nngp_cli::config::TruthConfig;
use nngp_cli::io::{read_observations, read_rows, ScoreRow};
use nngp_core::covariance::{
    cov_matrix, cov_matrix_sym, nonsep_sphere, CovParam, CovarianceConfig, CovarianceSpec,
    KernelFamily,
};
use nngp_core::design::{select_sites, DesignProblem};
use nngp_core::eval::{crps_ecdf, geweke_z};
use nngp_core::geo::{build_area_grid, cap_area, GeoPoint, SphereConfig};
use nngp_core::mcmc::{
    run_chain, run_chain_from, sample_truncated_inv_gamma, update_beta, update_latent_ratings,
    update_tau, update_v, update_w, Blocks, Chain, NngpConfig, SamplerConfig,
};
use nngp_core::model::{
    log_prior_cov_param, sample_nngp_prior, Dataset, Label, ModelState, Observation, PriorSpec,
    Rating, ShapeRate, Standardizer, Tau2,
};
use nngp_core::nngp::{
    build_neighbor_graph, compute_factors, conditional_predict, nngp_log_density,
    order_reference_set, NeighborGraph, NeighborMetric, NngpFactors, OrderingStrategy,
    DEFAULT_JITTER,
};
use nngp_core::predict::{integrate_smb, PredictOptions, PredictionGrid, PredictiveGrid};
use nngp_core::stats::{quantile_sorted, sorted};
use nngp_core::transform::TransformSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use tempfile::TempDir;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

const CRITERIA: [(&str, fn() -> Outcome); 10] = [
    ("nngp_dense_equivalence", nngp_dense_equivalence),
    ("covariance_validity", covariance_validity),
    ("gibbs_conditionals", gibbs_conditionals),
    ("mh_posterior", mh_posterior),
    ("parameter_recovery", parameter_recovery),
    ("crps", crps),
    ("integration_identities", integration_identities),
    ("design_oracle", design_oracle),
    ("model_recovery", model_recovery),
    ("determinism", determinism),
];

fn main() {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let (mut ran, mut failed) = (0, 0);
    for (name, check) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        ran += 1;
        failed += !o.pass as usize;
        println!(
            "{} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

const FAMILIES: [KernelFamily; 4] = [
    KernelFamily::SphericalMatern,
    KernelFamily::SeparableProduct,
    KernelFamily::NonSeparableSphere,
    KernelFamily::GneitingEuclidean,
];

/// Sites in the Antarctic band with longitudes in `[-lon_half, lon_half)`.
fn random_sites(n: usize, lon_half: f64, r: &mut ChaCha8Rng) -> Vec<GeoPoint> {
    (0..n)
        .map(|_| {
            GeoPoint::new(
                r.random_range(-85.0..-65.0),
                r.random_range(-lon_half..lon_half),
                r.random_range(0.0..3.0),
            )
            .unwrap()
        })
        .collect()
}

fn random_spec(family: KernelFamily, r: &mut ChaCha8Rng) -> CovarianceSpec {
    let mut c = CovarianceConfig::new(family, r.random_range(0.05..0.5));
    c.sigma2 = r.random_range(0.5..2.0);
    c.rho2 = r.random_range(0.5..3.0);
    c.alpha = r.random_range(0.3..2.0);
    c.delta = r.random_range(0.2..2.0);
    c.nu = r.random_range(0.0..1.0);
    c.matern_smoothness = r.random_range(0.2..0.5);
    c.elev_smoothness = r.random_range(0.3..1.5);
    if family == KernelFamily::GneitingEuclidean {
        c.rho1 = r.random_range(300.0..3000.0);
    }
    c.build().unwrap()
}

fn random_spd(p: usize, r: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(p, p, |_, _| normal(r));
    &a * a.transpose() / p as f64 + DMatrix::identity(p, p) * 0.3
}

fn log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

fn graph_for(sites: &[GeoPoint], m: usize) -> NeighborGraph {
    let order = order_reference_set(sites, OrderingStrategy::Coordinate).unwrap();
    build_neighbor_graph(sites, &order, m, NeighborMetric::GreatCircle).unwrap()
}

fn nngp(dir: &Path, args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_nngp"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr).trim()
        ))
    }
}

/// Monte Carlo estimates of a mean and a variance with their standard errors.
#[derive(Debug, Clone, Copy)]
struct Est {
    mean: f64,
    var: f64,
    se_mean: f64,
    se_var: f64,
}

fn iid(x: &[f64]) -> Est {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    Est {
        mean,
        var,
        se_mean: (var / n).sqrt(),
        se_var: ((m4 - var * var).max(0.0) / n).sqrt(),
    }
}

/// Batch-means version of [`iid`] for autocorrelated chains.
fn batched(x: &[f64], batches: usize) -> Est {
    let b = x.len() / batches;
    let x = &x[x.len() - b * batches..];
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let dev: Vec<f64> = x.iter().map(|v| (v - mean).powi(2)).collect();
    let se = |s: &[f64]| {
        let bm: Vec<f64> = s
            .chunks(b)
            .map(|c| c.iter().sum::<f64>() / b as f64)
            .collect();
        let m = bm.iter().sum::<f64>() / batches as f64;
        (bm.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (batches as f64 - 1.0) / batches as f64)
            .sqrt()
    };
    Est {
        mean,
        var: dev.iter().sum::<f64>() / (n - 1.0),
        se_mean: se(x),
        se_var: se(&dev),
    }
}

#[derive(Default)]
struct Tally {
    checks: usize,
    worst: f64,
    failures: Vec<String>,
}

impl Tally {
    fn z(&mut self, what: String, est: f64, truth: f64, se: f64, limit: f64) {
        self.checks += 1;
        let z = if se > 0.0 {
            (est - truth).abs() / se
        } else if est == truth {
            0.0
        } else {
            f64::INFINITY
        };
        self.worst = self.worst.max(z);
        if !(z <= limit) {
            self.failures
                .push(format!("{what}: {est:.6} vs {truth:.6} ({z:.1} SE)"));
        }
    }

    fn compare(&mut self, what: impl Display, e: Est, mean: f64, var: f64, limit: f64) {
        self.z(format!("{what} mean"), e.mean, mean, e.se_mean, limit);
        self.z(format!("{what} var"), e.var, var, e.se_var, limit);
    }

    fn outcome(self, limit: f64) -> Outcome {
        if self.failures.is_empty() {
            Outcome::new(
                true,
                format!(
                    "{} checks, largest deviation {:.2} SE (limit {limit})",
                    self.checks, self.worst
                ),
            )
        } else {
            Outcome::new(
                false,
                format!(
                    "{} of {} checks beyond {limit} SE: {}",
                    self.failures.len(),
                    self.checks,
                    self.failures.join("; ")
                ),
            )
        }
    }
}

fn dense_log_density(w: &DMatrix<f64>, c: &DMatrix<f64>, v: &DMatrix<f64>) -> f64 {
    let (k, p) = (w.nrows() as f64, w.ncols() as f64);
    let cc = Cholesky::new(c.clone()).expect("C positive definite");
    let cv = Cholesky::new(v.clone()).expect("V positive definite");
    let ciw = cc.solve(w);
    let wvi = cv.solve(&w.transpose()).transpose();
    let quad = ciw.component_mul(&wvi).sum();
    -0.5 * (k * p * (2.0 * PI).ln() + p * log_det(&cc) + k * log_det(&cv) + quad)
}

fn nngp_dense_equivalence() -> Outcome {
    let mut r = rng(101);
    let (mut worst_ld, mut worst_krig, mut jittered) = (0.0f64, 0.0f64, 0usize);
    for trial in 0..20 {
        let k = r.random_range(5..=50);
        let p = r.random_range(1..=3);
        let sites = random_sites(k, 30.0, &mut r);
        let spec = random_spec(FAMILIES[trial % 4], &mut r);
        let v = random_spd(p, &mut r);
        let w = DMatrix::from_fn(k, p, |_, _| normal(&mut r));
        let graph = graph_for(&sites, k - 1);
        let factors = compute_factors(&graph, &sites, &spec, DEFAULT_JITTER).unwrap();
        jittered += factors.jittered();
        let ld = nngp_log_density(&w, &factors, &graph, &v).unwrap();
        let c = cov_matrix_sym(&sites, &spec);
        worst_ld = worst_ld.max((ld - dense_log_density(&w, &c, &v)).abs());

        let cc = Cholesky::new(c).unwrap();
        for t in random_sites(5, 30.0, &mut r) {
            let cond = conditional_predict(
                &t,
                &sites,
                &w,
                k,
                &spec,
                &v,
                NeighborMetric::GreatCircle,
                DEFAULT_JITTER,
            )
            .unwrap();
            let c0 = cov_matrix(&sites, std::slice::from_ref(&t), &spec);
            let a = cc.solve(&c0);
            let mean: DVector<f64> = w.transpose() * a.column(0);
            let var = spec.between(&t, &t) - c0.dot(&a);
            let e = (&cond.mean - &mean)
                .amax()
                .max((cond.variance - var).abs())
                .max((&cond.cov - &v * var).amax());
            worst_krig = worst_krig.max(e);
        }
    }
    Outcome::new(
        worst_ld <= 1e-8 && worst_krig <= 1e-8 && jittered == 0,
        format!(
            "20 draws, max |log density diff| {worst_ld:.2e}, max kriging diff {worst_krig:.2e}, jittered systems {jittered} (tol 1e-8)"
        ),
    )
}

fn covariance_validity() -> Outcome {
    let mut r = rng(202);
    let (mut worst, mut bad) = (f64::INFINITY, 0);
    for family in FAMILIES {
        for _ in 0..100 {
            let sites = random_sites(50, 180.0, &mut r);
            let spec = random_spec(family, &mut r);
            let min = SymmetricEigen::new(cov_matrix_sym(&sites, &spec))
                .eigenvalues
                .min()
                / spec.sigma2();
            worst = worst.min(min);
            bad += (min < -1e-8) as usize;
        }
    }
    let mut fact = 0.0f64;
    for _ in 0..10_000 {
        let spec = random_spec(KernelFamily::NonSeparableSphere, &mut r)
            .with(CovParam::Nu, 0.0)
            .unwrap();
        let s2 = spec.sigma2();
        let theta = r.random_range(0.0..PI);
        let u = r.random_range(-4.0..4.0);
        let lhs = nonsep_sphere(theta, u, &spec) * s2;
        let rhs = nonsep_sphere(theta, 0.0, &spec) * nonsep_sphere(0.0, u, &spec);
        fact = fact.max((lhs - rhs).abs() / (s2 * s2));
    }
    Outcome::new(
        bad == 0 && fact <= 1e-12,
        format!(
            "400 matrices, {bad} with min eigenvalue below -1e-8 sigma^2 (smallest {worst:.2e} sigma^2); nu=0 factorization error {fact:.2e} (tol 1e-12)"
        ),
    )
}

const GIBBS_DRAWS: usize = 100_000;

struct Frozen {
    data: Dataset,
    state: ModelState,
    graph: NeighborGraph,
    factors: NngpFactors,
    priors: PriorSpec,
}

fn frozen() -> Frozen {
    let mut r = rng(303);
    let k = 12;
    let sites = random_sites(k, 20.0, &mut r);
    let x = DMatrix::from_fn(k, 3, |_, j| if j == 0 { 1.0 } else { normal(&mut r) });
    let z = DMatrix::from_fn(k, 2, |_, j| if j == 0 { 1.0 } else { normal(&mut r) });
    let (mut obs, mut labels) = (Vec::new(), Vec::new());
    for site in 0..k {
        for _ in 0..2 {
            let j = obs.len();
            let rating = if j % 3 == 0 { Rating::A } else { Rating::NonA };
            labels.push(match rating {
                Rating::A => None,
                Rating::NonA => Some(if j % 2 == 0 { Label::B } else { Label::C }),
            });
            obs.push(Observation {
                site,
                value: 0.7 * normal(&mut r),
                rating,
            });
        }
    }
    let data = Dataset::new(sites, x, z, obs).unwrap();
    let state = ModelState {
        beta: DVector::from_vec(vec![0.2, -0.1, 0.3]),
        w: DMatrix::from_fn(k, 2, |_, _| 0.5 * normal(&mut r)),
        v: dmatrix![0.6, 0.1; 0.1, 0.3],
        tau2: Tau2::new(0.1, 0.3, 0.8).unwrap(),
        theta: 0.4,
        labels,
        cov: CovarianceConfig::new(KernelFamily::NonSeparableSphere, 0.2)
            .build()
            .unwrap(),
    };
    let graph = graph_for(data.sites(), 4);
    let factors = compute_factors(&graph, data.sites(), &state.cov, DEFAULT_JITTER).unwrap();
    Frozen {
        data,
        state,
        graph,
        factors,
        priors: PriorSpec::default(),
    }
}

/// Nugget class of observation `j`: 0 for A, 1 for B, 2 for C.
fn class(s: &ModelState, data: &Dataset, j: usize) -> usize {
    match (data.obs()[j].rating, s.labels[j]) {
        (Rating::A, _) => 0,
        (Rating::NonA, Some(Label::B)) => 1,
        _ => 2,
    }
}

fn nugget(s: &ModelState, data: &Dataset, j: usize) -> f64 {
    [s.tau2.a, s.tau2.b, s.tau2.c][class(s, data, j)]
}

fn residual(s: &ModelState, data: &Dataset, j: usize) -> f64 {
    let o = data.obs()[j];
    o.value
        - data.x().row(o.site).dot(&s.beta.transpose())
        - data.z().row(o.site).dot(&s.w.row(o.site))
}

fn gibbs_beta(fz: &Frozen, t: &mut Tally, r: &mut ChaCha8Rng) {
    let (data, st, pr) = (&fz.data, &fz.state, &fz.priors);
    let px = data.px();
    let mut prec = DMatrix::identity(px, px) / pr.beta_var;
    let mut lin = DVector::from_element(px, pr.beta_mean / pr.beta_var);
    for (j, o) in data.obs().iter().enumerate() {
        let t2 = nugget(st, data, j);
        let x = data.x().row(o.site).transpose();
        let partial = o.value - data.z().row(o.site).dot(&st.w.row(o.site));
        prec += &x * x.transpose() / t2;
        lin += &x * (partial / t2);
    }
    let cov = prec.try_inverse().unwrap();
    let mean = &cov * lin;
    let mut s = st.clone();
    let mut draws = vec![Vec::with_capacity(GIBBS_DRAWS); px];
    for _ in 0..GIBBS_DRAWS {
        update_beta(&mut s, data, pr, r).unwrap();
        for (d, b) in draws.iter_mut().zip(s.beta.iter()) {
            d.push(*b);
        }
    }
    for (i, d) in draws.iter().enumerate() {
        t.compare(format_args!("beta[{i}]"), iid(d), mean[i], cov[(i, i)], 4.0);
    }
}

/// Mean and variance of an inverse gamma restricted to `(lo, hi)`, by Simpson's rule.
fn truncated_ig_moments(p: ShapeRate, lo: f64, hi: f64) -> (f64, f64) {
    let mode = p.rate / (p.shape + 1.0);
    let a = lo.max(mode * 1e-3);
    let b = if hi.is_finite() { hi } else { mode * 1e3 };
    let n = 2_000_000;
    let h = (b - a) / n as f64;
    let logf = |x: f64| -(p.shape + 1.0) * x.ln() - p.rate / x;
    let l0 = logf(mode.clamp(a, b));
    let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for i in 0..=n {
        let x = a + i as f64 * h;
        let wt = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let f = wt * (logf(x) - l0).exp();
        z += f;
        m1 += f * x;
        m2 += f * x * x;
    }
    let mean = m1 / z;
    (mean, m2 / z - mean * mean)
}

fn posterior_nuggets(fz: &Frozen) -> [ShapeRate; 3] {
    let (mut n, mut ss) = ([0.0; 3], [0.0; 3]);
    for j in 0..fz.data.obs().len() {
        let c = class(&fz.state, &fz.data, j);
        n[c] += 1.0;
        ss[c] += residual(&fz.state, &fz.data, j).powi(2);
    }
    let pr = &fz.priors;
    let prior = [pr.tau_a, pr.tau_b, pr.tau_c];
    std::array::from_fn(|c| {
        ShapeRate::new(prior[c].shape + n[c] / 2.0, prior[c].rate + ss[c] / 2.0)
    })
}

fn gibbs_tau(fz: &Frozen, t: &mut Tally, r: &mut ChaCha8Rng) {
    let post = posterior_nuggets(fz);
    let ig = |p: ShapeRate| {
        let a = p.shape - 1.0;
        (p.rate / a, p.rate * p.rate / (a * a * (p.shape - 2.0)))
    };

    let mut unordered = fz.priors;
    unordered.tau_ordered = false;
    let mut s = fz.state.clone();
    let mut draws = vec![Vec::with_capacity(GIBBS_DRAWS); 3];
    for _ in 0..GIBBS_DRAWS {
        update_tau(&mut s, &fz.data, &unordered, r).unwrap();
        for (d, v) in draws.iter_mut().zip([s.tau2.a, s.tau2.b, s.tau2.c]) {
            d.push(v);
        }
    }
    for (c, d) in draws.iter().enumerate() {
        let (m, v) = ig(post[c]);
        t.compare(format_args!("tau2[{c}]"), iid(d), m, v, 4.0);
    }

    // ordered prior: the first component is truncated above at the frozen B value
    let cut = ig(post[0]).0;
    let start = Tau2::new(0.5 * cut, cut, 3.0 * cut).unwrap();
    let mut a = Vec::with_capacity(GIBBS_DRAWS);
    for _ in 0..GIBBS_DRAWS {
        s.tau2 = start;
        update_tau(&mut s, &fz.data, &fz.priors, r).unwrap();
        a.push(s.tau2.a);
    }
    let (m, v) = truncated_ig_moments(post[0], 0.0, cut);
    t.compare("ordered tau2_A", iid(&a), m, v, 4.0);

    let mb = ig(post[1]).0;
    let mc = ig(post[2]).0;
    for (name, p, lo, hi) in [
        ("tau2_B on (lo, hi)", post[1], 0.9 * mb, 1.3 * mb),
        ("tau2_C on (lo, inf)", post[2], 1.1 * mc, f64::INFINITY),
    ] {
        let d: Vec<f64> = (0..GIBBS_DRAWS)
            .map(|_| sample_truncated_inv_gamma(p, lo, hi, r).unwrap())
            .collect();
        let (m, v) = truncated_ig_moments(p, lo, hi);
        t.compare(name, iid(&d), m, v, 4.0);
    }
}

fn gibbs_labels(fz: &Frozen, t: &mut Tally, r: &mut ChaCha8Rng) {
    let (data, st) = (&fz.data, &fz.state);
    let nona: Vec<usize> = (0..data.obs().len())
        .filter(|&j| data.obs()[j].rating == Rating::NonA)
        .collect();
    let probs: Vec<f64> = nona
        .iter()
        .map(|&j| {
            let e = residual(st, data, j);
            let lb = st.theta * Normal::new(0.0, st.tau2.b.sqrt()).unwrap().pdf(e);
            let lc = (1.0 - st.theta) * Normal::new(0.0, st.tau2.c.sqrt()).unwrap().pdf(e);
            lb / (lb + lc)
        })
        .collect();
    let mut s = st.clone();
    let mut counts = vec![0usize; nona.len()];
    let mut thetas = Vec::with_capacity(GIBBS_DRAWS);
    for _ in 0..GIBBS_DRAWS {
        s.theta = st.theta;
        update_latent_ratings(&mut s, data, &fz.priors, r).unwrap();
        for (c, &j) in counts.iter_mut().zip(&nona) {
            *c += (s.labels[j] == Some(Label::B)) as usize;
        }
        thetas.push(s.theta);
    }
    let n = GIBBS_DRAWS as f64;
    for ((&c, &p), &j) in counts.iter().zip(&probs).zip(&nona) {
        t.z(
            format!("P(label {j} = B)"),
            c as f64 / n,
            p,
            (p * (1.0 - p) / n).sqrt(),
            4.0,
        );
    }

    // theta | labels ~ Beta(a + nB, b + nC) mixed over the Poisson-binomial count nB
    let mut dist = vec![1.0];
    for &p in &probs {
        let mut next = vec![0.0; dist.len() + 1];
        for (i, &q) in dist.iter().enumerate() {
            next[i] += q * (1.0 - p);
            next[i + 1] += q * p;
        }
        dist = next;
    }
    let total = fz.priors.theta_a + fz.priors.theta_b + probs.len() as f64;
    let (mut mean, mut second) = (0.0, 0.0);
    for (nb, &q) in dist.iter().enumerate() {
        let m = (fz.priors.theta_a + nb as f64) / total;
        mean += q * m;
        second += q * (m * (1.0 - m) / (total + 1.0) + m * m);
    }
    t.compare("theta", iid(&thetas), mean, second - mean * mean, 4.0);
}

fn gibbs_v(fz: &Frozen, t: &mut Tally, r: &mut ChaCha8Rng) {
    let (st, pr) = (&fz.state, &fz.priors);
    let (k, p) = (st.w.nrows(), st.w.ncols());
    let mut psi = DMatrix::identity(p, p) * pr.v_scale;
    for i in 0..k {
        let mut e = st.w.row(i).transpose();
        for (&j, &b) in fz.graph.neighbors(i).iter().zip(fz.factors.b(i)) {
            e -= st.w.row(j).transpose() * b;
        }
        psi += &e * e.transpose() / fz.factors.f(i);
    }
    let (nu, pf) = (pr.iw_df(p) + k as f64, p as f64);
    let entries: Vec<(usize, usize)> = (0..p).flat_map(|i| (i..p).map(move |j| (i, j))).collect();
    let mut s = st.clone();
    let mut draws = vec![Vec::with_capacity(GIBBS_DRAWS); entries.len()];
    for _ in 0..GIBBS_DRAWS {
        update_v(&mut s, &fz.graph, &fz.factors, pr, r).unwrap();
        for (d, &(i, j)) in draws.iter_mut().zip(&entries) {
            d.push(s.v[(i, j)]);
        }
    }
    for (d, &(i, j)) in draws.iter().zip(&entries) {
        let mean = psi[(i, j)] / (nu - pf - 1.0);
        let var = ((nu - pf + 1.0) * psi[(i, j)].powi(2)
            + (nu - pf - 1.0) * psi[(i, i)] * psi[(j, j)])
            / ((nu - pf) * (nu - pf - 1.0).powi(2) * (nu - pf - 3.0));
        t.compare(format_args!("V[{i},{j}]"), iid(d), mean, var, 4.0);
    }
}

/// The sweep targets the joint Gaussian conditional of all process values,
/// so its long-run moments are compared with the dense posterior.
fn gibbs_w(fz: &Frozen, t: &mut Tally, r: &mut ChaCha8Rng) {
    let (data, st) = (&fz.data, &fz.state);
    let (k, p) = (data.n_sites(), data.pz());
    let mut i_b = DMatrix::<f64>::identity(k, k);
    for i in 0..k {
        for (&j, &b) in fz.graph.neighbors(i).iter().zip(fz.factors.b(i)) {
            i_b[(i, j)] -= b;
        }
    }
    let f_inv = DMatrix::from_diagonal(&DVector::from_fn(k, |i, _| 1.0 / fz.factors.f(i)));
    let q = i_b.transpose() * f_inv * &i_b;
    let v_inv = st.v.clone().try_inverse().unwrap();
    let n = k * p;
    let mut prec = DMatrix::from_fn(n, n, |a, b| q[(a / p, b / p)] * v_inv[(a % p, b % p)]);
    let mut lin = DVector::zeros(n);
    for (j, o) in data.obs().iter().enumerate() {
        let t2 = nugget(st, data, j);
        let z = data.z().row(o.site);
        let partial = o.value - data.x().row(o.site).dot(&st.beta.transpose());
        for a in 0..p {
            lin[o.site * p + a] += z[a] * partial / t2;
            for b in 0..p {
                prec[(o.site * p + a, o.site * p + b)] += z[a] * z[b] / t2;
            }
        }
    }
    let cov = Cholesky::new(prec).unwrap().inverse();
    let mean = &cov * lin;

    let mut s = st.clone();
    for _ in 0..1_000 {
        update_w(&mut s, data, &fz.graph, &fz.factors, r).unwrap();
    }
    let mut draws = vec![Vec::with_capacity(GIBBS_DRAWS); n];
    for _ in 0..GIBBS_DRAWS {
        update_w(&mut s, data, &fz.graph, &fz.factors, r).unwrap();
        for i in 0..k {
            for a in 0..p {
                draws[i * p + a].push(s.w[(i, a)]);
            }
        }
    }
    for (idx, d) in draws.iter().enumerate() {
        t.compare(
            format_args!("w[{},{}]", idx / p, idx % p),
            batched(d, 100),
            mean[idx],
            cov[(idx, idx)],
            4.0,
        );
    }
}

fn gibbs_conditionals() -> Outcome {
    let fz = frozen();
    let mut t = Tally::default();
    let mut r = rng(304);
    gibbs_beta(&fz, &mut t, &mut r);
    gibbs_tau(&fz, &mut t, &mut r);
    gibbs_labels(&fz, &mut t, &mut r);
    gibbs_v(&fz, &mut t, &mut r);
    gibbs_w(&fz, &mut t, &mut r);
    t.outcome(4.0)
}

fn mh_posterior() -> Outcome {
    let mut r = rng(404);
    let k = 20;
    let sites = random_sites(k, 20.0, &mut r);
    let spec = CovarianceConfig::new(KernelFamily::NonSeparableSphere, 0.1)
        .build()
        .unwrap();
    let v = DMatrix::identity(1, 1);
    let cfg = NngpConfig {
        m: 10,
        ..Default::default()
    };
    let w = sample_nngp_prior(&sites, &spec, &v, cfg.m, &mut r).unwrap();
    let obs = (0..k)
        .map(|site| Observation {
            site,
            value: 0.0,
            rating: Rating::A,
        })
        .collect();
    let ones = DMatrix::from_element(k, 1, 1.0);
    let data = Dataset::new(sites, ones.clone(), ones, obs).unwrap();
    let priors = PriorSpec::default();
    let state = ModelState {
        beta: DVector::zeros(1),
        w,
        v,
        tau2: Tau2::new(0.3, 0.4, 0.5).unwrap(),
        theta: 0.5,
        labels: vec![None; k],
        cov: spec,
    };
    let sampler = SamplerConfig {
        iterations: 100_000,
        burnin: 5_000,
        seed: 405,
        free_params: Some(vec![CovParam::Rho1]),
        blocks: Blocks {
            w: false,
            beta: false,
            shift: false,
            tau: false,
            labels: false,
            v: false,
            cov: true,
            whitened: false,
            v_linear: false,
            theta_collapsed: false,
        },
        ..Default::default()
    };
    let chain =
        run_chain_from(state.clone(), &data, &priors, &cfg, &sampler, &mut rng(405)).unwrap();
    let rho: Vec<f64> = chain.draws.iter().map(|d| d.cov.rho1()).collect();
    let est = batched(&rho, 100);

    let graph = cfg.build(data.sites()).unwrap();
    let radius = spec.sphere().radius();
    let (y0, y1, n) = (1e-4f64.ln(), 3f64.ln(), 20_000);
    let h = (y1 - y0) / n as f64;
    // integrate over y = ln(rho): density p(rho) * rho
    let lp: Vec<(f64, f64)> = (0..=n)
        .map(|i| {
            let y = y0 + i as f64 * h;
            let rho = y.exp();
            let f = spec
                .with(CovParam::Rho1, rho)
                .ok()
                .and_then(|s| compute_factors(&graph, data.sites(), &s, cfg.jitter).ok());
            let l = match f {
                Some(f) => {
                    nngp_log_density(&state.w, &f, &graph, &state.v).unwrap()
                        + log_prior_cov_param(CovParam::Rho1, rho, spec.family(), radius, &priors)
                        + y
                }
                None => f64::NEG_INFINITY,
            };
            (rho, l)
        })
        .collect();
    let top = lp.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut m) = (0.0, 0.0);
    for (i, &(rho, l)) in lp.iter().enumerate() {
        let wt = if i == 0 || i == n { 0.5 } else { 1.0 } * (l - top).exp();
        z += wt;
        m += wt * rho;
    }
    let grid_mean = m / z;
    let dev = (est.mean - grid_mean).abs() / est.se_mean;
    let rate = chain.acceptance.get("rho1").map_or(f64::NAN, |s| s.rate());
    Outcome::new(
        dev <= 3.0,
        format!(
            "MH mean {:.5} (SE {:.5}) vs grid {grid_mean:.5}: {dev:.2} SE (limit 3), acceptance {rate:.2}",
            est.mean, est.se_mean
        ),
    )
}

fn parameter_recovery() -> Outcome {
    let dir = TempDir::new().unwrap();
    fs::write(
        dir.path().join("run.json"),
        r#"{ "seed": 21, "simulate": { "n_sites": 300, "m": 15, "truth": { "tau2": [0.3, 0.42, 0.53] } } }"#,
    )
    .unwrap();
    if let Err(e) = nngp(
        dir.path(),
        &["simulate", "--config", "run.json", "--out", "sim"],
    ) {
        return Outcome::new(false, e);
    }
    let table = read_observations(&dir.path().join("sim/observations.csv")).unwrap();
    let data = table
        .dataset(&Standardizer::fit(&table.covariates).unwrap())
        .unwrap();
    let truth = TruthConfig {
        tau2: [0.3, 0.42, 0.53],
        ..Default::default()
    };
    let sampler = SamplerConfig {
        iterations: 5_000,
        burnin: 2_000,
        seed: 22,
        ..Default::default()
    };
    let cov = CovarianceConfig::new(KernelFamily::NonSeparableSphere, 0.1)
        .build()
        .unwrap();
    let nngp_cfg = NngpConfig {
        m: 15,
        ..Default::default()
    };
    let chain = run_chain(&data, &PriorSpec::default(), cov, &nngp_cfg, &sampler).unwrap();
    let series = chain.monitored();
    let mut missed = Vec::new();
    for (k, &b) in truth.beta.iter().enumerate() {
        let name = format!("beta{}", k + 1);
        let s = sorted(&series.iter().find(|(n, _)| *n == name).unwrap().1);
        let (lo, hi) = (quantile_sorted(&s, 0.025), quantile_sorted(&s, 0.975));
        if !(lo <= b && b <= hi) {
            missed.push(format!("{name} {b} outside ({lo:.3}, {hi:.3})"));
        }
    }
    let flagged: Vec<String> = series
        .iter()
        .filter_map(|(n, v)| match geweke_z(v, 0.1, 0.5) {
            Ok(z) if z.abs() < 1.96 => None,
            Ok(z) => Some(format!("{n} ({z:.2})")),
            Err(e) => Some(format!("{n} ({e})")),
        })
        .collect();
    let covered = truth.beta.len() - missed.len();
    let stable = series.len() - flagged.len();
    let rates: Vec<String> = chain
        .acceptance
        .iter()
        .map(|(n, s)| format!("{n} {:.2}", s.rate()))
        .collect();
    Outcome::new(
        covered >= 6 && stable as f64 >= 0.9 * series.len() as f64,
        format!(
            "beta covered {covered}/7{}; Geweke |z| < 1.96 for {stable}/{}{}; MH acceptance [{}]",
            if missed.is_empty() {
                String::new()
            } else {
                format!(" [{}]", missed.join(", "))
            },
            series.len(),
            if flagged.is_empty() {
                String::new()
            } else {
                format!(" [flagged: {}]", flagged.join(", "))
            },
            rates.join(", ")
        ),
    )
}

fn crps_naive(s: &[f64], y: f64) -> f64 {
    let m = s.len() as f64;
    let a: f64 = s.iter().map(|x| (x - y).abs()).sum::<f64>() / m;
    let b: f64 = s
        .iter()
        .flat_map(|x| s.iter().map(move |z| (x - z).abs()))
        .sum::<f64>();
    a - b / (2.0 * m * m)
}

fn crps() -> Outcome {
    let mut r = rng(606);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let m = r.random_range(1..=500);
        let s: Vec<f64> = (0..m).map(|_| 2.0 * normal(&mut r)).collect();
        let y = r.random_range(-4.0..4.0);
        worst = worst.max((crps_ecdf(&s, y).unwrap() - crps_naive(&s, y)).abs());
    }
    let mut gauss = 0.0f64;
    for (mu, sigma, y) in [(0.0, 1.0, 0.3), (2.0, 0.5, 1.0), (-1.0, 1.5, 0.5)] {
        let s: Vec<f64> = (0..100_000).map(|_| mu + sigma * normal(&mut r)).collect();
        let z = (y - mu) / sigma;
        let n = Normal::new(0.0, 1.0).unwrap();
        let exact = sigma * (z * (2.0 * n.cdf(z) - 1.0) + 2.0 * n.pdf(z) - 1.0 / PI.sqrt());
        gauss = gauss.max((crps_ecdf(&s, y).unwrap() - exact).abs());
    }
    Outcome::new(
        worst <= 1e-12 && gauss <= 1e-2,
        format!("fast vs double loop max diff {worst:.2e} (tol 1e-12); Gaussian max diff {gauss:.2e} (tol 1e-2)"),
    )
}

fn integration_identities() -> Outcome {
    let mut r = rng(707);
    let n = 400;
    let points = random_sites(n, 180.0, &mut r);
    let pg =
        PredictiveGrid::from_samples(points, vec![2_500.0; n], vec![vec![100.0; 8]; n]).unwrap();
    let est = integrate_smb(&pg).unwrap();
    let exact = est.total_area_km2 == 1e6
        && est.net.mean == 100.0
        && est.net_draws.iter().all(|&g| g == 100.0);

    let cfg = SphereConfig::default();
    let cap = cap_area(30f64.to_radians(), &cfg);
    let errs: Vec<f64> = [400.0, 200.0, 100.0, 50.0, 25.0]
        .iter()
        .map(|&h| (build_area_grid(h, -60.0, &cfg).unwrap().total_area() - cap).abs() / cap)
        .collect();
    let halving = errs.windows(2).all(|e| e[1] <= e[0] / 2.0);
    Outcome::new(
        exact && halving,
        format!(
            "constant field gives {} Gton/yr over {} km^2; relative area error at 400..25 km: {}",
            est.net.mean,
            est.total_area_km2,
            errs.iter()
                .map(|e| format!("{e:.2e}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

/// Brute-force IMSE with all reference sites plus the candidate as
/// conditioning set, on the identity transform.
fn dense_imse(cand: &GeoPoint, data: &Dataset, chain: &Chain, grid: &PredictionGrid) -> f64 {
    let refs = data.sites();
    let mut all = refs.to_vec();
    all.push(*cand);
    let mut means = vec![Vec::new(); grid.len()];
    let mut within = vec![0.0; grid.len()];
    for st in &chain.draws {
        let ch_r = Cholesky::new(cov_matrix_sym(refs, &st.cov)).unwrap();
        let ch_a = Cholesky::new(cov_matrix_sym(&all, &st.cov)).unwrap();
        for (k, g) in grid.points().iter().enumerate() {
            let z = grid.z().row(k).transpose();
            let cr = cov_matrix(refs, std::slice::from_ref(g), &st.cov);
            let ca = cov_matrix(&all, std::slice::from_ref(g), &st.cov);
            let w: DVector<f64> = st.w.transpose() * ch_r.solve(&cr).column(0);
            means[k].push(grid.x().row(k).dot(&st.beta.transpose()) + z.dot(&w));
            let s2 = st.cov.between(g, g) - ca.dot(&ch_a.solve(&ca));
            within[k] += z.dot(&(&st.v * &z)) * s2 + st.tau2.a;
        }
    }
    let s = chain.len() as f64;
    grid.area()
        .iter()
        .zip(within.iter().zip(&means))
        .map(|(a, (wv, m))| {
            let mu = m.iter().sum::<f64>() / s;
            a * (wv / s + m.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / s)
        })
        .sum()
}

fn design_instance(seed: u64) -> (Dataset, Chain, Vec<GeoPoint>, PredictionGrid) {
    let mut r = rng(800 + seed);
    let pt = |r: &mut ChaCha8Rng, lat: (f64, f64), lon: (f64, f64)| {
        GeoPoint::new(
            r.random_range(lat.0..lat.1),
            r.random_range(lon.0..lon.1),
            r.random_range(0.5..2.0),
        )
        .unwrap()
    };
    let k = 8;
    let refs: Vec<GeoPoint> = (0..k)
        .map(|_| pt(&mut r, (-76.0, -74.0), (-3.0, 3.0)))
        .collect();
    let z_of = |pts: &[GeoPoint]| {
        DMatrix::from_fn(
            pts.len(),
            2,
            |i, j| if j == 0 { 1.0 } else { pts[i].elev() },
        )
    };
    let obs = (0..k)
        .map(|site| Observation {
            site,
            value: 0.0,
            rating: Rating::A,
        })
        .collect();
    let data = Dataset::new(
        refs.clone(),
        DMatrix::from_element(k, 1, 1.0),
        z_of(&refs),
        obs,
    )
    .unwrap();
    let inside = pt(&mut r, (-76.0, -74.0), (-3.0, 3.0));
    let outside = pt(&mut r, (-72.0, -70.0), (12.0, 18.0));
    let candidates = if r.random::<bool>() {
        vec![outside, inside]
    } else {
        vec![inside, outside]
    };
    let nodes: Vec<GeoPoint> = (0..30)
        .map(|_| pt(&mut r, (-78.0, -68.0), (-6.0, 20.0)))
        .collect();
    let area: Vec<f64> = (0..nodes.len()).map(|_| r.random_range(0.5..2.0)).collect();
    let z = z_of(&nodes);
    let grid =
        PredictionGrid::new(nodes, area, DMatrix::from_element(z.nrows(), 1, 1.0), z).unwrap();
    let states: Vec<ModelState> = (0..40)
        .map(|_| {
            let ta = r.random_range(0.01..0.1);
            let mut c =
                CovarianceConfig::new(KernelFamily::NonSeparableSphere, r.random_range(0.05..0.15));
            c.rho2 = r.random_range(0.5..2.0);
            c.nu = r.random_range(0.0..1.0);
            ModelState {
                beta: DVector::from_element(1, 0.3 * normal(&mut r)),
                w: DMatrix::from_fn(k, 2, |_, _| 0.5 * normal(&mut r)),
                v: random_spd(2, &mut r) * 0.5,
                tau2: Tau2::new(ta, 2.0 * ta, 3.0 * ta).unwrap(),
                theta: 0.5,
                labels: vec![None; k],
                cov: c.build().unwrap(),
            }
        })
        .collect();
    let chain = Chain {
        iterations: (1..=states.len()).collect(),
        draws: states,
        acceptance: BTreeMap::new(),
        config: SamplerConfig::default(),
        free_params: vec![],
    };
    (data, chain, candidates, grid)
}

fn design_oracle() -> Outcome {
    let (mut agree, mut argmin_ok) = (0, true);
    let mut notes = Vec::new();
    for seed in 0..10 {
        let (data, chain, candidates, grid) = design_instance(seed);
        let dense: Vec<f64> = candidates
            .iter()
            .map(|c| dense_imse(c, &data, &chain, &grid))
            .collect();
        let want = if dense[0] <= dense[1] { 0 } else { 1 };
        let problem = DesignProblem {
            candidates,
            grid,
            n_select: 2,
            predict: PredictOptions {
                m: data.n_sites() + 2,
                draws_per_state: 250,
                max_states: None,
                seed: 900 + seed,
                ..Default::default()
            },
        };
        let res = select_sites(
            &problem,
            &data,
            &chain,
            &TransformSpec::identity_above(-1e6),
        )
        .unwrap();
        if res.selected[0] == want {
            agree += 1;
        } else {
            notes.push(format!(
                "seed {seed}: chose {} (dense {:.4} vs {:.4})",
                res.selected[0], dense[0], dense[1]
            ));
        }
        for (round, scores) in res.imse_trace.iter().enumerate() {
            let best = scores
                .iter()
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .map(|s| s.0);
            argmin_ok &= best == Some(res.selected[round]);
        }
    }
    Outcome::new(
        agree == 10 && argmin_ok,
        format!(
            "rank-1 agrees with dense IMSE in {agree}/10; per-round argmin {}{}",
            if argmin_ok { "holds" } else { "violated" },
            if notes.is_empty() {
                String::new()
            } else {
                format!(" [{}]", notes.join("; "))
            }
        ),
    )
}

const RECOVERY_CONFIG: &str = r#"{
    "seed": SEED,
    "simulate": {
        "n_sites": 250, "m": 15, "mix": { "prob_a": 0.8, "obs_per_site": 1 },
        "truth": { "covariance": { "family": "NonSeparableSphere", "rho1": 0.2, "rho2": 0.3, "delta": 0.25, "nu": 1.0, "alpha": 1.0 } }
    },
    "evaluate": {
        "data": "sim/observations.csv",
        "plan": { "replicates": 1, "holdout_size": 40 },
        "models": [
            { "kind": "nngp", "name": "nonsep", "transform": { "kind": "standardize" },
              "covariance": { "family": "NonSeparableSphere", "rho1": 0.1 },
              "nngp": { "m": 15 }, "predict": { "m": 15, "max_states": 200 },
              "sampler": { "iterations": 2000, "burnin": 1000, "blocks": { "whitened": false } } },
            { "kind": "nngp", "name": "euclidean", "transform": { "kind": "standardize" },
              "covariance": { "family": "GneitingEuclidean", "rho1": 600.0 },
              "nngp": { "m": 15 }, "predict": { "m": 15, "max_states": 200 },
              "sampler": { "iterations": 2000, "burnin": 1000, "blocks": { "whitened": false } } }
        ]
    }
}"#;

fn model_recovery() -> Outcome {
    let mut wins = 0;
    let mut rows = Vec::new();
    for trial in 0..10u64 {
        let dir = TempDir::new().unwrap();
        let d = dir.path();
        fs::write(
            d.join("run.json"),
            RECOVERY_CONFIG.replace("SEED", &(1000 + trial).to_string()),
        )
        .unwrap();
        let run = nngp(d, &["simulate", "--config", "run.json", "--out", "sim"])
            .and_then(|_| nngp(d, &["evaluate", "--config", "run.json", "--out", "ev"]));
        if let Err(e) = run {
            return Outcome::new(false, format!("trial {trial}: {e}"));
        }
        let scores: Vec<ScoreRow> = read_rows(&d.join("ev/scores.csv")).unwrap();
        let (ns, eu) = (scores[0].crps, scores[1].crps);
        wins += (ns < eu) as usize;
        rows.push(format!("{ns:.3}/{eu:.3}"));
    }
    Outcome::new(
        wins >= 8,
        format!(
            "nonsep beats euclidean on CRPS in {wins}/10 trials (need 8); nonsep/euclidean: {}",
            rows.join(" ")
        ),
    )
}

const DETERMINISM_CONFIG: &str = r#"{
    "seed": 5,
    "simulate": { "n_sites": 40, "m": 8, "mix": { "prob_a": 0.8, "obs_per_site": 1 } },
    "fit": {
        "data": "sim/observations.csv",
        "covariance": { "family": "NonSeparableSphere", "rho1": 0.05 },
        "sampler": { "iterations": 150, "burnin": 50 },
        "nngp": { "m": 6 }
    },
    "predict": {
        "artifact": "fit",
        "grid": { "kind": "generate", "spacing_km": 700.0, "lat_cutoff": -66.0 },
        "impute": { "k": 4 },
        "options": { "m": 6, "max_states": 30, "draws_per_state": 2 }
    },
    "design": {
        "artifact": "fit",
        "candidates": "candidates.csv",
        "grid": { "kind": "generate", "spacing_km": 1000.0, "lat_cutoff": -66.0 },
        "n_select": 2,
        "impute": { "k": 4 },
        "options": { "m": 6, "max_states": 10, "draws_per_state": 3 }
    },
    "evaluate": {
        "data": "sim/observations.csv",
        "plan": { "replicates": 2, "holdout_size": 5 },
        "models": [
            { "kind": "oracle", "name": "stub" },
            { "kind": "nngp", "name": "matern", "transform": { "kind": "standardize" },
              "covariance": { "family": "SphericalMatern", "rho1": 0.05 },
              "nngp": { "m": 5 }, "predict": { "m": 5, "max_states": 20 },
              "sampler": { "iterations": 100, "burnin": 50 } }
        ]
    },
    "diagnose": { "artifact": "fit" }
}"#;

fn same_tree(a: &Path, b: &Path) -> Result<usize, String> {
    let names = |d: &Path| -> Result<Vec<String>, String> {
        let mut v: Vec<String> = fs::read_dir(d)
            .map_err(|e| format!("{}: {e}", d.display()))?
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        v.sort();
        Ok(v)
    };
    let (na, nb) = (names(a)?, names(b)?);
    if na != nb {
        return Err(format!(
            "{} and {} hold different files",
            a.display(),
            b.display()
        ));
    }
    for n in &na {
        if fs::read(a.join(n)).unwrap() != fs::read(b.join(n)).unwrap() {
            return Err(format!(
                "{n} differs between {} and {}",
                a.display(),
                b.display()
            ));
        }
    }
    Ok(na.len())
}

fn determinism() -> Outcome {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    fs::write(d.join("run.json"), DETERMINISM_CONFIG).unwrap();
    fs::write(
        d.join("candidates.csv"),
        "lat,lon,elev_km\n-80.5,33.0,2.0\n-72.0,-100.0,1.0\n-85.0,150.0,\n",
    )
    .unwrap();
    let steps = [
        "simulate", "fit", "predict", "design", "evaluate", "diagnose",
    ];
    let outs = ["sim", "fit", "pred", "des", "ev", "diag"];
    let mut files = 0;
    for (cmd, out) in steps.iter().zip(outs) {
        let again = format!("{out}_again");
        let res = nngp(d, &[cmd, "--config", "run.json", "--out", out])
            .and_then(|_| {
                nngp(
                    d,
                    &[
                        cmd,
                        "--config",
                        "run.json",
                        "--threads",
                        "1",
                        "--out",
                        &again,
                    ],
                )
            })
            .and_then(|_| same_tree(&d.join(out), &d.join(&again)));
        match res {
            Ok(n) => files += n,
            Err(e) => return Outcome::new(false, format!("{cmd}: {e}")),
        }
    }
    Outcome::new(
        true,
        format!(
            "{} commands rerun (second run single-threaded), {files} output files byte-identical",
            steps.len()
        ),
    )
}
