//! Predictive scores, holdout comparison and the Geweke diagnostic.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceSpec;
use crate::error::{Error, Result};
use crate::mcmc::{run_chain, NngpConfig, SamplerConfig};
use crate::model::{Dataset, Observation, PriorSpec, Rating};
use crate::predict::{predict_grid, PredictOptions, PredictionGrid};
use crate::stats::{mean, quantile_sorted, sorted};
use crate::transform::{fit_standardize, fit_transform, TransformSpec};

/// Empirical-CDF CRPS of predictive draws against an outcome.
pub fn crps_ecdf(samples: &[f64], y: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data(
            "CRPS needs at least one predictive draw".into(),
        ));
    }
    let m = samples.len() as f64;
    let s = sorted(samples);
    let first = s.iter().map(|x| (x - y).abs()).sum::<f64>() / m;
    // sum_{j,k} |x_j - x_k| = 2 sum_j (2j - m + 1) x_(j)
    let spread: f64 = s
        .iter()
        .enumerate()
        .map(|(j, x)| (2.0 * j as f64 - m + 1.0) * x)
        .sum();
    Ok((first - spread / (m * m)).max(0.0))
}

pub fn prmse(pred: &[f64], y: &[f64]) -> Result<f64> {
    if pred.len() != y.len() {
        return Err(Error::Dimension {
            expected: y.len(),
            found: pred.len(),
        });
    }
    if y.is_empty() {
        return Err(Error::Data("PRMSE of an empty set".into()));
    }
    let sse: f64 = pred.iter().zip(y).map(|(p, v)| (p - v).powi(2)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

/// Fraction of outcomes inside their closed interval.
pub fn coverage(intervals: &[(f64, f64)], y: &[f64]) -> Result<f64> {
    if intervals.len() != y.len() {
        return Err(Error::Dimension {
            expected: y.len(),
            found: intervals.len(),
        });
    }
    if y.is_empty() {
        return Err(Error::Data("coverage of an empty set".into()));
    }
    let mut inside = 0usize;
    for (k, (&(lo, hi), &v)) in intervals.iter().zip(y).enumerate() {
        if !(lo <= hi) {
            return Err(Error::Data(format!(
                "interval {k} is malformed: [{lo}, {hi}]"
            )));
        }
        if lo <= v && v <= hi {
            inside += 1;
        }
    }
    Ok(inside as f64 / y.len() as f64)
}

/// Spectral density at frequency zero from an autoregression fitted by
/// Yule-Walker, order chosen by AIC up to `10 log10(n)`.
fn spectral_zero(x: &[f64]) -> f64 {
    let n = x.len();
    let mu = mean(x);
    let lag = ((n as f64).sqrt().floor() as usize).min(n - 1);
    let acov = |k: usize| {
        x[..n - k]
            .iter()
            .zip(&x[k..])
            .map(|(a, b)| (a - mu) * (b - mu))
            .sum::<f64>()
            / n as f64
    };
    let mut s = acov(0);
    for k in 1..=lag {
        s += 2.0 * (1.0 - k as f64 / (lag + 1) as f64) * acov(k);
    }
    s.max(0.0)
}

pub const GEWEKE_MIN_LEN: usize = 100;

/// Geweke z comparing the first `frac_first` to the last `frac_last` of a chain.
pub fn geweke_z(chain: &[f64], frac_first: f64, frac_last: f64) -> Result<f64> {
    if chain.len() < GEWEKE_MIN_LEN {
        return Err(Error::param(
            "geweke.chain",
            format!(
                "needs at least {GEWEKE_MIN_LEN} values, got {}",
                chain.len()
            ),
        ));
    }
    if !(frac_first > 0.0 && frac_last > 0.0 && frac_first + frac_last <= 1.0) {
        return Err(Error::param(
            "geweke.fractions",
            format!(
                "need positive fractions summing to at most 1, got {frac_first} and {frac_last}"
            ),
        ));
    }
    let n = chain.len();
    let n1 = ((frac_first * n as f64).floor() as usize).max(2);
    let n2 = ((frac_last * n as f64).floor() as usize).max(2);
    let a = &chain[..n1];
    let b = &chain[n - n2..];
    let (sa, sb) = (spectral_zero(a), spectral_zero(b));
    if !(sa > 0.0 && sb > 0.0) {
        return Err(Error::DegenerateChain(
            "segment has no positive spectral variance".into(),
        ));
    }
    Ok((mean(a) - mean(b)) / (sa / n1 as f64 + sb / n2 as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HoldoutPlan {
    pub replicates: usize,
    pub holdout_size: usize,
    pub seed: u64,
}

impl Default for HoldoutPlan {
    fn default() -> Self {
        Self {
            replicates: 100,
            holdout_size: 1000,
            seed: 1,
        }
    }
}

impl HoldoutPlan {
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::param("holdout.replicates", "must be at least 1"));
        }
        if self.holdout_size == 0 {
            return Err(Error::param("holdout.holdout_size", "must be at least 1"));
        }
        let n_a = data.obs().iter().filter(|o| o.rating == Rating::A).count();
        if self.holdout_size >= n_a {
            return Err(Error::Data(format!(
                "holdout size {} needs more than the {n_a} A-rated observations available",
                self.holdout_size
            )));
        }
        Ok(())
    }
}

/// Training data with every site carrying a held-out observation removed.
#[derive(Debug, Clone)]
pub struct HoldoutSplit {
    pub train: Dataset,
    /// One node per distinct held-out site.
    pub targets: PredictionGrid,
    /// Target node of each held-out observation.
    pub target_of: Vec<usize>,
    pub y: Vec<f64>,
}

pub fn split_holdout(data: &Dataset, held: &[usize]) -> Result<HoldoutSplit> {
    let mut node_of_site = vec![None; data.n_sites()];
    let mut target_sites = Vec::new();
    let mut target_of = Vec::with_capacity(held.len());
    let mut y = Vec::with_capacity(held.len());
    for &j in held {
        let o = data
            .obs()
            .get(j)
            .ok_or_else(|| Error::Data(format!("held-out observation {j} does not exist")))?;
        let node = *node_of_site[o.site].get_or_insert_with(|| {
            target_sites.push(o.site);
            target_sites.len() - 1
        });
        target_of.push(node);
        y.push(o.value);
    }
    let keep: Vec<usize> = (0..data.n_sites())
        .filter(|&s| node_of_site[s].is_none() && !data.site_obs(s).is_empty())
        .collect();
    let mut new_index = vec![usize::MAX; data.n_sites()];
    for (k, &s) in keep.iter().enumerate() {
        new_index[s] = k;
    }
    let obs: Vec<Observation> = data
        .obs()
        .iter()
        .filter(|o| new_index[o.site] != usize::MAX)
        .map(|o| Observation {
            site: new_index[o.site],
            ..*o
        })
        .collect();
    let train = Dataset::new(
        keep.iter().map(|&s| data.sites()[s]).collect(),
        data.x().select_rows(keep.iter()),
        data.z().select_rows(keep.iter()),
        obs,
    )?;
    let targets = PredictionGrid::new(
        target_sites.iter().map(|&s| data.sites()[s]).collect(),
        vec![1.0; target_sites.len()],
        data.x().select_rows(target_sites.iter()),
        data.z().select_rows(target_sites.iter()),
    )?;
    Ok(HoldoutSplit {
        train,
        targets,
        target_of,
        y,
    })
}

/// A model that can be fit to training data and asked for predictive draws.
pub trait HoldoutModel: Sync {
    fn name(&self) -> &str;

    /// Original-scale predictive draws for each target node.
    fn predict(
        &self,
        train: &Dataset,
        targets: &PredictionGrid,
        seed: u64,
    ) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum TransformMode {
    BoxCox { shift: f64 },
    Standardize,
}

impl TransformMode {
    pub fn fit(&self, y: &[f64]) -> Result<TransformSpec> {
        match *self {
            TransformMode::BoxCox { shift } => fit_transform(y, shift),
            TransformMode::Standardize => fit_standardize(y),
        }
    }
}

/// Full pipeline: transform, sampler, composition prediction.
#[derive(Debug, Clone)]
pub struct NngpModel {
    pub name: String,
    pub cov: CovarianceSpec,
    pub priors: PriorSpec,
    pub nngp: NngpConfig,
    pub sampler: SamplerConfig,
    pub predict: PredictOptions,
    pub transform: TransformMode,
}

impl HoldoutModel for NngpModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(
        &self,
        train: &Dataset,
        targets: &PredictionGrid,
        seed: u64,
    ) -> Result<Vec<Vec<f64>>> {
        let raw: Vec<f64> = train.obs().iter().map(|o| o.value).collect();
        let t = self.transform.fit(&raw)?;
        let values = raw
            .iter()
            .map(|&v| t.forward(v))
            .collect::<Result<Vec<_>>>()?;
        let data = train.with_values(&values)?;
        let sampler = SamplerConfig {
            seed,
            ..self.sampler.clone()
        };
        let chain = run_chain(&data, &self.priors, self.cov, &self.nngp, &sampler)?;
        let opts = PredictOptions {
            seed,
            ..self.predict
        };
        Ok(predict_grid(&chain, &data, targets, &t, &opts)?.samples)
    }
}

/// Predicts known values with a tiny deterministic spread.
#[derive(Debug, Clone)]
pub struct OracleModel {
    truth: Vec<(crate::geo::GeoPoint, f64)>,
    spread: f64,
}

impl OracleModel {
    /// Truth at each site is the mean of its A-rated observations.
    pub fn from_dataset(data: &Dataset, spread: f64) -> Self {
        let truth = (0..data.n_sites())
            .filter_map(|s| {
                let vals: Vec<f64> = data
                    .site_obs(s)
                    .iter()
                    .map(|&j| &data.obs()[j])
                    .filter(|o| o.rating == Rating::A)
                    .map(|o| o.value)
                    .collect();
                (!vals.is_empty()).then(|| (data.sites()[s], mean(&vals)))
            })
            .collect();
        Self { truth, spread }
    }
}

impl HoldoutModel for OracleModel {
    fn name(&self) -> &str {
        "oracle"
    }

    fn predict(
        &self,
        _train: &Dataset,
        targets: &PredictionGrid,
        _seed: u64,
    ) -> Result<Vec<Vec<f64>>> {
        targets
            .points()
            .iter()
            .map(|p| {
                let (_, v) = self
                    .truth
                    .iter()
                    .find(|(q, _)| q.same_location(p))
                    .ok_or_else(|| Error::Data("oracle has no value at target".into()))?;
                Ok((0..21)
                    .map(|k| v + self.spread * (k as f64 - 10.0) / 10.0)
                    .collect())
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicateScore {
    pub replicate: usize,
    pub n: usize,
    pub prmse: f64,
    pub coverage90: f64,
    pub crps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub model: String,
    pub prmse: f64,
    pub coverage90: f64,
    pub crps: f64,
    pub replicates: Vec<ReplicateScore>,
    pub failed: Vec<(usize, String)>,
}

/// Scores original-scale predictive draws per target against held-out values.
pub fn score_split(
    split: &HoldoutSplit,
    draws: &[Vec<f64>],
    replicate: usize,
) -> Result<ReplicateScore> {
    if draws.len() != split.targets.len() {
        return Err(Error::Dimension {
            expected: split.targets.len(),
            found: draws.len(),
        });
    }
    let summaries: Vec<(f64, (f64, f64))> = draws
        .iter()
        .map(|d| {
            if d.is_empty() {
                return Err(Error::Data("target without predictive draws".into()));
            }
            let s = sorted(d);
            Ok((
                mean(d),
                (quantile_sorted(&s, 0.05), quantile_sorted(&s, 0.95)),
            ))
        })
        .collect::<Result<_>>()?;
    let means: Vec<f64> = split.target_of.iter().map(|&k| summaries[k].0).collect();
    let intervals: Vec<(f64, f64)> = split.target_of.iter().map(|&k| summaries[k].1).collect();
    let crps: Vec<f64> = split
        .target_of
        .iter()
        .zip(&split.y)
        .map(|(&k, &v)| crps_ecdf(&draws[k], v))
        .collect::<Result<_>>()?;
    Ok(ReplicateScore {
        replicate,
        n: split.y.len(),
        prmse: prmse(&means, &split.y)?,
        coverage90: coverage(&intervals, &split.y)?,
        crps: mean(&crps),
    })
}

/// Held-out A-rated observation indices for one replicate.
pub fn holdout_indices(data: &Dataset, plan: &HoldoutPlan, replicate: usize) -> Vec<usize> {
    let a: Vec<usize> = (0..data.obs().len())
        .filter(|&j| data.obs()[j].rating == Rating::A)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    rng.set_stream(replicate as u64);
    let mut idx: Vec<usize> = sample(&mut rng, a.len(), plan.holdout_size)
        .into_iter()
        .map(|i| a[i])
        .collect();
    idx.sort_unstable();
    idx
}

/// Maximum fraction of failed replicates tolerated before the run errors.
pub const MAX_FAILED_FRACTION: f64 = 0.05;

pub fn run_holdout(
    data: &Dataset,
    plan: &HoldoutPlan,
    model: &dyn HoldoutModel,
) -> Result<ScoreReport> {
    plan.validate(data)?;
    let results: Vec<(usize, Result<ReplicateScore>)> = (0..plan.replicates)
        .into_par_iter()
        .map(|r| {
            let res = (|| {
                let split = split_holdout(data, &holdout_indices(data, plan, r))?;
                let seed = plan.seed.wrapping_add(1 + r as u64);
                let draws = model.predict(&split.train, &split.targets, seed)?;
                score_split(&split, &draws, r)
            })();
            (r, res)
        })
        .collect();
    let mut replicates = Vec::new();
    let mut failed = Vec::new();
    for (r, res) in results {
        match res {
            Ok(s) => replicates.push(s),
            Err(e) => failed.push((r, e.to_string())),
        }
    }
    if !failed.is_empty() {
        let frac = failed.len() as f64 / plan.replicates as f64;
        if frac >= MAX_FAILED_FRACTION || replicates.is_empty() {
            return Err(Error::Numerical(format!(
                "{} of {} holdout replicates failed; first: {}",
                failed.len(),
                plan.replicates,
                failed[0].1
            )));
        }
        log::warn!(
            "{} of {} holdout replicates failed and were excluded",
            failed.len(),
            plan.replicates
        );
    }
    let avg = |f: fn(&ReplicateScore) -> f64| mean(&replicates.iter().map(f).collect::<Vec<_>>());
    Ok(ScoreReport {
        model: model.name().to_string(),
        prmse: avg(|s| s.prmse),
        coverage90: avg(|s| s.coverage90),
        crps: avg(|s| s.crps),
        replicates,
        failed,
    })
}
