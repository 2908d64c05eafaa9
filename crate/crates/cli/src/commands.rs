//! One function per subcommand. Each writes its outputs into `out`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use nngp_core::covariance::CovarianceSpec;
use nngp_core::design::{select_sites, DesignProblem};
use nngp_core::eval::{geweke_z, run_holdout, HoldoutModel, NngpModel, OracleModel, ScoreReport};
use nngp_core::geo::{build_area_grid, SphereConfig};
use nngp_core::mcmc::{run_chain, Chain};
use nngp_core::model::{
    simulate_dataset, Label, ModelState, Rating, RatingMix, SiteCovariates, Standardizer, Tau2,
};
use nngp_core::predict::{
    integrate_smb, IntegralEstimate, Interval, PredictOptions, PredictionGrid,
};
use nngp_core::stats::{mean, quantile_sorted, sample_variance, sorted};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{
    read_chain, read_monitored, write_chain, write_edges, ChainMeta, GraphMeta, ModelArtifact,
    ARTIFACT_FILE, CHAIN_FILE, DIAGNOSTICS_FILE, EDGES_FILE, W_FILE,
};
use crate::config::{GridSource, ModelConfig, RunConfig, SimulateConfig};
use crate::error::{CliError, Result};
use crate::io::{
    complete_points, points_from_grid, prediction_grid, read_observations, read_points,
    sha256_file, write_json, write_observations, write_prediction, write_rows, write_scores,
    DesignRow, ImputeConfig, ObsRecord, ObsTable, PointRecord,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

fn create_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))
}

fn truth_state(sim: &SimulateConfig, n_sites: usize) -> Result<ModelState> {
    let t = &sim.truth;
    if t.beta.len() != nngp_core::model::P_X {
        return Err(CliError::Config(format!(
            "simulate.truth.beta: expected {} coefficients, got {}",
            nngp_core::model::P_X,
            t.beta.len()
        )));
    }
    let p = nngp_core::model::P_Z;
    if t.v.len() != p || t.v.iter().any(|r| r.len() != p) {
        return Err(CliError::Config(format!(
            "simulate.truth.v: expected a {p}x{p} matrix"
        )));
    }
    let v = DMatrix::from_fn(p, p, |i, j| t.v[i][j]);
    nngp_core::covariance::check_spd(&v, "V")
        .map_err(|e| CliError::Config(format!("simulate.truth.v: {e}")))?;
    let [a, b, c] = t.tau2;
    let tau2 =
        Tau2::new(a, b, c).map_err(|e| CliError::Config(format!("simulate.truth.tau2: {e}")))?;
    if !(0.0..=1.0).contains(&t.theta) {
        return Err(CliError::Config(
            "simulate.truth.theta: must lie in [0, 1]".into(),
        ));
    }
    let cov = CovarianceSpec::try_from(t.covariance)
        .and_then(|c| c.with_sigma2(1.0))
        .map_err(|e| CliError::Config(format!("simulate.truth.covariance: {e}")))?;
    Ok(ModelState {
        beta: DVector::from_vec(t.beta.clone()),
        w: DMatrix::zeros(n_sites, p),
        v,
        tau2,
        theta: t.theta,
        labels: Vec::new(),
        cov,
    })
}

#[derive(Debug, Serialize)]
struct TruthSummary {
    n_sites: usize,
    n_obs: usize,
    n_a: usize,
    n_b: usize,
    n_c: usize,
    truth: crate::config::TruthConfig,
}

/// Synthetic observation table from the model with known parameters.
pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<String> {
    let sim = cfg.section(&cfg.simulate, "simulate")?;
    if sim.n_sites < 2 {
        return Err(CliError::Config("simulate.n_sites: need at least 2".into()));
    }
    let r = sim.region;
    if !(-90.0 <= r.lat_min && r.lat_min < r.lat_max && r.lat_max <= 90.0) || !(r.elev_max_km > 0.0)
    {
        return Err(CliError::Config(
            "simulate.region: need lat_min < lat_max in [-90, 90] and elev_max_km > 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (s0, s1) = (r.lat_min.to_radians().sin(), r.lat_max.to_radians().sin());
    let mut sites = Vec::with_capacity(sim.n_sites);
    let mut covs = Vec::with_capacity(sim.n_sites);
    for _ in 0..sim.n_sites {
        // uniform on the sphere within the latitude band
        let lat = rng.random_range(s0..s1).asin().to_degrees();
        let lon = rng.random_range(-180.0..180.0);
        let el = rng.random_range(0.0..r.elev_max_km);
        let dc = rng.random_range(0.0..800.0);
        let temp = 258.0 - 6.5 * el - 0.004 * dc + rng.random_range(-4.0..4.0);
        sites.push(nngp_core::geo::GeoPoint::new(lat, lon, el)?);
        covs.push(SiteCovariates { el, dc, temp });
    }
    let truth = truth_state(sim, sites.len())?;
    let std = Standardizer::fit(&covs)?;
    let (x, z) = std.design(&covs);
    let mix = RatingMix {
        prob_a: sim.mix.prob_a,
        obs_per_site: sim.mix.obs_per_site,
    };
    let s = simulate_dataset(
        &truth,
        sites,
        x,
        z,
        mix,
        true,
        sim.m,
        cfg.seed.wrapping_add(1),
    )?;
    let rows: Vec<ObsRecord> = s
        .data
        .obs()
        .iter()
        .map(|o| {
            let p = s.data.sites()[o.site];
            let c = covs[o.site];
            let value = match &sim.transform {
                Some(t) => t.inverse_resampled(|| o.value).value,
                None => o.value,
            };
            ObsRecord {
                site_id: format!("S{:05}", o.site + 1),
                lat: p.lat(),
                lon: p.lon(),
                elev_km: c.el,
                dist_coast_km: c.dc,
                temp_k: c.temp,
                smb_mmwe: value,
                rating: match o.rating {
                    Rating::A => "A".into(),
                    Rating::NonA => "U".into(),
                },
                source_id: "sim".into(),
            }
        })
        .collect();
    create_dir(out)?;
    write_observations(&out.join("observations.csv"), &rows)?;
    let count = |l: Label| s.labels.iter().filter(|x| **x == Some(l)).count();
    let summary = TruthSummary {
        n_sites: s.data.n_sites(),
        n_obs: rows.len(),
        n_a: s.labels.iter().filter(|x| x.is_none()).count(),
        n_b: count(Label::B),
        n_c: count(Label::C),
        truth: sim.truth.clone(),
    };
    write_json(&out.join("truth.json"), &summary)?;
    Ok(format!(
        "simulated {} sites, {} observations ({} A, {} B, {} C)",
        summary.n_sites, summary.n_obs, summary.n_a, summary.n_b, summary.n_c
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub param: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
    /// Empty when the series is too short or constant.
    pub geweke_z: Option<f64>,
}

pub fn diagnostics(series: &[(String, Vec<f64>)]) -> Vec<DiagnosticRow> {
    series
        .iter()
        .map(|(name, v)| {
            let s = sorted(v);
            DiagnosticRow {
                param: name.clone(),
                mean: mean(v),
                sd: sample_variance(v).sqrt(),
                q025: quantile_sorted(&s, 0.025),
                q975: quantile_sorted(&s, 0.975),
                geweke_z: geweke_z(v, 0.1, 0.5).ok(),
            }
        })
        .collect()
}

/// Transform, sampler run and persisted artifact.
pub fn fit(cfg: &RunConfig, out: &Path) -> Result<String> {
    let f = cfg.section(&cfg.fit, "fit")?;
    let cov = CovarianceSpec::try_from(f.covariance)
        .map_err(|e| CliError::Config(format!("fit.covariance: {e}")))?;
    f.priors.validate()?;
    let mut sampler = f.sampler.clone();
    sampler.seed = cfg.seed;
    sampler.validate()?;
    let table = read_observations(&f.data)?;
    let std = Standardizer::fit(&table.covariates)?;
    let raw_data = table.dataset(&std)?;
    let raw: Vec<f64> = table.obs.iter().map(|o| o.value).collect();
    let transform = f.transform.fit(&raw)?;
    let values = raw
        .iter()
        .map(|&v| transform.forward(v))
        .collect::<nngp_core::error::Result<Vec<_>>>()?;
    let data = raw_data.with_values(&values)?;
    let chain = run_chain(&data, &f.priors, cov, &f.nngp, &sampler)?;
    let graph = f.nngp.build(data.sites())?;

    create_dir(out)?;
    write_chain(out, &chain)?;
    let n_edges = write_edges(&out.join(EDGES_FILE), &graph)?;
    let diag = diagnostics(&chain.monitored());
    write_rows(&out.join(DIAGNOSTICS_FILE), &diag)?;
    let art = ModelArtifact {
        tool_version: TOOL_VERSION.into(),
        data_file: f.data.clone(),
        data_sha256: sha256_file(&f.data)?,
        config_sha256: cfg.sha256(),
        transform,
        standardizer: std,
        covariance: cov.with_sigma2(1.0)?,
        priors: f.priors,
        sampler,
        nngp: f.nngp,
        graph: GraphMeta {
            n_sites: data.n_sites(),
            m: f.nngp.m,
            ordering: f.nngp.ordering,
            metric: f.nngp.metric,
            n_edges,
        },
        chain: ChainMeta {
            draws: chain.len(),
            px: data.px(),
            pz: data.pz(),
            free_params: chain.free_params.clone(),
            acceptance: chain.acceptance.clone(),
            chain_sha256: sha256_file(&out.join(CHAIN_FILE))?,
            w_sha256: sha256_file(&out.join(W_FILE))?,
        },
    };
    write_json(&out.join(ARTIFACT_FILE), &art)?;
    let flagged = diag
        .iter()
        .filter(|d| d.geweke_z.is_some_and(|z| z.abs() >= 1.96))
        .count();
    Ok(format!(
        "fit {} draws on {} sites (lambda {:.4}); {flagged} of {} parameters with |Geweke z| >= 1.96",
        chain.len(),
        data.n_sites(),
        transform.lambda(),
        diag.len()
    ))
}

/// Loaded fit: artifact, reference data on the model's design and chain.
struct Fitted {
    art: ModelArtifact,
    table: ObsTable,
    data: nngp_core::model::Dataset,
    chain: Chain,
}

fn load_fit(dir: &Path) -> Result<Fitted> {
    let art = ModelArtifact::load(dir)?;
    art.verify(dir)?;
    let table = read_observations(&art.data_file)?;
    let data = table.dataset(&art.standardizer)?;
    if data.n_sites() != art.graph.n_sites {
        return Err(CliError::Data(
            "data site count differs from the artifact".into(),
        ));
    }
    let chain = read_chain(dir, &art)?;
    Ok(Fitted {
        art,
        table,
        data,
        chain,
    })
}

fn grid_rows(src: &GridSource) -> Result<Vec<PointRecord>> {
    match src {
        GridSource::File { path } => read_points(path),
        GridSource::Generate {
            spacing_km,
            lat_cutoff,
        } => Ok(points_from_grid(&build_area_grid(
            *spacing_km,
            *lat_cutoff,
            &SphereConfig::default(),
        )?)),
    }
}

fn load_grid(
    src: &GridSource,
    fitted: &Fitted,
    impute: Option<ImputeConfig>,
) -> Result<PredictionGrid> {
    prediction_grid(
        &grid_rows(src)?,
        &fitted.table,
        &fitted.art.standardizer,
        impute,
    )
}

#[derive(Debug, Serialize)]
struct IntegralRecord {
    net_gton: Interval,
    avg_mmwe: Interval,
    total_area_km2: f64,
    n_draws: usize,
    rejected: usize,
    clamped: usize,
}

impl IntegralRecord {
    fn new(e: &IntegralEstimate, rejected: usize, clamped: usize) -> Self {
        Self {
            net_gton: e.net,
            avg_mmwe: e.avg,
            total_area_km2: e.total_area_km2,
            n_draws: e.net_draws.len(),
            rejected,
            clamped,
        }
    }
}

/// Mean and SD maps plus the integrated mass balance.
pub fn predict(cfg: &RunConfig, out: &Path) -> Result<String> {
    let p = cfg.section(&cfg.predict, "predict")?;
    let opts = PredictOptions {
        seed: cfg.seed,
        ..p.options
    };
    opts.validate()?;
    let fitted = load_fit(&p.artifact)?;
    let grid = load_grid(&p.grid, &fitted, p.impute)?;
    let pg = nngp_core::predict::predict_grid(
        &fitted.chain,
        &fitted.data,
        &grid,
        &fitted.art.transform,
        &opts,
    )?;
    let integral = integrate_smb(&pg)?;
    create_dir(out)?;
    write_prediction(out, &pg)?;
    write_json(
        &out.join("integral.json"),
        &IntegralRecord::new(&integral, pg.rejected, pg.clamped),
    )?;
    Ok(format!(
        "net mass balance {:.3} ({:.3}, {:.3}) Gton/yr over {:.0} km^2",
        integral.net.mean, integral.net.lo, integral.net.hi, integral.total_area_km2
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: usize,
    pub candidate: usize,
    pub imse: f64,
}

/// Ranked measurement sites by sequential IMSE.
pub fn design(cfg: &RunConfig, out: &Path) -> Result<String> {
    let d = cfg.section(&cfg.design, "design")?;
    let opts = PredictOptions {
        seed: cfg.seed,
        ..d.options
    };
    opts.validate()?;
    let fitted = load_fit(&d.artifact)?;
    let grid = load_grid(&d.grid, &fitted, d.impute)?;
    let cand_rows = read_points(&d.candidates)?;
    let impute = Some(d.impute.unwrap_or_default());
    let (candidates, _) = complete_points(&cand_rows, &fitted.table, impute, "candidate")?;
    if d.n_select > candidates.len() {
        return Err(CliError::Config(format!(
            "design.n_select: {} exceeds the {} candidates",
            d.n_select,
            candidates.len()
        )));
    }
    let problem = DesignProblem {
        candidates,
        grid,
        n_select: d.n_select,
        predict: opts,
    };
    let res = select_sites(&problem, &fitted.data, &fitted.chain, &fitted.art.transform)?;
    let rows: Vec<DesignRow> = res
        .selected
        .iter()
        .zip(&res.imse_trace)
        .enumerate()
        .map(|(r, (&i, scores))| {
            let p = problem.candidates[i];
            let imse = scores.iter().find(|s| s.0 == i).map_or(f64::NAN, |s| s.1);
            DesignRow {
                rank: r + 1,
                lat: p.lat(),
                lon: p.lon(),
                elev: p.elev(),
                imse,
            }
        })
        .collect();
    let trace: Vec<TraceRow> = res
        .imse_trace
        .iter()
        .enumerate()
        .flat_map(|(r, s)| {
            s.iter().map(move |&(candidate, imse)| TraceRow {
                round: r + 1,
                candidate,
                imse,
            })
        })
        .collect();
    create_dir(out)?;
    write_rows(&out.join("design.csv"), &rows)?;
    write_rows(&out.join("design_trace.csv"), &trace)?;
    Ok(format!(
        "selected {} of {} candidates",
        rows.len(),
        problem.candidates.len()
    ))
}

fn holdout_model(
    m: &ModelConfig,
    data: &nngp_core::model::Dataset,
) -> Result<Box<dyn HoldoutModel>> {
    Ok(match m {
        ModelConfig::Oracle { spread, .. } => Box::new(OracleModel::from_dataset(data, *spread)),
        ModelConfig::Nngp {
            name,
            covariance,
            priors,
            sampler,
            nngp,
            predict,
            transform,
        } => {
            let cov = CovarianceSpec::try_from(*covariance)
                .map_err(|e| CliError::Config(format!("evaluate.models.{name}: {e}")))?;
            priors.validate()?;
            sampler.validate()?;
            predict.validate()?;
            Box::new(NngpModel {
                name: name.clone(),
                cov,
                priors: *priors,
                nngp: *nngp,
                sampler: sampler.clone(),
                predict: *predict,
                transform: *transform,
            })
        }
    })
}

/// Holdout scores for every configured model.
pub fn evaluate(cfg: &RunConfig, out: &Path) -> Result<String> {
    let e = cfg.section(&cfg.evaluate, "evaluate")?;
    if e.models.is_empty() {
        return Err(CliError::Config(
            "evaluate.models: at least one model is required".into(),
        ));
    }
    let table = read_observations(&e.data)?;
    if table.n_a() < e.plan.holdout_size + 10 {
        return Err(CliError::Data(format!(
            "{} A-rated observations; holdout size {} needs at least {}",
            table.n_a(),
            e.plan.holdout_size,
            e.plan.holdout_size + 10
        )));
    }
    let std = Standardizer::fit(&table.covariates)?;
    let data = table.dataset(&std)?;
    let plan = nngp_core::eval::HoldoutPlan {
        seed: cfg.seed,
        ..e.plan
    };
    let mut reports: Vec<ScoreReport> = Vec::new();
    for m in &e.models {
        let model = holdout_model(m, &data)?;
        let mut r = run_holdout(&data, &plan, model.as_ref())?;
        if let ModelConfig::Oracle { name, .. } = m {
            r.model = name.clone();
        }
        log::info!(
            "{}: prmse {:.4} coverage {:.3} crps {:.4}",
            r.model,
            r.prmse,
            r.coverage90,
            r.crps
        );
        reports.push(r);
    }
    create_dir(out)?;
    write_scores(out, &reports)?;
    let best = reports
        .iter()
        .min_by(|a, b| a.crps.total_cmp(&b.crps))
        .expect("at least one model");
    Ok(format!(
        "scored {} model(s); lowest CRPS: {} ({:.4})",
        reports.len(),
        best.model,
        best.crps
    ))
}

/// Geweke table recomputed from a stored chain.
pub fn diagnose(cfg: &RunConfig, out: &Path) -> Result<String> {
    let d = cfg.section(&cfg.diagnose, "diagnose")?;
    let (_, series) = read_monitored(&d.artifact)?;
    let rows = diagnostics(&series);
    create_dir(out)?;
    write_rows(&out.join(DIAGNOSTICS_FILE), &rows)?;
    let flagged = rows
        .iter()
        .filter(|r| r.geweke_z.is_some_and(|z| z.abs() >= 1.96))
        .count();
    Ok(format!(
        "{flagged} of {} parameters with |Geweke z| >= 1.96",
        rows.len()
    ))
}
