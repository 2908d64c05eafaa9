//! Fitted-model manifest and chain persistence.
//!
//! A fit directory holds `artifact.json`, `chain.csv` (`iter,param,value` for
//! every monitored scalar), `w.bin` (little-endian f64 process values, one
//! `n_sites x p` row-major block per draw), `diagnostics.csv` and `edges.csv`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use nngp_core::covariance::{CovParam, CovarianceSpec};
use nngp_core::mcmc::{monitored_names, Chain, MhStats, NngpConfig, SamplerConfig};
use nngp_core::model::{ModelState, PriorSpec, Standardizer, Tau2};
use nngp_core::nngp::{NeighborGraph, NeighborMetric, OrderingStrategy};
use nngp_core::transform::TransformSpec;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::io::{read_json, read_rows, sha256_file, write_rows};

pub const ARTIFACT_FILE: &str = "artifact.json";
pub const CHAIN_FILE: &str = "chain.csv";
pub const W_FILE: &str = "w.bin";
pub const EDGES_FILE: &str = "edges.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphMeta {
    pub n_sites: usize,
    pub m: usize,
    pub ordering: OrderingStrategy,
    pub metric: NeighborMetric,
    pub n_edges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMeta {
    pub draws: usize,
    pub px: usize,
    pub pz: usize,
    pub free_params: Vec<CovParam>,
    pub acceptance: BTreeMap<String, MhStats>,
    pub chain_sha256: String,
    pub w_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub tool_version: String,
    pub data_file: PathBuf,
    pub data_sha256: String,
    pub config_sha256: String,
    pub transform: TransformSpec,
    pub standardizer: Standardizer,
    /// Kernel at the start of sampling; free parameters are overwritten per draw.
    pub covariance: CovarianceSpec,
    pub priors: PriorSpec,
    pub sampler: SamplerConfig,
    pub nngp: NngpConfig,
    pub graph: GraphMeta,
    pub chain: ChainMeta,
}

impl ModelArtifact {
    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(ARTIFACT_FILE))
    }

    /// Fails when the data file or chain files no longer match their recorded hashes.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        let checks = [
            (self.data_file.clone(), &self.data_sha256),
            (dir.join(CHAIN_FILE), &self.chain.chain_sha256),
            (dir.join(W_FILE), &self.chain.w_sha256),
        ];
        for (path, expected) in checks {
            let actual = sha256_file(&path)?;
            if &actual != expected {
                return Err(CliError::Data(format!(
                    "{} changed since the fit (sha256 {actual}, recorded {expected})",
                    path.display()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRow {
    pub iter: usize,
    pub param: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRow {
    pub child: usize,
    pub parent: usize,
    pub slot: usize,
}

pub fn write_edges(path: &Path, graph: &NeighborGraph) -> Result<usize> {
    let rows: Vec<EdgeRow> = (0..graph.len())
        .flat_map(|i| {
            graph
                .neighbors(i)
                .iter()
                .enumerate()
                .map(move |(slot, &j)| EdgeRow {
                    child: i,
                    parent: j,
                    slot,
                })
        })
        .collect();
    write_rows(path, &rows)?;
    Ok(rows.len())
}

pub fn write_chain(dir: &Path, chain: &Chain) -> Result<()> {
    let mut rows = Vec::new();
    if let Some(first) = chain.draws.first() {
        let names = monitored_names(first, &chain.free_params);
        for (k, d) in chain.draws.iter().enumerate() {
            let values = nngp_core::mcmc::monitored_values(d, &chain.free_params);
            rows.extend(names.iter().zip(values).map(|(n, v)| ChainRow {
                iter: chain.iterations[k],
                param: n.clone(),
                value: v,
            }));
        }
    }
    write_rows(&dir.join(CHAIN_FILE), &rows)?;
    let path = dir.join(W_FILE);
    let mut w = BufWriter::new(File::create(&path).map_err(|e| CliError::io(&path, e))?);
    for d in &chain.draws {
        for i in 0..d.w.nrows() {
            for j in 0..d.w.ncols() {
                w.write_all(&d.w[(i, j)].to_le_bytes())
                    .map_err(|e| CliError::io(&path, e))?;
            }
        }
    }
    w.flush().map_err(|e| CliError::io(&path, e))
}

/// Monitored series from `chain.csv`, in first-appearance order.
pub fn read_monitored(dir: &Path) -> Result<(Vec<usize>, Vec<(String, Vec<f64>)>)> {
    let rows: Vec<ChainRow> = read_rows(&dir.join(CHAIN_FILE))?;
    let mut iters = Vec::new();
    let mut series: Vec<(String, Vec<f64>)> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for r in rows {
        if iters.last() != Some(&r.iter) {
            iters.push(r.iter);
        }
        let k = *index.entry(r.param.clone()).or_insert_with(|| {
            series.push((r.param.clone(), Vec::new()));
            series.len() - 1
        });
        series[k].1.push(r.value);
    }
    if series.iter().any(|(_, v)| v.len() != iters.len()) {
        return Err(CliError::Data(format!(
            "{}: ragged chain table",
            dir.join(CHAIN_FILE).display()
        )));
    }
    Ok((iters, series))
}

/// Rebuilds the recorded posterior states.
pub fn read_chain(dir: &Path, art: &ModelArtifact) -> Result<Chain> {
    let (iters, series) = read_monitored(dir)?;
    let meta = &art.chain;
    if iters.len() != meta.draws {
        return Err(CliError::Data(format!(
            "chain has {} draws, manifest says {}",
            iters.len(),
            meta.draws
        )));
    }
    let get = |name: &str| -> Result<&Vec<f64>> {
        series
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
            .ok_or_else(|| CliError::Data(format!("chain lacks parameter {name}")))
    };
    let (px, pz, n) = (meta.px, meta.pz, art.graph.n_sites);
    let path = dir.join(W_FILE);
    let mut bytes = Vec::new();
    BufReader::new(File::open(&path).map_err(|e| CliError::io(&path, e))?)
        .read_to_end(&mut bytes)
        .map_err(|e| CliError::io(&path, e))?;
    if bytes.len() != meta.draws * n * pz * 8 {
        return Err(CliError::Data(format!(
            "{}: unexpected size {}",
            path.display(),
            bytes.len()
        )));
    }
    let mut floats = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let beta: Vec<&Vec<f64>> = (1..=px)
        .map(|k| get(&format!("beta{k}")))
        .collect::<Result<_>>()?;
    let (ta, tb, tc, th) = (
        get("tau2_A")?,
        get("tau2_B")?,
        get("tau2_C")?,
        get("theta")?,
    );
    let mut vser = Vec::new();
    for i in 0..pz {
        for j in i..pz {
            vser.push(((i, j), get(&format!("V{}{}", i + 1, j + 1))?));
        }
    }
    let free: Vec<(CovParam, &Vec<f64>)> = meta
        .free_params
        .iter()
        .map(|&p| Ok((p, get(p.name())?)))
        .collect::<Result<_>>()?;
    let mut draws = Vec::with_capacity(iters.len());
    for d in 0..iters.len() {
        let mut v = DMatrix::zeros(pz, pz);
        for &((i, j), s) in &vser {
            v[(i, j)] = s[d];
            v[(j, i)] = s[d];
        }
        let mut cov = art.covariance;
        for &(p, s) in &free {
            cov = cov.with(p, s[d])?;
        }
        let w = DMatrix::from_row_iterator(n, pz, floats.by_ref().take(n * pz));
        draws.push(ModelState {
            beta: DVector::from_iterator(px, beta.iter().map(|s| s[d])),
            w,
            v,
            tau2: Tau2 {
                a: ta[d],
                b: tb[d],
                c: tc[d],
            },
            theta: th[d],
            labels: Vec::new(),
            cov,
        });
    }
    Ok(Chain {
        draws,
        iterations: iters,
        acceptance: meta.acceptance.clone(),
        config: art.sampler.clone(),
        free_params: meta.free_params.clone(),
    })
}
