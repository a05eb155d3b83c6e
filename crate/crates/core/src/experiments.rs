//! Batch experiments: presets, seeded parallel execution, resumable output.
//!
//! Output directory layout:
//!
//! ```text
//! manifest.json                      config hash, seeds, completed runs, curve hashes
//! config.toml                        base scenario shared by every run
//! runs/<policy>/<param>/seed-<i>.json   run summary (metrics + relay energy CV)
//! runs/<policy>/<param>/seed-<i>.csv    per-packet records
//! runs/<policy>/<param>/seed-<i>.energy.csv  per-node energy ledger
//! curves/<policy>.csv                mean and sd per parameter and metric
//! relay_energy_cv.csv                per-run relay energy CV (energy preset)
//! ```
//!
//! Every file is written to a temporary name and renamed, so a killed batch
//! leaves only whole files behind. Curves are always rebuilt from the
//! summaries on disk, sorted by key, so they do not depend on worker count
//! or on whether a run was resumed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, PolicyKind, ScenarioConfig};
use crate::draws::derive_seed;
use crate::forwarding::ForwardingWeights;
use crate::metrics::{
    aggregate, write_curve_csv, write_energy_csv, write_packets_csv, MetricsError, RunMetrics,
};
use crate::simulator::{self, SimError};
use crate::topology::{dist, Position};

/// Battery budget for preset runs, joules. The nominal 2 J drains in about a
/// minute of HELLO reception and idling alone, before any relaying; the
/// busiest desk-preset node draws about 31 J, so no node dies.
pub const PRESET_INITIAL_ENERGY: f64 = 50.0;

/// Channel-access seconds added per packet backlogged at a radio neighbor in
/// preset runs; couples delay to offered load across a neighborhood.
pub const PRESET_NEIGHBOR_INCREMENT: f64 = 0.004;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("unknown preset `{0}` (expected deadline_sweep, source_sweep or energy_distribution)")]
    UnknownPreset(String),
    #[error("unknown scale `{0}` (expected desk or full)")]
    UnknownScale(String),
    #[error("experiment has no runs: {0}")]
    Empty(&'static str),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    DeadlineSweep,
    SourceSweep,
    EnergyDistribution,
}

impl Preset {
    pub const ALL: [Preset; 3] = [
        Preset::DeadlineSweep,
        Preset::SourceSweep,
        Preset::EnergyDistribution,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::DeadlineSweep => "deadline_sweep",
            Preset::SourceSweep => "source_sweep",
            Preset::EnergyDistribution => "energy_distribution",
        }
    }

    /// What the swept parameter means.
    pub fn param_name(self) -> &'static str {
        match self {
            Preset::SourceSweep => "sources",
            _ => "deadline",
        }
    }
}

impl FromStr for Preset {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| ExperimentError::UnknownPreset(s.to_string()))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Desk scale keeps node density at a quarter of the nodes on a quarter of
/// the area.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Desk,
    /// 200 nodes on the default 200 m field.
    Full,
}

impl Scale {
    pub fn name(self) -> &'static str {
        match self {
            Scale::Desk => "desk",
            Scale::Full => "full",
        }
    }
}

impl FromStr for Scale {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            other => Err(ExperimentError::UnknownScale(other.to_string())),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A fully specified batch: every (policy, param, seed) combination runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub preset: Preset,
    pub scale: Scale,
    pub base: ScenarioConfig,
    pub policies: Vec<PolicyKind>,
    pub params: Vec<f64>,
    pub master_seed: u64,
    pub seeds: Vec<u64>,
}

/// Identifies one run inside an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RunKey {
    pub policy: PolicyKind,
    pub param_index: usize,
    pub seed_index: usize,
}

fn desk_layout(c: &mut ScenarioConfig) {
    let t = &mut c.topology;
    t.nodes = 50;
    t.field_width = 100.0;
    t.field_height = 100.0;
    t.sink = [100.0, 100.0];
    t.source_center = [20.0, 20.0];
    t.source_half_side = 10.0;
}

/// 100 ms to 700 ms in 50 ms steps.
pub fn deadline_grid() -> Vec<f64> {
    (2..=14).map(|i| f64::from(i) * 0.05).collect()
}

impl Experiment {
    /// Builds a preset, then applies `overrides` to its base scenario.
    pub fn preset(
        preset: Preset,
        scale: Scale,
        master_seed: u64,
        overrides: &[String],
    ) -> Result<Self, ExperimentError> {
        let mut base = ScenarioConfig::default();
        if scale == Scale::Desk {
            desk_layout(&mut base);
        }
        base.energy.initial = PRESET_INITIAL_ENERGY;
        base.traffic.packets = 500;
        base.channel.neighbor_increment = PRESET_NEIGHBOR_INCREMENT;
        base.protocol.weights =
            ForwardingWeights::new(0.1, 0.8, 0.1).expect("preset weights are valid");
        // the DMR tail flattens near 0.01, below 20-seed sampling noise
        let sweep_seeds = match scale {
            Scale::Desk => 40,
            Scale::Full => 20,
        };
        let (policies, params, seed_count) = match preset {
            Preset::DeadlineSweep => {
                base.traffic.sources = 10;
                (PolicyKind::ALL.to_vec(), deadline_grid(), sweep_seeds)
            }
            Preset::SourceSweep => {
                base.run.deadlines = vec![0.35];
                (
                    PolicyKind::ALL.to_vec(),
                    (6..=13).map(f64::from).collect(),
                    sweep_seeds,
                )
            }
            Preset::EnergyDistribution => {
                base.traffic.sources = 4;
                base.protocol.weights =
                    ForwardingWeights::new(0.1, 0.7, 0.2).expect("preset weights are valid");
                base.protocol.thvr.velocity_weight = 0.7;
                let runs = match scale {
                    Scale::Desk => 50,
                    Scale::Full => 200,
                };
                (vec![PolicyKind::Lrthr, PolicyKind::Thvr], vec![0.6], runs)
            }
        };
        let base = base.with_overrides(overrides)?;
        Ok(Experiment {
            preset,
            scale,
            base,
            policies,
            params,
            master_seed,
            seeds: (0..seed_count)
                .map(|i| derive_seed(master_seed, i))
                .collect(),
        })
    }

    /// Replaces the seed list with `count` seeds derived from the master.
    pub fn with_seed_count(mut self, count: usize) -> Self {
        self.seeds = (0..count as u64)
            .map(|i| derive_seed(self.master_seed, i))
            .collect();
        self
    }

    pub fn with_policies(mut self, policies: Vec<PolicyKind>) -> Self {
        self.policies = policies;
        self
    }

    pub fn keys(&self) -> Vec<RunKey> {
        let mut keys = Vec::new();
        for &policy in &self.policies {
            for param_index in 0..self.params.len() {
                for seed_index in 0..self.seeds.len() {
                    keys.push(RunKey {
                        policy,
                        param_index,
                        seed_index,
                    });
                }
            }
        }
        keys
    }

    /// Scenario and deadline for one run.
    pub fn scenario(&self, key: RunKey) -> (ScenarioConfig, f64) {
        let mut c = self.base.clone();
        c.protocol.policy = key.policy;
        let param = self.params[key.param_index];
        let deadline = match self.preset {
            Preset::SourceSweep => {
                c.traffic.sources = param as usize;
                c.run.deadlines.first().copied().unwrap_or(0.35)
            }
            _ => param,
        };
        (c, deadline)
    }

    pub fn param_label(&self, param: f64) -> String {
        match self.preset {
            Preset::SourceSweep => format!("{param:.0}"),
            _ => format!("{param:.3}"),
        }
    }

    fn run_stem(&self, key: RunKey) -> PathBuf {
        PathBuf::from("runs")
            .join(key.policy.name())
            .join(self.param_label(self.params[key.param_index]))
            .join(format!("seed-{}", key.seed_index))
    }

    fn completed_label(&self, key: RunKey) -> String {
        self.run_stem(key).to_string_lossy().replace('\\', "/")
    }

    pub fn config_hash(&self) -> String {
        sha256_hex(self.base.to_toml_string().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Per-run result persisted next to the packet CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub policy: PolicyKind,
    pub param: f64,
    pub seed_index: usize,
    pub seed: u64,
    pub deadline: f64,
    pub metrics: RunMetrics,
    pub relay_energy_cv: Option<f64>,
    pub control_bytes: u64,
}

/// Coefficient of variation (population sd over mean) of consumed energy
/// across relays: nodes that are neither the sink, a source, nor within
/// radio range of the sink.
pub fn relay_energy_cv(config: &ScenarioConfig, metrics: &RunMetrics) -> Option<f64> {
    let sink = Position::new(config.topology.sink[0], config.topology.sink[1]);
    let sources = config.traffic.sources as u32;
    let consumed: Vec<f64> = metrics
        .energy_by_node
        .iter()
        .filter(|r| r.node_id.0 > sources)
        .filter(|r| dist(Position::new(r.x, r.y), sink) > config.topology.radio_range)
        .map(|r| r.consumed())
        .collect();
    coefficient_of_variation(&consumed)
}

pub fn coefficient_of_variation(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return None;
    }
    let mut sq: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
    sq.sort_by(f64::total_cmp);
    Some((sq.iter().sum::<f64>() / n).sqrt() / mean)
}

/// Runs one member of the batch without touching the filesystem.
pub fn execute(
    exp: &Experiment,
    key: RunKey,
) -> Result<(RunSummary, simulator::RunOutput), ExperimentError> {
    let (config, deadline) = exp.scenario(key);
    let seed = exp.seeds[key.seed_index];
    let out = simulator::run(&config, deadline, seed)?;
    let summary = RunSummary {
        policy: key.policy,
        param: exp.params[key.param_index],
        seed_index: key.seed_index,
        seed,
        deadline,
        relay_energy_cv: relay_energy_cv(&config, &out.metrics),
        metrics: out.metrics.clone(),
        control_bytes: out.control_bytes,
    };
    Ok((summary, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub preset: Preset,
    pub scale: Scale,
    pub config_hash: String,
    /// The base scenario, verbatim.
    pub config: String,
    pub master_seed: u64,
    pub seeds: Vec<u64>,
    pub policies: Vec<PolicyKind>,
    pub params: Vec<f64>,
    /// Run stems (`runs/<policy>/<param>/seed-<i>`) whose outputs are whole.
    pub completed: BTreeSet<String>,
    /// SHA-256 of each curve file, by path relative to the output directory.
    pub curves: BTreeMap<String, String>,
}

impl Manifest {
    pub fn for_experiment(exp: &Experiment) -> Self {
        Manifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            preset: exp.preset,
            scale: exp.scale,
            config_hash: exp.config_hash(),
            config: exp.base.to_toml_string(),
            master_seed: exp.master_seed,
            seeds: exp.seeds.clone(),
            policies: exp.policies.clone(),
            params: exp.params.clone(),
            completed: BTreeSet::new(),
            curves: BTreeMap::new(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if m.config_hash != sha256_hex(m.config.as_bytes()) {
            return Err("config hash does not match the embedded config".into());
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Manifest::parse(&text).map_err(|message| ExperimentError::Manifest {
            path: path.to_path_buf(),
            message,
        })
    }

    /// Rebuilds the experiment this manifest describes.
    pub fn experiment(&self) -> Result<Experiment, ExperimentError> {
        Ok(Experiment {
            preset: self.preset,
            scale: self.scale,
            base: ScenarioConfig::from_toml_str(&self.config, &[])?,
            policies: self.policies.clone(),
            params: self.params.clone(),
            master_seed: self.master_seed,
            seeds: self.seeds.clone(),
        })
    }

    fn same_batch(&self, other: &Manifest) -> bool {
        self.config_hash == other.config_hash
            && self.preset == other.preset
            && self.seeds == other.seeds
            && self.policies == other.policies
            && self.params == other.params
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing CSV to memory cannot fail");
    buf
}

/// What a finished batch produced.
#[derive(Debug, Clone)]
pub struct BatchReport {
    pub manifest: Manifest,
    pub executed: usize,
    pub skipped: usize,
    pub summaries: Vec<RunSummary>,
}

/// Runs every pending member of `exp` into `out_dir` on `jobs` workers.
///
/// An existing manifest in `out_dir` must describe the same batch; runs it
/// lists as completed are skipped.
pub fn run_batch(
    exp: &Experiment,
    out_dir: &Path,
    jobs: usize,
) -> Result<BatchReport, ExperimentError> {
    if exp.policies.is_empty() || exp.params.is_empty() || exp.seeds.is_empty() {
        return Err(ExperimentError::Empty("no policies, parameters or seeds"));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let manifest_path = out_dir.join("manifest.json");
    let fresh = Manifest::for_experiment(exp);
    let manifest = if manifest_path.exists() {
        let old = Manifest::load(&manifest_path)?;
        if !old.same_batch(&fresh) {
            return Err(ExperimentError::Manifest {
                path: manifest_path,
                message: "existing manifest describes a different batch".into(),
            });
        }
        Manifest {
            completed: old.completed,
            ..fresh
        }
    } else {
        fresh
    };
    write_atomic(&out_dir.join("config.toml"), manifest.config.as_bytes())?;
    write_atomic(&manifest_path, manifest.to_json().as_bytes())?;

    let keys = exp.keys();
    let pending: Vec<RunKey> = keys
        .iter()
        .copied()
        .filter(|&k| {
            !manifest.completed.contains(&exp.completed_label(k))
                || !out_dir
                    .join(exp.run_stem(k).with_extension("json"))
                    .exists()
        })
        .collect();
    let skipped = keys.len() - pending.len();
    let manifest = Mutex::new(manifest);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool builds");
    pool.install(|| {
        pending
            .par_iter()
            .try_for_each(|&key| -> Result<(), ExperimentError> {
                let (summary, out) = execute(exp, key)?;
                let stem = out_dir.join(exp.run_stem(key));
                write_atomic(
                    &stem.with_extension("csv"),
                    &csv_bytes(|b| write_packets_csv(b, &out.packets)),
                )?;
                write_atomic(
                    &stem.with_extension("energy.csv"),
                    &csv_bytes(|b| write_energy_csv(b, &out.metrics.energy_by_node)),
                )?;
                let json = serde_json::to_string(&summary).expect("summary serializes");
                write_atomic(&stem.with_extension("json"), json.as_bytes())?;
                log::info!("finished {}", exp.completed_label(key));
                let mut m = manifest.lock().expect("manifest lock");
                m.completed.insert(exp.completed_label(key));
                write_atomic(&manifest_path, m.to_json().as_bytes())
            })
    })?;
    let mut manifest = manifest.into_inner().expect("manifest lock");

    let summaries = load_summaries(exp, out_dir)?;
    manifest.curves = write_curves(exp, out_dir, &summaries)?;
    write_atomic(&manifest_path, manifest.to_json().as_bytes())?;
    Ok(BatchReport {
        manifest,
        executed: pending.len(),
        skipped,
        summaries,
    })
}

/// Reads every run summary of `exp` from disk, in key order.
pub fn load_summaries(
    exp: &Experiment,
    out_dir: &Path,
) -> Result<Vec<RunSummary>, ExperimentError> {
    exp.keys()
        .into_iter()
        .map(|k| {
            let path = out_dir.join(exp.run_stem(k).with_extension("json"));
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            serde_json::from_str(&text).map_err(|e| ExperimentError::Manifest {
                path: path.clone(),
                message: e.to_string(),
            })
        })
        .collect()
}

fn write_curves(
    exp: &Experiment,
    out_dir: &Path,
    summaries: &[RunSummary],
) -> Result<BTreeMap<String, String>, ExperimentError> {
    let mut hashes = BTreeMap::new();
    for &policy in &exp.policies {
        let runs: Vec<(f64, RunMetrics)> = summaries
            .iter()
            .filter(|s| s.policy == policy)
            .map(|s| (s.param, s.metrics.clone()))
            .collect();
        let rows = aggregate(&runs)?;
        let bytes = csv_bytes(|b| write_curve_csv(b, &rows));
        let rel = format!("curves/{}.csv", policy.name());
        write_atomic(&out_dir.join(&rel), &bytes)?;
        hashes.insert(rel, sha256_hex(&bytes));
    }
    if exp.preset == Preset::EnergyDistribution {
        let mut text = String::from("policy,seed_index,seed,relay_energy_cv\n");
        for s in summaries {
            let cv = s.relay_energy_cv.map(|v| v.to_string()).unwrap_or_default();
            text += &format!("{},{},{},{cv}\n", s.policy, s.seed_index, s.seed);
        }
        let rel = "relay_energy_cv.csv".to_string();
        write_atomic(&out_dir.join(&rel), text.as_bytes())?;
        hashes.insert(rel, sha256_hex(text.as_bytes()));
    }
    Ok(hashes)
}

/// Result of re-running a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    /// Curve files whose hash differs from the manifest, or that are missing.
    pub mismatched: Vec<String>,
    pub checked: usize,
}

impl ReplayReport {
    pub fn identical(&self) -> bool {
        self.mismatched.is_empty()
    }
}

/// Re-executes the batch a manifest describes into `out_dir` and compares
/// the resulting curve hashes against the recorded ones.
pub fn replay(
    manifest_path: &Path,
    out_dir: &Path,
    jobs: usize,
) -> Result<ReplayReport, ExperimentError> {
    let recorded = Manifest::load(manifest_path)?;
    let exp = recorded.experiment()?;
    let report = run_batch(&exp, out_dir, jobs)?;
    let mismatched = recorded
        .curves
        .iter()
        .filter(|(file, hash)| report.manifest.curves.get(*file) != Some(*hash))
        .map(|(file, _)| file.clone())
        .collect();
    Ok(ReplayReport {
        mismatched,
        checked: recorded.curves.len(),
    })
}
