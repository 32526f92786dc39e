//! Experiment configs, multi-seed runs and curve aggregation.
//!
//! One experiment file describes the environment, the demonstrations and a
//! list of methods. Every `(method, seed)` pair runs the whole pipeline
//! (demos, potential, agent) and writes one JSONL file of [`RunRecord`]s to
//! `<output_dir>/<method>/seed-<seed>.jsonl`.

pub mod cli;

use crate::agents::{bc_train, evaluate, train_agent, AgentError, BcConfig, CurvePoint, Learner, Td3Config};
use crate::demos::{generate_demos, DemoDataset, DemoError, DemoKind};
use crate::env::{EnvConfig, Variant};
use crate::flow::{train_flow, FlowError, FlowTrainConfig};
use crate::gan::{train_gan, GanError, GanTrainConfig};
use crate::shaping::Potential;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("seed {seed} of {method}: {source}")]
    Training { method: String, seed: u64, source: PipelineError },
    #[error("aggregation: {0}")]
    Aggregate(String),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Demos(#[from] DemoError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

impl PipelineError {
    /// Whether the failure came from an optimizer blowing up rather than from
    /// the inputs.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            PipelineError::Flow(FlowError::Diverged { .. } | FlowError::NonFinite { .. })
                | PipelineError::Gan(GanError::Diverged { .. })
                | PipelineError::Agent(AgentError::NonFinite { .. })
        )
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PotentialKind {
    Flow,
    Gan,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    Td3Shaped,
    Td3,
    Bc,
    Td3Bc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoSpec {
    pub kind: DemoKind,
    pub episodes: usize,
    /// Gaussian action noise of the demonstrator.
    pub noise: f64,
}

impl Default for DemoSpec {
    fn default() -> Self {
        Self { kind: DemoKind::Optimal, episodes: 20, noise: 0.005 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: String,
    pub agent: AgentKind,
    #[serde(default = "no_potential")]
    pub potential: PotentialKind,
    /// Weight of the critic term for `td3-bc`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

fn no_potential() -> PotentialKind {
    PotentialKind::None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub env: EnvConfig,
    pub demos: DemoSpec,
    pub flow: FlowTrainConfig,
    pub gan: GanTrainConfig,
    pub td3: Td3Config,
    pub bc: BcConfig,
    pub methods: Vec<MethodSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            seeds: vec![0, 1, 2, 3, 4],
            env: EnvConfig::default(),
            demos: DemoSpec::default(),
            flow: FlowTrainConfig::default(),
            gan: GanTrainConfig::default(),
            td3: Td3Config::default(),
            bc: BcConfig::default(),
            methods: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds: need at least one seed".into());
        }
        if self.methods.is_empty() {
            return bad("methods: need at least one method".into());
        }
        self.env.validate().map_err(|e| HarnessError::Config(format!("env: {e}")))?;
        self.flow.validate().map_err(|e| HarnessError::Config(format!("flow: {e}")))?;
        self.gan.validate().map_err(|e| HarnessError::Config(format!("gan: {e}")))?;
        self.td3.validate().map_err(|e| HarnessError::Config(format!("td3: {e}")))?;
        if self.demos.episodes == 0 || !(self.demos.noise >= 0.0) {
            return bad("demos: episodes must be positive and noise non-negative".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for m in &self.methods {
            if m.name.is_empty() || m.name.contains(['/', '\\']) || !names.insert(m.name.as_str()) {
                return bad(format!("methods.name: {:?} must be unique, non-empty and path-free", m.name));
            }
            match (m.agent, m.potential, m.lambda) {
                (AgentKind::Td3Shaped, _, None) => {}
                (AgentKind::Td3 | AgentKind::Bc, PotentialKind::None, None) => {}
                (AgentKind::Td3Bc, PotentialKind::None, Some(l)) if l > 0.0 => {}
                (AgentKind::Td3Bc, _, _) => {
                    return bad(format!("methods.{}: td3-bc needs lambda > 0 and no potential", m.name));
                }
                _ => return bad(format!("methods.{}: potential or lambda does not fit agent {:?}", m.name, m.agent)),
            }
        }
        Ok(())
    }
}

/// One evaluation point of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub seed: u64,
    pub eval_index: usize,
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    pub wall_clock_s: f64,
}

/// Independent seeds for the pipeline stages of one run.
#[derive(Debug, Clone, Copy)]
struct StageSeeds {
    demos: u64,
    potential: u64,
    agent: u64,
}

fn stage_seeds(seed: u64) -> StageSeeds {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    StageSeeds { demos: rng.gen(), potential: rng.gen(), agent: rng.gen() }
}

/// Train the configured potential on `demos`.
pub fn build_potential(
    kind: PotentialKind,
    demos: &DemoDataset,
    flow: &FlowTrainConfig,
    gan: &GanTrainConfig,
    seed: u64,
) -> Result<Potential, PipelineError> {
    Ok(match kind {
        PotentialKind::None => Potential::Zero,
        PotentialKind::Flow => {
            let model = train_flow(demos, flow, seed)?.model;
            Potential::Flow { model: Arc::new(model), scale: flow.scale, floor: flow.floor }
        }
        PotentialKind::Gan => {
            let model = train_gan(demos, gan, seed)?.model;
            Potential::Gan { model: Arc::new(model), scale: gan.scale }
        }
    })
}

/// Full pipeline for one method and seed, reporting curve points as they
/// appear.
pub fn run_method_seed(
    cfg: &ExperimentConfig,
    method: &MethodSpec,
    seed: u64,
    mut sink: impl FnMut(&CurvePoint),
) -> Result<Vec<CurvePoint>, PipelineError> {
    let seeds = stage_seeds(seed);
    let demos = generate_demos(&cfg.env, cfg.demos.kind, cfg.demos.episodes, cfg.demos.noise, seeds.demos)?;
    match method.agent {
        AgentKind::Bc => {
            let out = bc_train(&demos, cfg.env.action_bound, &cfg.bc, seeds.agent)?;
            let eval_seed = ChaCha8Rng::seed_from_u64(seeds.agent).gen();
            let r = evaluate(&mut out.policy.clone(), &cfg.env, cfg.td3.eval_episodes, eval_seed)?;
            let point = CurvePoint { eval_index: 0, episodes: 0, success_rate: r.success_rate, mean_return: r.mean_return };
            sink(&point);
            Ok(vec![point])
        }
        AgentKind::Td3 | AgentKind::Td3Shaped | AgentKind::Td3Bc => {
            let learner = match method.agent {
                AgentKind::Td3 => Learner::Td3,
                AgentKind::Td3Shaped => Learner::Td3Shaped,
                _ => Learner::Td3Bc { lambda: method.lambda.unwrap_or(1.0) },
            };
            let phi = build_potential(method.potential, &demos, &cfg.flow, &cfg.gan, seeds.potential)?;
            let demos = (learner != Learner::Td3).then_some(&demos);
            Ok(train_agent(&cfg.env, &phi, demos, learner, &cfg.td3, seeds.agent, sink)?.curve)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub completed: BTreeMap<String, Vec<u64>>,
    pub failed: Vec<FailedSeed>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedSeed {
    pub method: String,
    pub seed: u64,
    pub divergence: bool,
    pub error: String,
}

pub fn seed_file(dir: &Path, method: &str, seed: u64) -> PathBuf {
    dir.join(method).join(format!("seed-{seed}.jsonl"))
}

/// Run every method on every seed. Failed seeds are recorded in
/// `status.json` and do not stop the others.
pub fn run_experiment(cfg: &ExperimentConfig, mut log: impl FnMut(&str)) -> Result<RunStatus, HarnessError> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let snapshot = out.join("config.toml");
    fs::write(&snapshot, cfg.to_toml()).map_err(|e| io_err(&snapshot, e))?;
    let mut status = RunStatus::default();
    for method in &cfg.methods {
        let dir = out.join(&method.name);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        for &seed in &cfg.seeds {
            let path = seed_file(out, &method.name, seed);
            let mut file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
            let start = Instant::now();
            let mut write_err = None;
            let result = run_method_seed(cfg, method, seed, |p| {
                let rec = RunRecord {
                    method: method.name.clone(),
                    seed,
                    eval_index: p.eval_index,
                    episodes: p.episodes,
                    success_rate: p.success_rate,
                    mean_return: p.mean_return,
                    wall_clock_s: start.elapsed().as_secs_f64(),
                };
                let line = serde_json::to_string(&rec).expect("record serializes");
                if let Err(e) = writeln!(file, "{line}") {
                    write_err.get_or_insert(e);
                }
            });
            if let Some(e) = write_err {
                return Err(io_err(&path, e));
            }
            match result {
                Ok(curve) => {
                    let last = curve.last().map_or(f64::NAN, |p| p.success_rate);
                    log(&format!("{} seed {seed}: final success {last:.2} ({:.1}s)", method.name, start.elapsed().as_secs_f64()));
                    status.completed.entry(method.name.clone()).or_default().push(seed);
                }
                Err(e) => {
                    log(&format!("{} seed {seed} failed: {e}", method.name));
                    status.failed.push(FailedSeed {
                        method: method.name.clone(),
                        seed,
                        divergence: e.is_divergence(),
                        error: e.to_string(),
                    });
                }
            }
        }
    }
    let path = out.join("status.json");
    fs::write(&path, serde_json::to_string_pretty(&status).expect("status serializes")).map_err(|e| io_err(&path, e))?;
    Ok(status)
}

/// One row of an aggregated curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub eval_index: usize,
    pub episodes: usize,
    pub mean_success: f64,
    pub std_success: f64,
    pub mean_return: f64,
    pub std_return: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and population standard deviation across seeds per evaluation index.
/// Every seed must report the same `(eval_index, episodes)` grid.
pub fn aggregate(per_seed: &BTreeMap<u64, Vec<RunRecord>>) -> Result<Vec<CurveRow>, HarnessError> {
    let Some((&first_seed, reference)) = per_seed.iter().next() else {
        return Err(HarnessError::Aggregate("no seeds to aggregate".into()));
    };
    let grid = |recs: &[RunRecord]| recs.iter().map(|r| (r.eval_index, r.episodes)).collect::<Vec<_>>();
    let reference_grid = grid(reference);
    let offending: Vec<u64> = per_seed.iter().filter(|(_, r)| grid(r) != reference_grid).map(|(&s, _)| s).collect();
    if !offending.is_empty() {
        return Err(HarnessError::Aggregate(format!(
            "evaluation grids differ from seed {first_seed} for seeds {offending:?}"
        )));
    }
    Ok(reference_grid
        .iter()
        .enumerate()
        .map(|(i, &(eval_index, episodes))| {
            let succ: Vec<f64> = per_seed.values().map(|r| r[i].success_rate).collect();
            let ret: Vec<f64> = per_seed.values().map(|r| r[i].mean_return).collect();
            let (mean_success, std_success) = mean_std(&succ);
            let (mean_return, std_return) = mean_std(&ret);
            CurveRow { eval_index, episodes, mean_success, std_success, mean_return, std_return }
        })
        .collect())
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("eval_index,episodes,mean_success,std_success,mean_return,std_return\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.eval_index, r.episodes, r.mean_success, r.std_success, r.mean_return, r.std_return
        ));
    }
    out
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| io_err(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Collect `seed-*.jsonl` files under `dir` (one level of method
/// subdirectories allowed), grouped by method and seed. Seeds listed as
/// failed in a `status.json` next to them are skipped.
pub fn collect_records(dir: &Path) -> Result<BTreeMap<String, BTreeMap<u64, Vec<RunRecord>>>, HarnessError> {
    let mut failed = std::collections::BTreeSet::new();
    let status_path = dir.join("status.json");
    if let Ok(text) = fs::read_to_string(&status_path) {
        let status: RunStatus = serde_json::from_str(&text).map_err(|e| io_err(&status_path, e))?;
        failed.extend(status.failed.into_iter().map(|f| (f.method, f.seed)));
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        if path.is_dir() {
            for sub in fs::read_dir(&path).map_err(|e| io_err(&path, e))? {
                files.push(sub.map_err(|e| io_err(&path, e))?.path());
            }
        } else {
            files.push(path);
        }
    }
    files.sort();
    let mut out: BTreeMap<String, BTreeMap<u64, Vec<RunRecord>>> = BTreeMap::new();
    for path in files {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if !(name.starts_with("seed-") && name.ends_with(".jsonl")) {
            continue;
        }
        let records = read_records(&path)?;
        let Some(first) = records.first() else { continue };
        if failed.contains(&(first.method.clone(), first.seed)) {
            continue;
        }
        out.entry(first.method.clone()).or_default().insert(first.seed, records);
    }
    if out.is_empty() {
        return Err(HarnessError::Aggregate(format!("no seed-*.jsonl records under {}", dir.display())));
    }
    Ok(out)
}

/// Aggregate every method found under `input`. With one method the curve is
/// written to `out`; with several, to `<stem>-<method>.<ext>` next to it.
pub fn aggregate_dir(input: &Path, out: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let methods = collect_records(input)?;
    let mut written = Vec::new();
    for (method, seeds) in &methods {
        let rows = aggregate(seeds).map_err(|e| HarnessError::Aggregate(format!("{method}: {e}")))?;
        let path = if methods.len() == 1 {
            out.to_path_buf()
        } else {
            let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("curve");
            let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("csv");
            out.with_file_name(format!("{stem}-{method}.{ext}"))
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        fs::write(&path, curve_csv(&rows)).map_err(|e| io_err(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Convenience for building a single-method config in code.
pub fn single_method(env: Variant, name: &str, agent: AgentKind, potential: PotentialKind, lambda: Option<f64>) -> ExperimentConfig {
    ExperimentConfig {
        env: EnvConfig::with_variant(env),
        methods: vec![MethodSpec { name: name.into(), agent, potential, lambda }],
        ..Default::default()
    }
}
