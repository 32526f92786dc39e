//! Scripted demonstrators and `(state, action)` datasets.

use crate::env::{EnvConfig, EnvError, EnvState, Policy, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

/// Number of conflicting "push-away" pairs added to suboptimal datasets.
pub const PUSH_AWAY_PAIRS: usize = 200;

/// Height the suboptimal demonstrator lifts to before traversing.
pub const LIFT_HEIGHT: f64 = 0.9;

/// Horizontal offset of the side waypoints used by the multimodal demonstrator.
pub const SIDE_OFFSET: f64 = 0.15;

const DATASET_FORMAT: &str = "demo-pairs-v1";

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("demonstrator failed to reach the goal from start {start:?}; check the task geometry")]
    GenerationFailed { start: [f64; 2] },
    #[error("invalid demo request: {0}")]
    InvalidRequest(String),
    #[error("refusing to save an empty dataset")]
    Empty,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DemoKind {
    #[serde(rename = "optimal")]
    Optimal,
    #[serde(rename = "suboptimal-lift")]
    SuboptimalLift,
    #[serde(rename = "multimodal")]
    Multimodal,
}

impl std::str::FromStr for DemoKind {
    type Err = DemoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "optimal" => Ok(DemoKind::Optimal),
            "suboptimal-lift" => Ok(DemoKind::SuboptimalLift),
            "multimodal" => Ok(DemoKind::Multimodal),
            other => Err(DemoError::InvalidRequest(format!("unknown demo kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoPair {
    #[serde(rename = "s")]
    pub state: Vec<f64>,
    #[serde(rename = "a")]
    pub action: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoMeta {
    pub variant: Variant,
    pub kind: DemoKind,
    pub episodes: usize,
    pub noise: f64,
    pub seed: u64,
    /// Trailing pairs that were injected rather than rolled out.
    pub injected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub meta: DemoMeta,
    pub pairs: Vec<DemoPair>,
}

impl DemoDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.pairs.first().map_or(0, |p| p.state.len())
    }

    pub fn action_dim(&self) -> usize {
        self.pairs.first().map_or(0, |p| p.action.len())
    }

    /// Concatenated `s ⊕ a` rows, the input of the generative potentials.
    pub fn joint_rows(&self) -> Vec<Vec<f64>> {
        self.pairs.iter().map(|p| p.state.iter().chain(&p.action).copied().collect()).collect()
    }

    /// Pairs produced by rolling out the demonstrator.
    pub fn rollout_pairs(&self) -> &[DemoPair] {
        &self.pairs[..self.pairs.len() - self.meta.injected]
    }

    pub fn injected_pairs(&self) -> &[DemoPair] {
        &self.pairs[self.pairs.len() - self.meta.injected..]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DemoError> {
        if self.pairs.is_empty() {
            return Err(DemoError::Empty);
        }
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        let header = Header { format: DATASET_FORMAT.into(), count: self.pairs.len(), meta: self.meta.clone() };
        serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        for p in &self.pairs {
            serde_json::to_writer(&mut w, p).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DemoError> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines().enumerate();
        let (_, first) = lines.next().ok_or(DemoError::Parse { line: 1, msg: "missing header".into() })?;
        let header: Header =
            serde_json::from_str(&first?).map_err(|e| DemoError::Parse { line: 1, msg: e.to_string() })?;
        if header.format != DATASET_FORMAT {
            return Err(DemoError::Parse { line: 1, msg: format!("unknown format {:?}", header.format) });
        }
        let mut pairs = Vec::with_capacity(header.count);
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let pair: DemoPair =
                serde_json::from_str(&line).map_err(|e| DemoError::Parse { line: i + 1, msg: e.to_string() })?;
            if let Some(first) = pairs.first() {
                let first: &DemoPair = first;
                if pair.state.len() != first.state.len() || pair.action.len() != first.action.len() {
                    return Err(DemoError::Parse { line: i + 1, msg: "inconsistent dimensions".into() });
                }
            }
            pairs.push(pair);
        }
        if pairs.len() != header.count {
            return Err(DemoError::Parse {
                line: pairs.len() + 2,
                msg: format!("expected {} records, found {}", header.count, pairs.len()),
            });
        }
        if pairs.is_empty() || header.meta.injected > pairs.len() {
            return Err(DemoError::Parse { line: 1, msg: "header describes an empty or inconsistent dataset".into() });
        }
        Ok(Self { meta: header.meta, pairs })
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    count: usize,
    #[serde(flatten)]
    meta: DemoMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Waypoint,
    Lift,
    Traverse,
    Approach,
    Descend,
}

/// Noise-free waypoint controller acting on observations.
#[derive(Debug, Clone)]
pub struct Demonstrator {
    cfg: EnvConfig,
    kind: DemoKind,
    /// −1 approaches from the left, +1 from the right (multimodal only).
    side: f64,
    phase: Phase,
}

impl Demonstrator {
    pub fn new(cfg: &EnvConfig, kind: DemoKind) -> Self {
        Self::with_side(cfg, kind, -1.0)
    }

    pub fn with_side(cfg: &EnvConfig, kind: DemoKind, side: f64) -> Self {
        let mut d = Self { cfg: cfg.clone(), kind, side, phase: Phase::Approach };
        d.reset();
        d
    }

    fn initial_phase(&self) -> Phase {
        match self.kind {
            DemoKind::Optimal => Phase::Approach,
            DemoKind::SuboptimalLift => Phase::Lift,
            DemoKind::Multimodal => Phase::Waypoint,
        }
    }

    fn toward(&self, from: [f64; 2], to: [f64; 2]) -> [f64; 2] {
        let b = self.cfg.action_bound;
        [(to[0] - from[0]).clamp(-b, b), (to[1] - from[1]).clamp(-b, b)]
    }

    fn peg_action(&mut self, p: [f64; 2]) -> [f64; 2] {
        let cfg = &self.cfg;
        let hx = cfg.hole_x;
        let tol = 0.25 * cfg.hole_half_width;
        loop {
            match self.phase {
                Phase::Waypoint => {
                    let w = [hx + self.side * SIDE_OFFSET, cfg.insertion_height() + 0.2];
                    if (p[0] - w[0]).abs() <= tol && (p[1] - w[1]).abs() <= tol {
                        self.phase = Phase::Approach;
                        continue;
                    }
                    return self.toward(p, w);
                }
                Phase::Lift => {
                    if p[1] >= LIFT_HEIGHT - 1e-9 {
                        self.phase = Phase::Traverse;
                        continue;
                    }
                    return self.toward(p, [p[0], LIFT_HEIGHT]);
                }
                Phase::Traverse => {
                    if (p[0] - hx).abs() <= tol {
                        self.phase = Phase::Descend;
                        continue;
                    }
                    return self.toward(p, [hx, LIFT_HEIGHT]);
                }
                Phase::Approach => {
                    if (p[0] - hx).abs() <= tol {
                        self.phase = Phase::Descend;
                        continue;
                    }
                    return [self.toward(p, [hx, p[1]])[0], 0.0];
                }
                Phase::Descend => return [self.toward(p, [hx, p[1]])[0], -cfg.action_bound],
            }
        }
    }

    fn pick_action(&mut self, agent: [f64; 2], object: [f64; 2], attached: bool) -> [f64; 2] {
        let cfg = &self.cfg;
        let goal = cfg.pick_goal;
        let tol = 0.5 * cfg.goal_threshold;
        if !attached {
            return self.toward(agent, object);
        }
        loop {
            match self.phase {
                Phase::Waypoint => {
                    let w = [goal[0] + self.side * SIDE_OFFSET, goal[1] + 0.15];
                    if (agent[0] - w[0]).abs() <= tol && (agent[1] - w[1]).abs() <= tol {
                        self.phase = Phase::Approach;
                        continue;
                    }
                    return self.toward(agent, w);
                }
                Phase::Lift => {
                    if agent[1] >= LIFT_HEIGHT - 1e-9 {
                        self.phase = Phase::Traverse;
                        continue;
                    }
                    return self.toward(agent, [agent[0], LIFT_HEIGHT]);
                }
                Phase::Traverse => {
                    if (agent[0] - goal[0]).abs() <= tol {
                        self.phase = Phase::Descend;
                        continue;
                    }
                    return self.toward(agent, [goal[0], LIFT_HEIGHT]);
                }
                Phase::Approach | Phase::Descend => return self.toward(agent, goal),
            }
        }
    }
}

impl Policy for Demonstrator {
    fn reset(&mut self) {
        self.phase = self.initial_phase();
    }

    fn act(&mut self, obs: &[f64]) -> Vec<f64> {
        let a = if self.cfg.variant.is_peg() {
            self.peg_action([obs[0], obs[1]])
        } else {
            self.pick_action([obs[0], obs[1]], [obs[2], obs[3]], obs[4] > 0.5)
        };
        a.to_vec()
    }
}

/// Roll out `policy` from `start`, adding `noise[t]` to the action at step t
/// (no noise once the slice runs out), recording the applied (clipped) actions.
pub(crate) fn record_episode<P: Policy>(
    cfg: &EnvConfig,
    policy: &mut P,
    start: EnvState,
    noise: &[[f64; 2]],
) -> Result<(Vec<DemoPair>, EnvState), EnvError> {
    policy.reset();
    let mut pairs = Vec::with_capacity(cfg.horizon);
    let mut s = start;
    loop {
        let obs = cfg.observe(&s);
        let mut a = policy.act(&obs);
        if let Some(n) = noise.get(pairs.len()) {
            a[0] += n[0];
            a[1] += n[1];
        }
        let a = cfg.clip_action(&a);
        let out = cfg.step(&s, &a)?;
        pairs.push(DemoPair { state: obs, action: a.to_vec() });
        s = out.state;
        if out.done {
            return Ok((pairs, s));
        }
    }
}

/// Start reflected through the vertical line of the hole, if the free peg
/// variant is in use and the reflection stays in the workspace.
fn mirrored_start(cfg: &EnvConfig, start: EnvState) -> Option<EnvState> {
    let x = 2.0 * cfg.hole_x - start.agent[0];
    (cfg.variant == Variant::Peg2d && (0.0..=1.0).contains(&x)).then(|| {
        let agent = [x, start.agent[1]];
        EnvState { agent, object: agent, ..start }
    })
}

/// Generate a dataset. Pure function of its arguments.
pub fn generate_demos(
    cfg: &EnvConfig,
    kind: DemoKind,
    episodes: usize,
    noise: f64,
    seed: u64,
) -> Result<DemoDataset, DemoError> {
    if episodes == 0 {
        return Err(DemoError::InvalidRequest("episodes must be at least 1".into()));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(DemoError::InvalidRequest(format!("noise must be non-negative, got {noise}")));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise).expect("validated noise scale");
    let mut pairs = Vec::with_capacity(episodes * cfg.horizon);
    let mut kept = 0;
    let mut start = cfg.reset(0);
    let mut left_draws = vec![];
    while kept < episodes {
        let left = kept % 2 == 0;
        let side = if left { -1.0 } else { 1.0 };
        let mut draws: Vec<[f64; 2]> =
            (0..cfg.horizon).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
        // multimodal demonstrations come in left/right pairs: mirror images
        // on the free peg task, otherwise two detours from one start
        if kind != DemoKind::Multimodal || left {
            start = cfg.reset(rng.gen::<u64>());
            left_draws = draws.clone();
        } else if let Some(m) = mirrored_start(cfg, start) {
            start = m;
            draws = left_draws.iter().map(|d| [-d[0], d[1]]).collect();
        }
        let mut demo = Demonstrator::with_side(cfg, kind, side);
        let (ep, end) = record_episode(cfg, &mut demo, start, &draws)?;
        if kind == DemoKind::Optimal && !cfg.success(&end) {
            let (_, clean_end) = record_episode(cfg, &mut demo, start, &[])?;
            if !cfg.success(&clean_end) {
                return Err(DemoError::GenerationFailed { start: start.agent });
            }
            // noise pushed this rollout off course; draw another start
            continue;
        }
        pairs.extend(ep);
        kept += 1;
    }
    let injected = if kind == DemoKind::SuboptimalLift { push_away_pairs(cfg, PUSH_AWAY_PAIRS, &mut rng) } else { vec![] };
    let meta = DemoMeta { variant: cfg.variant, kind, episodes, noise, seed, injected: injected.len() };
    pairs.extend(injected);
    Ok(DemoDataset { meta, pairs })
}

/// Region the near-optimal trajectory passes through just before the goal:
/// the column above the hole (peg) or above the goal (pick-and-place).
pub fn corridor(cfg: &EnvConfig) -> ([f64; 2], [f64; 2]) {
    if cfg.variant.is_peg() {
        let z0 = cfg.holder_top + 2.0 * cfg.peg_half_length;
        ([cfg.hole_x - cfg.hole_half_width, cfg.hole_x + cfg.hole_half_width], [z0, z0 + 0.4])
    } else {
        let g = cfg.pick_goal;
        let r = cfg.goal_threshold;
        ([g[0] - r, g[0] + r], [g[1] + 0.05, g[1] + 0.45])
    }
}

fn push_away_pairs<R: Rng>(cfg: &EnvConfig, n: usize, rng: &mut R) -> Vec<DemoPair> {
    let (xr, zr) = corridor(cfg);
    let target = if cfg.variant.is_peg() { cfg.hole_mouth() } else { cfg.pick_goal };
    (0..n)
        .map(|_| {
            let p = [rng.gen_range(xr[0]..=xr[1]), rng.gen_range(zr[0]..=zr[1])];
            let d = [target[0] - p[0], target[1] - p[1]];
            let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
            let d = [d[0] / norm, d[1] / norm];
            let angle = rng.gen_range(90f64..=135.0).to_radians();
            // rotate towards the side of the column the state is on
            let away = if p[0] > target[0] {
                1.0
            } else if p[0] < target[0] {
                -1.0
            } else if rng.gen::<bool>() {
                1.0
            } else {
                -1.0
            };
            // counter-clockwise rotation of the downward-pointing direction
            // swings it to the right; clockwise to the left
            let theta = -away * angle;
            let (s, c) = theta.sin_cos();
            let dir = [d[0] * c - d[1] * s, d[0] * s + d[1] * c];
            let action = cfg.clip_action(&[dir[0] * cfg.action_bound, dir[1] * cfg.action_bound]).to_vec();
            let state = if cfg.variant.is_peg() { p.to_vec() } else { vec![p[0], p[1], p[0], p[1], 1.0] };
            DemoPair { state, action }
        })
        .collect()
}

/// Noise-free optimal path from the task's fixed start, used to locate the
/// corridor the injected pairs conflict with.
pub fn reference_path(cfg: &EnvConfig) -> Result<Vec<[f64; 2]>, DemoError> {
    let mut fixed = cfg.clone();
    if fixed.variant == Variant::Peg2d {
        fixed.variant = Variant::Peg2dFixedStart;
    }
    let start = fixed.reset(0);
    let mut demo = Demonstrator::new(&fixed, DemoKind::Optimal);
    let (pairs, end) = record_episode(&fixed, &mut demo, start, &[])?;
    let mut path: Vec<[f64; 2]> = pairs.iter().map(|p| [p.state[0], p.state[1]]).collect();
    path.push(end.agent);
    Ok(path)
}

/// Distance from a point to a polyline.
pub fn distance_to_path(p: [f64; 2], path: &[[f64; 2]]) -> f64 {
    path.windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let ab = [b[0] - a[0], b[1] - a[1]];
            let len2 = ab[0] * ab[0] + ab[1] * ab[1];
            let t = if len2 == 0.0 { 0.0 } else { (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0) };
            crate::env::dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
        })
        .fold(f64::INFINITY, f64::min)
}
