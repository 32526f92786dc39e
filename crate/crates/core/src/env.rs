//! Sparse-reward 2D manipulation tasks.
//!
//! Two tasks share one stepping contract: a peg carried by a point agent that
//! has to be pushed into a slot between two holder blocks, and a point agent
//! that picks up an object and carries it to a fixed goal. Rewards are `0` on
//! success and `-1` otherwise, episodes always run for `horizon` steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("episode already finished after {0} steps")]
    EpisodeFinished(usize),
    #[error("action must be finite and two-dimensional, got {0:?}")]
    BadAction(Vec<f64>),
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "peg-2d")]
    Peg2d,
    #[serde(rename = "peg-2d-fixed-start")]
    Peg2dFixedStart,
    #[serde(rename = "pickplace-2d")]
    PickPlace2d,
}

impl Variant {
    pub fn is_peg(self) -> bool {
        matches!(self, Variant::Peg2d | Variant::Peg2dFixedStart)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Peg2d => "peg-2d",
            Variant::Peg2dFixedStart => "peg-2d-fixed-start",
            Variant::PickPlace2d => "pickplace-2d",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "peg-2d" => Ok(Variant::Peg2d),
            "peg-2d-fixed-start" => Ok(Variant::Peg2dFixedStart),
            "pickplace-2d" => Ok(Variant::PickPlace2d),
            other => Err(EnvError::InvalidConfig(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub variant: Variant,
    pub horizon: usize,
    /// Per-axis bound on the displacement commanded in one step.
    pub action_bound: f64,
    pub hole_x: f64,
    pub hole_half_width: f64,
    pub holder_top: f64,
    /// Horizontal extent of each holder block.
    pub holder_width: f64,
    pub peg_half_length: f64,
    /// Minimum distance between a random peg start and the hole mouth.
    pub reset_min_distance: f64,
    /// Height band of the peg start region.
    pub reset_z: [f64; 2],
    pub fixed_start: [f64; 2],
    pub pick_start: [f64; 2],
    pub pick_goal: [f64; 2],
    pub goal_threshold: f64,
    pub attach_radius: f64,
    pub object_min_distance: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Peg2d,
            horizon: 40,
            action_bound: 0.05,
            hole_x: 0.5,
            hole_half_width: 0.04,
            holder_top: 0.2,
            holder_width: 0.2,
            peg_half_length: 0.05,
            reset_min_distance: 0.3,
            reset_z: [0.4, 0.95],
            fixed_start: [0.1, 0.8],
            pick_start: [0.2, 0.8],
            pick_goal: [0.8, 0.2],
            goal_threshold: 0.03,
            attach_radius: 0.02,
            object_min_distance: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub agent: [f64; 2],
    pub object: [f64; 2],
    pub attached: bool,
    pub t: usize,
}

/// Anything that maps observations to actions. Scripted controllers keep
/// per-episode phase, so acting takes `&mut self`.
pub trait Policy {
    fn reset(&mut self) {}
    fn act(&mut self, obs: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
}

impl EnvConfig {
    pub fn with_variant(variant: Variant) -> Self {
        Self { variant, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let positive = [
            ("action_bound", self.action_bound),
            ("hole_half_width", self.hole_half_width),
            ("holder_top", self.holder_top),
            ("holder_width", self.holder_width),
            ("peg_half_length", self.peg_half_length),
            ("goal_threshold", self.goal_threshold),
            ("attach_radius", self.attach_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(EnvError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.horizon == 0 {
            return Err(EnvError::InvalidConfig("horizon must be at least 1".into()));
        }
        if self.hole_x - self.hole_half_width <= 0.0 || self.hole_x + self.hole_half_width >= 1.0 {
            return Err(EnvError::InvalidConfig("hole must fit inside the workspace".into()));
        }
        if self.holder_top + 2.0 * self.peg_half_length >= self.reset_z[0] || self.reset_z[0] > self.reset_z[1] {
            return Err(EnvError::InvalidConfig("reset band must lie above the holder".into()));
        }
        if self.reset_z[1] > 1.0 {
            return Err(EnvError::InvalidConfig("reset band must lie inside the workspace".into()));
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        if self.variant.is_peg() {
            2
        } else {
            5
        }
    }

    pub fn act_dim(&self) -> usize {
        2
    }

    /// Point the random peg starts keep their distance from.
    pub fn hole_mouth(&self) -> [f64; 2] {
        [self.hole_x, self.holder_top]
    }

    /// Highest agent height at which more than half of the peg is in the slot.
    pub fn insertion_height(&self) -> f64 {
        self.holder_top + self.peg_half_length
    }

    /// Horizontal extents of the two holder blocks.
    pub fn blocks(&self) -> [(f64, f64); 2] {
        let l1 = self.hole_x - self.hole_half_width;
        let r0 = self.hole_x + self.hole_half_width;
        [((l1 - self.holder_width).max(0.0), l1), (r0, (r0 + self.holder_width).min(1.0))]
    }

    fn peg_length(&self) -> f64 {
        2.0 * self.peg_half_length
    }

    pub fn reset(&self, seed: u64) -> EnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self.variant {
            Variant::Peg2d => {
                let mouth = self.hole_mouth();
                loop {
                    let p = [rng.gen_range(0.05..0.95), rng.gen_range(self.reset_z[0]..=self.reset_z[1])];
                    if dist(p, mouth) >= self.reset_min_distance {
                        return EnvState { agent: p, object: p, attached: false, t: 0 };
                    }
                }
            }
            Variant::Peg2dFixedStart => {
                EnvState { agent: self.fixed_start, object: self.fixed_start, attached: false, t: 0 }
            }
            Variant::PickPlace2d => loop {
                let o = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
                if dist(o, self.pick_start) >= self.object_min_distance
                    && dist(o, self.pick_goal) >= self.object_min_distance
                {
                    return EnvState { agent: self.pick_start, object: o, attached: false, t: 0 };
                }
            },
        }
    }

    pub fn observe(&self, s: &EnvState) -> Vec<f64> {
        if self.variant.is_peg() {
            s.agent.to_vec()
        } else {
            vec![s.agent[0], s.agent[1], s.object[0], s.object[1], if s.attached { 1.0 } else { 0.0 }]
        }
    }

    pub fn clip_action(&self, a: &[f64]) -> [f64; 2] {
        let b = self.action_bound;
        [a[0].clamp(-b, b), a[1].clamp(-b, b)]
    }

    pub fn step(&self, s: &EnvState, action: &[f64]) -> Result<StepOutcome, EnvError> {
        if s.t >= self.horizon {
            return Err(EnvError::EpisodeFinished(s.t));
        }
        if action.len() != 2 || action.iter().any(|v| !v.is_finite()) {
            return Err(EnvError::BadAction(action.to_vec()));
        }
        let a = self.clip_action(action);
        let mut next = *s;
        next.t += 1;
        if self.variant.is_peg() {
            let x = self.sweep_x(s.agent[0], s.agent[1], s.agent[0] + a[0]);
            let z = self.sweep_z(x, s.agent[1] + a[1]);
            next.agent = [x, z];
            next.object = next.agent;
        } else {
            next.agent = [(s.agent[0] + a[0]).clamp(0.0, 1.0), (s.agent[1] + a[1]).clamp(0.0, 1.0)];
            if !next.attached && dist(next.agent, next.object) <= self.attach_radius {
                next.attached = true;
            }
            if next.attached {
                next.object = next.agent;
            }
        }
        let reward = if self.success(&next) { 0.0 } else { -1.0 };
        Ok(StepOutcome { state: next, reward, done: next.t >= self.horizon })
    }

    /// Horizontal motion at fixed height, stopped by block faces while the peg
    /// reaches below the holder top.
    fn sweep_x(&self, x: f64, z: f64, target: f64) -> f64 {
        let mut target = target.clamp(0.0, 1.0);
        if z - self.peg_length() < self.holder_top {
            for (b0, b1) in self.blocks() {
                if target > x && x <= b0 && target > b0 {
                    target = b0;
                }
                if target < x && x >= b1 && target < b1 {
                    target = b1;
                }
            }
        }
        target
    }

    /// Vertical motion at fixed horizontal position: the peg tip rests on the
    /// floor, or on a block top when the agent is above a block.
    fn sweep_z(&self, x: f64, target: f64) -> f64 {
        let mut lower = self.peg_length();
        if self.blocks().iter().any(|&(b0, b1)| b0 < x && x < b1) {
            lower = self.holder_top + self.peg_length();
        }
        target.min(1.0).max(lower)
    }

    /// Whether the peg (or agent) overlaps solid material or leaves the
    /// workspace.
    pub fn penetrates(&self, s: &EnvState) -> bool {
        let [x, z] = s.agent;
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&z) {
            return true;
        }
        if !self.variant.is_peg() {
            return false;
        }
        let tip = z - self.peg_length();
        if tip < -1e-12 {
            return true;
        }
        tip < self.holder_top - 1e-12 && self.blocks().iter().any(|&(b0, b1)| b0 < x && x < b1)
    }

    pub fn success(&self, s: &EnvState) -> bool {
        if self.variant.is_peg() {
            let x = s.agent[0];
            x >= self.hole_x - self.hole_half_width
                && x <= self.hole_x + self.hole_half_width
                && s.agent[1] <= self.insertion_height()
        } else {
            dist(s.object, self.pick_goal) <= self.goal_threshold
        }
    }
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}
