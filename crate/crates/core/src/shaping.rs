//! Potential functions, the shaped reward and a tabular oracle.
//!
//! With a state-action potential the shaped reward is
//! `r̃ = r + γ·Φ(s', a') − Φ(s, a)`. The optimal shaped values then satisfy
//! `Q̃*(s, a) + Φ(s, a) = Q*(s, a)`, so acting greedily on `Q̃ + Φ` recovers
//! the optimal policy while acting on `Q̃` alone may not. The tabular code
//! here checks that identity on small deterministic MDPs.

use crate::flow::{FlowError, FlowModel};
use crate::gan::{GanError, GanModel};
use std::collections::VecDeque;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ShapingError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error("tabular index ({s}, {a}) out of range")]
    OutOfRange { s: usize, a: usize },
    #[error("invalid mdp: {0}")]
    InvalidMdp(String),
    #[error("value iteration did not converge in {0} sweeps")]
    NoConvergence(usize),
}

/// A frozen potential `Φ(s, a)`.
#[derive(Debug, Clone)]
pub enum Potential {
    /// `Φ ≡ 0`, the unshaped baseline.
    Zero,
    /// `c · log(p(s ⊕ a) + ε)`.
    Flow { model: Arc<FlowModel>, scale: f64, floor: f64 },
    /// `c · D(s ⊕ a)`.
    Gan { model: Arc<GanModel>, scale: f64 },
    /// Table indexed by `s[0]` and `a[0]` read as integers.
    Tabular { table: Arc<Vec<Vec<f64>>> },
}

impl Potential {
    pub fn is_zero(&self) -> bool {
        matches!(self, Potential::Zero)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Potential::Zero => "zero",
            Potential::Flow { .. } => "flow",
            Potential::Gan { .. } => "gan",
            Potential::Tabular { .. } => "tabular",
        }
    }

    fn table_entry(table: &[Vec<f64>], s: &[f64], a: &[f64]) -> Result<f64, ShapingError> {
        let (si, ai) = (s[0] as usize, a[0] as usize);
        table.get(si).and_then(|row| row.get(ai)).copied().ok_or(ShapingError::OutOfRange { s: si, a: ai })
    }

    pub fn value(&self, s: &[f64], a: &[f64]) -> Result<f64, ShapingError> {
        Ok(match self {
            Potential::Zero => 0.0,
            Potential::Flow { model, scale, floor } => model.potential(*scale, *floor, s, a)?,
            Potential::Gan { model, scale } => model.potential(*scale, s, a)?,
            Potential::Tabular { table } => Self::table_entry(table, s, a)?,
        })
    }

    /// `Φ(s, a)` and `∇ₐΦ(s, a)`. Tabular potentials are piecewise constant
    /// and report a zero gradient.
    pub fn value_and_action_grad(&self, s: &[f64], a: &[f64]) -> Result<(f64, Vec<f64>), ShapingError> {
        Ok(match self {
            Potential::Zero => (0.0, vec![0.0; a.len()]),
            Potential::Flow { model, scale, floor } => model.potential_action_grad(*scale, *floor, s, a)?,
            Potential::Gan { model, scale } => model.potential_action_grad(*scale, s, a)?,
            Potential::Tabular { table } => (Self::table_entry(table, s, a)?, vec![0.0; a.len()]),
        })
    }
}

/// `r + γ·Φ(s', a') − Φ(s, a)`.
pub fn shaped_reward(
    phi: &Potential,
    s: &[f64],
    a: &[f64],
    r: f64,
    s_next: &[f64],
    a_next: &[f64],
    gamma: f64,
) -> Result<f64, ShapingError> {
    if phi.is_zero() {
        return Ok(r);
    }
    Ok(r + gamma * phi.value(s_next, a_next)? - phi.value(s, a)?)
}

/// Deterministic finite MDP. Terminal states are absorbing with zero value.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub next: Vec<Vec<usize>>,
    pub reward: Vec<Vec<f64>>,
    pub gamma: f64,
    pub terminal: Vec<bool>,
}

const MAX_SWEEPS: usize = 1_000_000;
const TOL: f64 = 1e-12;

impl TabularMdp {
    pub fn new(next: Vec<Vec<usize>>, reward: Vec<Vec<f64>>, gamma: f64, terminal: Vec<bool>) -> Result<Self, ShapingError> {
        let m = Self { next, reward, gamma, terminal };
        m.validate()?;
        Ok(m)
    }

    pub fn n_states(&self) -> usize {
        self.next.len()
    }

    pub fn n_actions(&self) -> usize {
        self.next.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<(), ShapingError> {
        let bad = |m: &str| Err(ShapingError::InvalidMdp(m.to_string()));
        let (s, a) = (self.n_states(), self.n_actions());
        if s == 0 || a == 0 {
            return bad("needs at least one state and one action");
        }
        if self.reward.len() != s || self.terminal.len() != s {
            return bad("reward and terminal tables must cover every state");
        }
        for (row, rrow) in self.next.iter().zip(&self.reward) {
            if row.len() != a || rrow.len() != a {
                return bad("every state needs the same number of actions");
            }
            if row.iter().any(|&n| n >= s) {
                return bad("transition out of range");
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("discount must lie in (0, 1)");
        }
        Ok(())
    }

    /// Square gridworld with four moves (up, down, left, right); moves into a
    /// wall stay put. Entering `goal` pays 1 and ends the episode.
    pub fn gridworld(side: usize, goal: usize, gamma: f64) -> Result<Self, ShapingError> {
        let n = side * side;
        let mut next = Vec::with_capacity(n);
        let mut reward = Vec::with_capacity(n);
        for s in 0..n {
            let (r, c) = (s / side, s % side);
            let moves = [
                if r > 0 { s - side } else { s },
                if r + 1 < side { s + side } else { s },
                if c > 0 { s - 1 } else { s },
                if c + 1 < side { s + 1 } else { s },
            ];
            reward.push(moves.iter().map(|&m| if m == goal && s != goal { 1.0 } else { 0.0 }).collect());
            next.push(moves.to_vec());
        }
        let mut terminal = vec![false; n];
        terminal[goal] = true;
        Self::new(next, reward, gamma, terminal)
    }

    /// Step distance from every state to the nearest terminal state.
    pub fn distance_to_terminal(&self) -> Vec<Option<usize>> {
        let n = self.n_states();
        let mut preds = vec![Vec::new(); n];
        for (s, row) in self.next.iter().enumerate() {
            for &t in row {
                preds[t].push(s);
            }
        }
        let mut dist = vec![None; n];
        let mut queue = VecDeque::new();
        for s in (0..n).filter(|&s| self.terminal[s]) {
            dist[s] = Some(0);
            queue.push_back(s);
        }
        while let Some(t) = queue.pop_front() {
            let d = dist[t].unwrap();
            for &p in &preds[t] {
                if dist[p].is_none() && !self.terminal[p] {
                    dist[p] = Some(d + 1);
                    queue.push_back(p);
                }
            }
        }
        dist
    }
}

/// Index of the largest value; values within `1e-9` of the maximum count as
/// ties and the lowest index wins.
pub fn argmax(values: &[f64]) -> usize {
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values.iter().position(|&v| v >= best - 1e-9).unwrap_or(0)
}

/// Optimal action values by value iteration.
pub fn q_star(mdp: &TabularMdp) -> Result<Vec<Vec<f64>>, ShapingError> {
    let zero = vec![vec![0.0; mdp.n_actions()]; mdp.n_states()];
    q_shaped(mdp, &zero)
}

/// Fixed point of the look-ahead advice backup
/// `Q̃(s, a) ← R + γ·(Φ(s', a*) + Q̃(s', a*)) − Φ(s, a)` with
/// `a* = argmax (Q̃ + Φ)(s', ·)`. Terminal states hold `Q̃ = −Φ`.
pub fn q_shaped(mdp: &TabularMdp, phi: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ShapingError> {
    mdp.validate()?;
    if phi.len() != mdp.n_states() || phi.iter().any(|r| r.len() != mdp.n_actions()) {
        return Err(ShapingError::InvalidMdp("potential table shape differs from the mdp".into()));
    }
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut q: Vec<Vec<f64>> = (0..ns)
        .map(|s| if mdp.terminal[s] { phi[s].iter().map(|p| -p).collect() } else { vec![0.0; na] })
        .collect();
    // advised value of each state under the current table
    let advised = |q: &[Vec<f64>], s: usize| -> f64 {
        if mdp.terminal[s] {
            return 0.0;
        }
        let total: Vec<f64> = q[s].iter().zip(&phi[s]).map(|(q, p)| q + p).collect();
        total[argmax(&total)]
    };
    for _ in 0..MAX_SWEEPS {
        let values: Vec<f64> = (0..ns).map(|s| advised(&q, s)).collect();
        let mut delta: f64 = 0.0;
        for s in (0..ns).filter(|&s| !mdp.terminal[s]) {
            for a in 0..na {
                let new = mdp.reward[s][a] + mdp.gamma * values[mdp.next[s][a]] - phi[s][a];
                delta = delta.max((new - q[s][a]).abs());
                q[s][a] = new;
            }
        }
        if delta < TOL {
            return Ok(q);
        }
    }
    Err(ShapingError::NoConvergence(MAX_SWEEPS))
}
