//! TD3 with potential-based shaping, plus the baselines it is compared with:
//! plain TD3, behavioral cloning and λTD3+BC.
//!
//! Critics see `(s, a / bound)` so both input blocks have comparable scale.
//! The replay buffer stores raw rewards; shaping happens inside the critic
//! update, with the smoothed target action standing in for the look-ahead
//! action `a'`.

use crate::demos::{DemoDataset, DemoPair};
use crate::env::{EnvConfig, EnvError, Policy};
use crate::nn::{polyak_update, Activation, Adam, Mlp, NnError, OutputActivation};
use crate::shaping::{Potential, ShapingError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("non-finite loss at update {update}: critic {critic_loss}, actor {actor_loss:?}")]
    NonFinite { update: u64, critic_loss: f64, actor_loss: Option<f64> },
    #[error("invalid agent config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Shaping(#[from] ShapingError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Td3Config {
    pub gamma: f64,
    pub tau: f64,
    /// Exploration noise σ as a fraction of the action bound.
    pub expl_noise: f64,
    /// Target smoothing noise σ' as a fraction of the action bound.
    pub target_noise: f64,
    /// Clip δ of the target smoothing noise, as a fraction of the bound.
    pub noise_clip: f64,
    pub policy_delay: u64,
    pub batch_size: usize,
    pub demo_batch_size: usize,
    pub buffer_capacity: usize,
    /// Exploration episodes per outer iteration (E).
    pub episodes_per_iter: usize,
    /// Updates per outer iteration (B).
    pub updates_per_iter: usize,
    pub total_episodes: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub hidden: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            expl_noise: 0.1,
            target_noise: 0.2,
            noise_clip: 0.5,
            policy_delay: 2,
            batch_size: 128,
            demo_batch_size: 64,
            buffer_capacity: 100_000,
            episodes_per_iter: 10,
            updates_per_iter: 400,
            total_episodes: 200,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            hidden: 64,
            eval_every: 10,
            eval_episodes: 20,
        }
    }
}

impl Td3Config {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::InvalidConfig(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(self.expl_noise >= 0.0) || !(self.target_noise >= 0.0) {
            return bad("noise scales must be non-negative");
        }
        if !(self.noise_clip > 0.0) {
            return bad("noise clip must be positive");
        }
        if self.policy_delay == 0 {
            return bad("policy delay must be at least 1");
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.hidden == 0 {
            return bad("batch size, buffer capacity and hidden width must be positive");
        }
        if self.episodes_per_iter == 0 || self.eval_every == 0 || self.eval_episodes == 0 {
            return bad("episodes per iteration and evaluation cadence must be positive");
        }
        if !(self.actor_lr > 0.0) || !(self.critic_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    /// Raw environment reward.
    pub r: f64,
    pub s2: Vec<f64>,
    pub done: bool,
}

/// Fixed-capacity FIFO replay memory.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self { capacity, items: Vec::new(), next: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform draw with replacement.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<&Transition> {
        (0..n).map(|_| &self.items[rng.gen_range(0..self.items.len())]).collect()
    }
}

/// Deterministic actor network used as an environment policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorPolicy {
    pub net: Mlp,
}

impl ActorPolicy {
    pub fn action(&self, obs: &[f64]) -> Vec<f64> {
        self.net.forward(obs).expect("observation matches actor input")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        self.net.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        Ok(Self { net: Mlp::load(path)? })
    }
}

impl Policy for ActorPolicy {
    fn act(&mut self, obs: &[f64]) -> Vec<f64> {
        self.action(obs)
    }
}

fn actor_net<R: Rng>(obs: usize, act: usize, hidden: usize, bound: f64, rng: &mut R) -> Mlp {
    Mlp::new(&[obs, hidden, hidden, act], Activation::Relu, OutputActivation::TanhScaled { bound }, rng)
}

/// Actor output plus Gaussian noise of standard deviation `sigma`, clipped to
/// `[−bound, bound]`.
pub fn select_action<R: Rng>(actor: &Mlp, s: &[f64], sigma: f64, bound: f64, rng: &mut R) -> Vec<f64> {
    let mut a = actor.forward(s).expect("observation matches actor input");
    if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).expect("finite noise scale");
        for v in &mut a {
            *v += n.sample(rng);
        }
    }
    a.iter().map(|v| v.clamp(-bound, bound)).collect()
}

/// `r̃ + γ·(1 − done)·min(q₁, q₂)`.
pub fn td3_target(shaped_reward: f64, gamma: f64, done: bool, q1: f64, q2: f64) -> f64 {
    let bootstrap = if done { 0.0 } else { 1.0 };
    shaped_reward + gamma * bootstrap * q1.min(q2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    /// Present on delayed actor updates.
    pub actor_loss: Option<f64>,
}

/// Actor, twin critics, their targets and optimizers.
#[derive(Debug, Clone, PartialEq)]
pub struct Td3Agent {
    pub actor: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub actor_target: Mlp,
    pub critic1_target: Mlp,
    pub critic2_target: Mlp,
    actor_opt: Adam,
    critic1_opt: Adam,
    critic2_opt: Adam,
    bound: f64,
    obs_dim: usize,
    updates: u64,
    rng: ChaCha8Rng,
}

impl Td3Agent {
    pub fn new(obs_dim: usize, act_dim: usize, bound: f64, cfg: &Td3Config, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let actor = actor_net(obs_dim, act_dim, cfg.hidden, bound, &mut rng);
        let critic = |rng: &mut ChaCha8Rng| {
            Mlp::new(&[obs_dim + act_dim, cfg.hidden, cfg.hidden, 1], Activation::Relu, OutputActivation::Identity, rng)
        };
        let critic1 = critic(&mut rng);
        let critic2 = critic(&mut rng);
        Self {
            actor_opt: Adam::new(actor.params().len(), cfg.actor_lr),
            critic1_opt: Adam::new(critic1.params().len(), cfg.critic_lr),
            critic2_opt: Adam::new(critic2.params().len(), cfg.critic_lr),
            actor_target: actor.clone(),
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            actor,
            critic1,
            critic2,
            bound,
            obs_dim,
            updates: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7d3),
        }
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn policy(&self) -> ActorPolicy {
        ActorPolicy { net: self.actor.clone() }
    }

    /// Critic input `(s, a / bound)`.
    pub fn critic_input(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        s.iter().copied().chain(a.iter().map(|v| v / self.bound)).collect()
    }

    pub fn q1(&self, s: &[f64], a: &[f64]) -> f64 {
        self.critic1.forward(&self.critic_input(s, a)).expect("critic input")[0]
    }

    /// Smoothed, clipped target action at `s2`.
    fn target_action(&mut self, s2: &[f64], cfg: &Td3Config) -> Result<Vec<f64>, AgentError> {
        let mut a = self.actor_target.forward(s2)?;
        let (sigma, clip) = (cfg.target_noise * self.bound, cfg.noise_clip * self.bound);
        for v in &mut a {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            *v = (*v + (sigma * z).clamp(-clip, clip)).clamp(-self.bound, self.bound);
        }
        Ok(a)
    }

    /// Critic targets `y` for a batch, drawing fresh smoothing noise.
    pub fn targets(&mut self, batch: &[&Transition], phi: &Potential, cfg: &Td3Config) -> Result<Vec<f64>, AgentError> {
        batch
            .iter()
            .map(|t| {
                let a2 = self.target_action(&t.s2, cfg)?;
                let x2 = self.critic_input(&t.s2, &a2);
                let q1 = self.critic1_target.forward(&x2)?[0];
                let q2 = self.critic2_target.forward(&x2)?[0];
                let r = if phi.is_zero() {
                    t.r
                } else if t.done {
                    // terminal states carry zero potential
                    t.r - phi.value(&t.s, &t.a)?
                } else {
                    crate::shaping::shaped_reward(phi, &t.s, &t.a, t.r, &t.s2, &a2, cfg.gamma)?
                };
                Ok(td3_target(r, cfg.gamma, t.done, q1, q2))
            })
            .collect()
    }

    /// One squared-error step of both critics toward `y`; returns the mean of
    /// the two losses.
    fn critic_step(&mut self, batch: &[&Transition], y: &[f64]) -> Result<f64, AgentError> {
        let n = batch.len() as f64;
        let mut g1 = vec![0.0; self.critic1.params().len()];
        let mut g2 = vec![0.0; self.critic2.params().len()];
        let mut loss = 0.0;
        for (t, &y) in batch.iter().zip(y) {
            let x = self.critic_input(&t.s, &t.a);
            let tape = self.critic1.tape(&x)?;
            let e = tape.output()[0] - y;
            loss += e * e / n;
            self.critic1.backward(&tape, &[2.0 * e / n], Some(&mut g1));
            let tape = self.critic2.tape(&x)?;
            let e = tape.output()[0] - y;
            loss += e * e / n;
            self.critic2.backward(&tape, &[2.0 * e / n], Some(&mut g2));
        }
        self.critic1_opt.step(self.critic1.params_mut(), &g1)?;
        self.critic2_opt.step(self.critic2.params_mut(), &g2)?;
        Ok(loss / 2.0)
    }

    /// Accumulate `weight ×` the actor gradient of `−(Q₁(s, π(s)) + Φ(s, π(s)))`.
    fn shaped_actor_grad(&self, s: &[f64], phi: &Potential, weight: f64, grad: &mut [f64]) -> Result<f64, AgentError> {
        let tape = self.actor.tape(s)?;
        let a = tape.output().to_vec();
        let (q, dx) = self.critic1.input_grad(&self.critic_input(s, &a), &[-weight])?;
        let mut da: Vec<f64> = dx[self.obs_dim..].iter().map(|v| v / self.bound).collect();
        let mut objective = q[0];
        if !phi.is_zero() {
            let (p, dp) = phi.value_and_action_grad(s, &a)?;
            objective += p;
            for (d, g) in da.iter_mut().zip(dp) {
                *d -= weight * g;
            }
        }
        self.actor.backward(&tape, &da, Some(grad));
        Ok(objective)
    }

    /// Policy objective `mean[Q₁(s, π(s)) + Φ(s, π(s))]` over replay and demo
    /// states, with the actor gradient of its negation.
    pub fn actor_objective(&self, states: &[&[f64]], phi: &Potential) -> Result<(f64, Vec<f64>), AgentError> {
        let w = 1.0 / states.len() as f64;
        let mut grad = vec![0.0; self.actor.params().len()];
        let mut total = 0.0;
        for s in states {
            total += w * self.shaped_actor_grad(s, phi, w, &mut grad)?;
        }
        Ok((total, grad))
    }

    /// λTD3+BC actor loss `−λ·mean Q₁(s, π(s)) + mean ‖(π(s_d) − a_d)/bound‖²`
    /// and its gradient. The regression term is in bound units, like the
    /// critic's action input, so λ means the same for any action scale.
    pub fn td3_bc_actor_loss(&self, states: &[&[f64]], demos: &[&DemoPair], lambda: f64) -> Result<(f64, Vec<f64>), AgentError> {
        let mut grad = vec![0.0; self.actor.params().len()];
        let mut loss = 0.0;
        if !states.is_empty() {
            let w = lambda / states.len() as f64;
            for s in states {
                loss -= w * self.shaped_actor_grad(s, &Potential::Zero, w, &mut grad)?;
            }
        }
        if !demos.is_empty() {
            let w = 1.0 / demos.len() as f64;
            for d in demos {
                let tape = self.actor.tape(&d.state)?;
                let diff: Vec<f64> = tape.output().iter().zip(&d.action).map(|(p, a)| (p - a) / self.bound).collect();
                loss += w * diff.iter().map(|v| v * v).sum::<f64>();
                let dy: Vec<f64> = diff.iter().map(|v| 2.0 * w * v / self.bound).collect();
                self.actor.backward(&tape, &dy, Some(&mut grad));
            }
        }
        Ok((loss, grad))
    }

    fn soft_update_targets(&mut self, tau: f64) -> Result<(), AgentError> {
        polyak_update(self.actor_target.params_mut(), self.actor.params(), tau)?;
        polyak_update(self.critic1_target.params_mut(), self.critic1.params(), tau)?;
        polyak_update(self.critic2_target.params_mut(), self.critic2.params(), tau)?;
        Ok(())
    }

    fn check(&self, critic_loss: f64, actor_loss: Option<f64>) -> Result<UpdateStats, AgentError> {
        if !critic_loss.is_finite() || actor_loss.is_some_and(|l| !l.is_finite()) {
            return Err(AgentError::NonFinite { update: self.updates, critic_loss, actor_loss });
        }
        Ok(UpdateStats { critic_loss, actor_loss })
    }

    /// Shaped TD3 update: shaped critic targets, and every `d`-th call an
    /// actor step on `Q₁ + Φ` over replay and demo states followed by Polyak
    /// averaging of all targets.
    pub fn td3_update(
        &mut self,
        batch: &[&Transition],
        demo_states: &[&[f64]],
        phi: &Potential,
        cfg: &Td3Config,
    ) -> Result<UpdateStats, AgentError> {
        let y = self.targets(batch, phi, cfg)?;
        let critic_loss = self.critic_step(batch, &y)?;
        self.updates += 1;
        let mut actor_loss = None;
        if self.updates % cfg.policy_delay == 0 {
            let states: Vec<&[f64]> = batch.iter().map(|t| t.s.as_slice()).chain(demo_states.iter().copied()).collect();
            let (objective, grad) = self.actor_objective(&states, phi)?;
            self.actor_opt.step(self.actor.params_mut(), &grad)?;
            self.soft_update_targets(cfg.tau)?;
            actor_loss = Some(-objective);
        }
        self.check(critic_loss, actor_loss)
    }

    /// λTD3+BC update: unshaped critics; the actor mixes the critic value with
    /// a regression penalty on demonstration pairs.
    pub fn td3_bc_update(
        &mut self,
        batch: &[&Transition],
        demos: &[&DemoPair],
        lambda: f64,
        cfg: &Td3Config,
    ) -> Result<UpdateStats, AgentError> {
        let y = self.targets(batch, &Potential::Zero, cfg)?;
        let critic_loss = self.critic_step(batch, &y)?;
        self.updates += 1;
        let mut actor_loss = None;
        if self.updates % cfg.policy_delay == 0 {
            let states: Vec<&[f64]> = batch.iter().map(|t| t.s.as_slice()).collect();
            let (loss, grad) = self.td3_bc_actor_loss(&states, demos, lambda)?;
            self.actor_opt.step(self.actor.params_mut(), &grad)?;
            self.soft_update_targets(cfg.tau)?;
            actor_loss = Some(loss);
        }
        self.check(critic_loss, actor_loss)
    }

    /// Textbook TD3 update without shaping or demonstrations.
    pub fn plain_td3_update(&mut self, batch: &[&Transition], cfg: &Td3Config) -> Result<UpdateStats, AgentError> {
        let w = 1.0 / batch.len() as f64;
        let (sigma, clip, bound) = (cfg.target_noise * self.bound, cfg.noise_clip * self.bound, self.bound);
        let mut y = Vec::with_capacity(batch.len());
        for t in batch {
            let mut a2 = self.actor_target.forward(&t.s2)?;
            for v in &mut a2 {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                *v = (*v + (sigma * z).clamp(-clip, clip)).clamp(-bound, bound);
            }
            let x2 = self.critic_input(&t.s2, &a2);
            let q = self.critic1_target.forward(&x2)?[0].min(self.critic2_target.forward(&x2)?[0]);
            let bootstrap = if t.done { 0.0 } else { 1.0 };
            y.push(t.r + cfg.gamma * bootstrap * q);
        }
        let critic_loss = self.critic_step(batch, &y)?;
        self.updates += 1;
        let mut actor_loss = None;
        if self.updates % cfg.policy_delay == 0 {
            let mut grad = vec![0.0; self.actor.params().len()];
            let mut q_mean = 0.0;
            for t in batch {
                let tape = self.actor.tape(&t.s)?;
                let (q, dx) = self.critic1.input_grad(&self.critic_input(&t.s, tape.output()), &[-w])?;
                q_mean += w * q[0];
                let da: Vec<f64> = dx[self.obs_dim..].iter().map(|v| v / bound).collect();
                self.actor.backward(&tape, &da, Some(&mut grad));
            }
            self.actor_opt.step(self.actor.params_mut(), &grad)?;
            self.soft_update_targets(cfg.tau)?;
            actor_loss = Some(-q_mean);
        }
        self.check(critic_loss, actor_loss)
    }
}

/// Which update rule drives training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Learner {
    /// Shaped TD3; demo states join the actor batch when demos are given.
    Td3Shaped,
    /// Plain TD3; ignores the potential and the demos.
    Td3,
    Td3Bc { lambda: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub success_rate: f64,
    pub mean_return: f64,
}

/// One point of a learning curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub eval_index: usize,
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
}

/// Deterministic rollouts. An episode succeeds if any step succeeds; the
/// return sums raw rewards.
pub fn evaluate<P: Policy>(policy: &mut P, env: &EnvConfig, episodes: usize, seed: u64) -> Result<EvalResult, AgentError> {
    if episodes == 0 {
        return Err(AgentError::InvalidConfig("evaluation needs at least one episode".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut successes, mut total) = (0usize, 0.0);
    for _ in 0..episodes {
        let mut s = env.reset(rng.gen());
        policy.reset();
        let mut success = false;
        loop {
            let a = policy.act(&env.observe(&s));
            let out = env.step(&s, &a)?;
            total += out.reward;
            success |= env.success(&out.state);
            s = out.state;
            if out.done {
                break;
            }
        }
        successes += success as usize;
    }
    Ok(EvalResult { success_rate: successes as f64 / episodes as f64, mean_return: total / episodes as f64 })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: ActorPolicy,
    pub curve: Vec<CurvePoint>,
}

/// Outer loop: `E` exploration episodes storing raw transitions, then `B`
/// updates, evaluating every `eval_every` episodes. `on_eval` sees each curve
/// point as it is produced.
pub fn train_agent(
    env: &EnvConfig,
    phi: &Potential,
    demos: Option<&DemoDataset>,
    learner: Learner,
    cfg: &Td3Config,
    seed: u64,
    mut on_eval: impl FnMut(&CurvePoint),
) -> Result<TrainOutcome, AgentError> {
    cfg.validate()?;
    env.validate()?;
    if let Learner::Td3Bc { lambda } = learner {
        if !(lambda > 0.0) {
            return Err(AgentError::InvalidConfig("lambda must be positive".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = env.action_bound;
    let mut agent = Td3Agent::new(env.obs_dim(), env.act_dim(), bound, cfg, rng.gen());
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let eval_seed: u64 = rng.gen();
    let demo_pairs: &[DemoPair] = match (learner, demos) {
        (Learner::Td3, _) | (_, None) => &[],
        (_, Some(d)) => &d.pairs,
    };
    let mut curve = Vec::new();
    let mut episodes = 0;
    while episodes < cfg.total_episodes {
        let run = cfg.episodes_per_iter.min(cfg.total_episodes - episodes);
        for _ in 0..run {
            let mut s = env.reset(rng.gen());
            loop {
                let obs = env.observe(&s);
                let a = select_action(&agent.actor, &obs, cfg.expl_noise * bound, bound, &mut rng);
                let out = env.step(&s, &a)?;
                let s2 = env.observe(&out.state);
                // the horizon cut is a time limit, not a terminal state
                buffer.push(Transition { s: obs, a, r: out.reward, s2, done: false });
                s = out.state;
                if out.done {
                    break;
                }
            }
        }
        let before = episodes;
        episodes += run;
        if buffer.len() >= cfg.batch_size {
            for _ in 0..cfg.updates_per_iter {
                let batch = buffer.sample(cfg.batch_size, &mut rng);
                let demo_batch: Vec<&DemoPair> = if demo_pairs.is_empty() {
                    Vec::new()
                } else {
                    (0..cfg.demo_batch_size).map(|_| &demo_pairs[rng.gen_range(0..demo_pairs.len())]).collect()
                };
                match learner {
                    Learner::Td3 => agent.plain_td3_update(&batch, cfg)?,
                    Learner::Td3Shaped => {
                        let states: Vec<&[f64]> = demo_batch.iter().map(|d| d.state.as_slice()).collect();
                        agent.td3_update(&batch, &states, phi, cfg)?
                    }
                    Learner::Td3Bc { lambda } => agent.td3_bc_update(&batch, &demo_batch, lambda, cfg)?,
                };
            }
        }
        if episodes / cfg.eval_every > before / cfg.eval_every {
            let r = evaluate(&mut agent.policy(), env, cfg.eval_episodes, eval_seed)?;
            let point = CurvePoint { eval_index: curve.len(), episodes, success_rate: r.success_rate, mean_return: r.mean_return };
            on_eval(&point);
            curve.push(point);
        }
    }
    Ok(TrainOutcome { policy: agent.policy(), curve })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcConfig {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self { hidden: 64, lr: 1e-3, epochs: 300, batch_size: 64 }
    }
}

#[derive(Debug, Clone)]
pub struct BcOutcome {
    pub policy: ActorPolicy,
    /// Mean squared action error per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Behavioral cloning: Adam on the mean squared action error.
pub fn bc_train(dataset: &DemoDataset, bound: f64, cfg: &BcConfig, seed: u64) -> Result<BcOutcome, AgentError> {
    if dataset.is_empty() {
        return Err(AgentError::InvalidConfig("behavioral cloning needs demonstrations".into()));
    }
    if cfg.hidden == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(AgentError::InvalidConfig("bc hidden width, batch size and learning rate must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = actor_net(dataset.state_dim(), dataset.action_dim(), cfg.hidden, bound, &mut rng);
    let mut opt = Adam::new(net.params().len(), cfg.lr);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let inputs: Vec<Vec<f64>> = chunk.iter().map(|&i| dataset.pairs[i].state.clone()).collect();
            let w = 1.0 / chunk.len() as f64;
            let (loss, grad) = crate::nn::loss_grad(&net, &inputs, |k, out| {
                let target = &dataset.pairs[chunk[k]].action;
                let diff: Vec<f64> = out.iter().zip(target).map(|(p, a)| p - a).collect();
                (w * diff.iter().map(|v| v * v).sum::<f64>(), diff.iter().map(|v| 2.0 * w * v).collect())
            })?;
            sum += loss * chunk.len() as f64;
            opt.step(net.params_mut(), &grad)?;
        }
        epoch_losses.push(sum / dataset.len() as f64);
    }
    Ok(BcOutcome { policy: ActorPolicy { net }, epoch_losses })
}
