//! Wasserstein GAN with gradient penalty over `(s, a)` vectors.
//!
//! The critic is the potential: `Φ(s, a) = c · D(s ⊕ a)` evaluated in the
//! normalized coordinates the GAN was trained in.

use crate::demos::DemoDataset;
use crate::nn::{Activation, Adam, Mlp, NnError, OutputActivation, Standardizer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

const GAN_FORMAT: &str = "wgan-gp-v1";

#[derive(Debug, Error)]
pub enum GanError {
    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("invalid gan config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanTrainConfig {
    pub hidden: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gp_weight: f64,
    /// Critic updates per generator update.
    pub critic_steps: usize,
    pub batch_size: usize,
    /// Number of generator updates.
    pub iterations: usize,
    /// Potential scale `c`.
    pub scale: f64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.9,
            gp_weight: 10.0,
            critic_steps: 5,
            batch_size: 64,
            iterations: 2000,
            scale: 1.0,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<(), GanError> {
        let bad = |m: &str| Err(GanError::InvalidConfig(m.to_string()));
        if self.hidden == 0 || self.batch_size == 0 || self.critic_steps == 0 {
            return bad("hidden width, batch size and critic steps must be positive");
        }
        if !(self.lr > 0.0) || !(self.scale > 0.0) {
            return bad("learning rate and scale must be positive");
        }
        if !(self.gp_weight >= 0.0) {
            return bad("gradient-penalty weight must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanModel {
    pub critic: Mlp,
    pub generator: Mlp,
    norm: Standardizer,
}

impl GanModel {
    pub fn new(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let critic = Mlp::new(&[dim, hidden, hidden, 1], Activation::Relu, OutputActivation::Identity, &mut rng);
        let generator = Mlp::new(&[dim, hidden, hidden, dim], Activation::Relu, OutputActivation::Identity, &mut rng);
        Self { critic, generator, norm: Standardizer::identity(dim) }
    }

    pub fn dim(&self) -> usize {
        self.critic.input_dim()
    }

    pub fn normalization(&self) -> &Standardizer {
        &self.norm
    }

    pub fn set_normalization(&mut self, norm: Standardizer) {
        assert_eq!(norm.dim(), self.dim());
        self.norm = norm;
    }

    /// Critic score of a data-space point.
    pub fn score(&self, x: &[f64]) -> Result<f64, GanError> {
        Ok(self.critic.forward(&self.norm.apply(x))?[0])
    }

    /// `c · D(s ⊕ a)`.
    pub fn potential(&self, scale: f64, s: &[f64], a: &[f64]) -> Result<f64, GanError> {
        let x: Vec<f64> = s.iter().chain(a).copied().collect();
        Ok(scale * self.score(&x)?)
    }

    /// Potential and its gradient with respect to the action.
    pub fn potential_action_grad(&self, scale: f64, s: &[f64], a: &[f64]) -> Result<(f64, Vec<f64>), GanError> {
        let x: Vec<f64> = s.iter().chain(a).copied().collect();
        let (y, g) = self.critic.input_grad(&self.norm.apply(&x), &[scale])?;
        let grad = (s.len()..x.len()).map(|j| g[j] / self.norm.std[j]).collect();
        Ok((scale * y[0], grad))
    }

    /// Generated samples in data coordinates.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>, GanError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let z = noise(self.dim(), &mut rng);
                Ok(self.norm.invert(&self.generator.forward(&z)?))
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GanError> {
        let ckpt = GanCheckpoint { format: GAN_FORMAT.into(), model: self.clone() };
        std::fs::write(path, serde_json::to_vec(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GanError> {
        let ckpt: GanCheckpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ckpt.format != GAN_FORMAT {
            return Err(GanError::InvalidConfig(format!("unknown checkpoint format {:?}", ckpt.format)));
        }
        let m = ckpt.model;
        m.critic.validate()?;
        m.generator.validate()?;
        let d = m.critic.input_dim();
        if m.critic.output_dim() != 1 || m.generator.input_dim() != d || m.generator.output_dim() != d || m.norm.dim() != d {
            return Err(GanError::InvalidConfig("inconsistent gan checkpoint".into()));
        }
        Ok(m)
    }
}

#[derive(Serialize, Deserialize)]
struct GanCheckpoint {
    format: String,
    model: GanModel,
}

fn noise<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// `x̂ = ε·x + (1 − ε)·x̃`.
pub fn interpolate(real: &[f64], fake: &[f64], eps: f64) -> Vec<f64> {
    real.iter().zip(fake).map(|(x, f)| eps * x + (1.0 - eps) * f).collect()
}

/// Critic losses `(L1, L2)`: `L1 = mean D(real) − mean D(fake)` and
/// `L2 = mean (‖∇D(x̂)‖ − 1)²` at interpolates with mixing weights `eps`.
pub fn wgan_losses(critic: &Mlp, real: &[Vec<f64>], fake: &[Vec<f64>], eps: &[f64]) -> Result<(f64, f64), GanError> {
    let mean = |rows: &[Vec<f64>]| -> Result<f64, GanError> {
        let mut s = 0.0;
        for r in rows {
            s += critic.forward(r)?[0];
        }
        Ok(s / rows.len() as f64)
    };
    let l1 = mean(real)? - mean(fake)?;
    let mut l2 = 0.0;
    for ((x, f), &e) in real.iter().zip(fake).zip(eps) {
        let (_, g) = critic.input_grad(&interpolate(x, f, e), &[1.0])?;
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        l2 += (norm - 1.0).powi(2);
    }
    Ok((l1, l2 / real.len() as f64))
}

/// Value of `−L1 + λ·L2` and its critic parameter gradient.
pub fn critic_objective(
    critic: &Mlp,
    real: &[Vec<f64>],
    fake: &[Vec<f64>],
    eps: &[f64],
    gp_weight: f64,
) -> Result<(f64, f64, Vec<f64>), GanError> {
    let n = real.len() as f64;
    let mut grad = vec![0.0; critic.params().len()];
    let mut l1 = 0.0;
    for x in real {
        let tape = critic.tape(x)?;
        l1 += tape.output()[0] / n;
        critic.backward(&tape, &[-1.0 / n], Some(&mut grad));
    }
    for x in fake {
        let tape = critic.tape(x)?;
        l1 -= tape.output()[0] / n;
        critic.backward(&tape, &[1.0 / n], Some(&mut grad));
    }
    let mut l2 = 0.0;
    for ((x, f), &e) in real.iter().zip(fake).zip(eps) {
        let xh = interpolate(x, f, e);
        let (_, g) = critic.input_grad(&xh, &[1.0])?;
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        l2 += (norm - 1.0).powi(2) / n;
        if gp_weight == 0.0 || norm < 1e-12 {
            continue;
        }
        // ∂(‖g‖ − 1)²/∂θ = 2(‖g‖ − 1)/‖g‖ · ∂(v·g)/∂θ with v = g held fixed
        let coef = gp_weight / n * 2.0 * (norm - 1.0) / norm;
        let tape = critic.jvp_tape(&xh, &g)?;
        critic.jvp_backward(&tape, &[0.0], &[coef], Some(&mut grad));
    }
    Ok((l1, l2, grad))
}

/// Generator loss `−mean D(G(z))` and its generator parameter gradient.
pub fn generator_objective(model: &GanModel, z: &[Vec<f64>]) -> Result<(f64, Vec<f64>), GanError> {
    let n = z.len() as f64;
    let mut grad = vec![0.0; model.generator.params().len()];
    let mut loss = 0.0;
    for zi in z {
        let tape = model.generator.tape(zi)?;
        let (y, dx) = model.critic.input_grad(tape.output(), &[-1.0 / n])?;
        loss -= y[0] / n;
        model.generator.backward(&tape, &dx, Some(&mut grad));
    }
    Ok((loss, grad))
}

/// Per-iteration training statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanStats {
    /// Critic objective `−L1 + λ·L2` of the last critic step.
    pub critic_loss: f64,
    pub l1: f64,
    pub l2: f64,
    pub generator_loss: f64,
}

/// Stateful trainer over normalized data.
pub struct GanTrainer {
    pub model: GanModel,
    cfg: GanTrainConfig,
    critic_opt: Adam,
    gen_opt: Adam,
    rng: ChaCha8Rng,
}

impl GanTrainer {
    pub fn new(model: GanModel, cfg: GanTrainConfig, seed: u64) -> Result<Self, GanError> {
        cfg.validate()?;
        let adam = |n: usize| {
            let mut a = Adam::new(n, cfg.lr);
            a.beta1 = cfg.beta1;
            a.beta2 = cfg.beta2;
            a
        };
        let critic_opt = adam(model.critic.params().len());
        let gen_opt = adam(model.generator.params().len());
        Ok(Self { model, cfg, critic_opt, gen_opt, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn generate(&mut self, n: usize) -> Result<Vec<Vec<f64>>, GanError> {
        let d = self.model.dim();
        (0..n).map(|_| Ok(self.model.generator.forward(&noise(d, &mut self.rng))?)).collect()
    }

    /// One critic update against the given fake batch. Returns `(L1, L2)`
    /// measured before the update.
    pub fn critic_step(&mut self, real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<(f64, f64), GanError> {
        let eps: Vec<f64> = (0..real.len()).map(|_| self.rng.gen::<f64>()).collect();
        let (l1, l2, grad) = critic_objective(&self.model.critic, real, fake, &eps, self.cfg.gp_weight)?;
        if !l1.is_finite() || !l2.is_finite() {
            return Err(NnError::NonFiniteLoss(l2 - l1).into());
        }
        self.critic_opt.step(self.model.critic.params_mut(), &grad)?;
        Ok((l1, l2))
    }

    pub fn generator_step(&mut self) -> Result<f64, GanError> {
        let d = self.model.dim();
        let z: Vec<Vec<f64>> = (0..self.cfg.batch_size).map(|_| noise(d, &mut self.rng)).collect();
        let (loss, grad) = generator_objective(&self.model, &z)?;
        self.gen_opt.step(self.model.generator.params_mut(), &grad)?;
        Ok(loss)
    }

    fn real_batch(&mut self, data: &[Vec<f64>]) -> Vec<Vec<f64>> {
        (0..self.cfg.batch_size).map(|_| data[self.rng.gen_range(0..data.len())].clone()).collect()
    }

    /// `critic_steps` critic updates followed by one generator update.
    pub fn iteration(&mut self, data: &[Vec<f64>]) -> Result<GanStats, GanError> {
        let mut last = (0.0, 0.0);
        for _ in 0..self.cfg.critic_steps {
            let real = self.real_batch(data);
            let fake = self.generate(real.len())?;
            last = self.critic_step(&real, &fake)?;
        }
        let generator_loss = self.generator_step()?;
        let (l1, l2) = last;
        Ok(GanStats { critic_loss: -l1 + self.cfg.gp_weight * l2, l1, l2, generator_loss })
    }
}

#[derive(Debug, Clone)]
pub struct GanTraining {
    pub model: GanModel,
    pub history: Vec<GanStats>,
}

pub fn train_gan(dataset: &DemoDataset, cfg: &GanTrainConfig, seed: u64) -> Result<GanTraining, GanError> {
    fit_gan(&dataset.joint_rows(), cfg, seed)
}

/// Train on raw rows; normalization constants are fitted and stored.
pub fn fit_gan(rows: &[Vec<f64>], cfg: &GanTrainConfig, seed: u64) -> Result<GanTraining, GanError> {
    cfg.validate()?;
    if rows.is_empty() {
        return Err(GanError::InvalidConfig("empty training set".into()));
    }
    let dim = rows[0].len();
    if rows.iter().any(|r| r.len() != dim) {
        return Err(GanError::InvalidConfig("rows have inconsistent dimensions".into()));
    }
    let mut model = GanModel::new(dim, cfg.hidden, seed);
    let norm = Standardizer::fit(rows);
    let data: Vec<Vec<f64>> = rows.iter().map(|r| norm.apply(r)).collect();
    model.set_normalization(norm);
    let mut trainer = GanTrainer::new(model, cfg.clone(), seed.wrapping_add(1))?;
    let mut history = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let stats = trainer.iteration(&data).map_err(|e| match e {
            GanError::Nn(NnError::NonFiniteLoss(_)) => GanError::Diverged { iteration },
            e => e,
        })?;
        history.push(stats);
    }
    Ok(GanTraining { model: trainer.model, history })
}
