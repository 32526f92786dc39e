//! Masked autoregressive flow over concatenated `(s, a)` vectors.
//!
//! Each layer holds one masked conditioner network that maps its input `y`
//! to a shift `μ` and a log-scale `α` per coordinate, with coordinate `i`
//! depending only on `y₁ … y_{i−1}`. In the density direction a layer maps
//! `u_i = (y_i − μ_i) · exp(−α_i)` and contributes `−Σ α_i` to the log
//! density; the last layer's output is scored under a standard normal.
//! Coordinates are reversed between layers.
//!
//! Training minimizes the negative log-likelihood plus `η‖∇ log p‖²`. The
//! regularizer's parameter gradient is obtained by pushing the tangent
//! `g = ∇ log p` forward through the flow and reversing through value and
//! tangent together (see [`crate::nn::Mlp::jvp_backward`]).

use crate::demos::DemoDataset;
use crate::nn::{Activation, Adam, DualTape, Mlp, NnError, OutputActivation, Standardizer, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Log-scales are clamped to `[−7, 7]` before exponentiation.
pub const LOG_SCALE_CLAMP: f64 = 7.0;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;
const FLOW_FORMAT: &str = "maf-v1";

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("non-finite value in flow layer {layer}")]
    NonFinite { layer: usize },
    #[error("training diverged at epoch {epoch} (loss {loss}); lower the learning rate")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid flow config: {0}")]
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
pub struct FlowTrainConfig {
    pub layers: usize,
    pub hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight `η` of the input-gradient regularizer.
    pub eta: f64,
    /// Potential scale `c`.
    pub scale: f64,
    /// Density floor `ε` inside the potential's logarithm.
    pub floor: f64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self { layers: 5, hidden: 64, lr: 1e-3, batch_size: 256, epochs: 300, eta: 0.1, scale: 1.0, floor: 1e-6 }
    }
}

impl FlowTrainConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        let bad = |m: &str| Err(FlowError::InvalidConfig(m.to_string()));
        if self.layers == 0 {
            return bad("layers must be at least 1");
        }
        if self.hidden == 0 || self.batch_size == 0 {
            return bad("hidden width and batch size must be positive");
        }
        if !(self.eta >= 0.0) {
            return bad("eta must be non-negative");
        }
        if !(self.scale > 0.0) || !(self.floor > 0.0) {
            return bad("scale and floor must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    dim: usize,
    /// Conditioners in density-evaluation order.
    layers: Vec<Mlp>,
    /// Coordinate order fed to the next layer: `next[j] = u[perm[j]]`.
    perm: Vec<usize>,
    norm: Standardizer,
}

struct LayerVals {
    mu: Vec<f64>,
    alpha: Vec<f64>,
    /// Whether the log-scale lies strictly inside the clamp range.
    live: Vec<bool>,
    e: Vec<f64>,
    u: Vec<f64>,
}

struct LayerTape {
    y: Vec<f64>,
    tape: Tape,
    vals: LayerVals,
}

struct FlowTape {
    layers: Vec<LayerTape>,
    log_prob: f64,
}

struct DualLayerTape {
    y: Vec<f64>,
    yd: Vec<f64>,
    tape: DualTape,
    vals: LayerVals,
    mud: Vec<f64>,
    alphad: Vec<f64>,
    ud: Vec<f64>,
}

struct DualFlowTape {
    layers: Vec<DualLayerTape>,
    log_prob: f64,
    log_prob_dot: f64,
}

/// Hidden-unit degrees and masks for one autoregressive conditioner.
fn made_masks(dim: usize, hidden: usize) -> Vec<Vec<f64>> {
    let degrees: Vec<usize> = (0..hidden).map(|k| if dim > 1 { k % (dim - 1) + 1 } else { 0 }).collect();
    let mut inner = vec![0.0; hidden * dim];
    for (k, &m) in degrees.iter().enumerate() {
        for j in 0..dim {
            // input j has degree j + 1
            if dim > 1 && m >= j + 1 {
                inner[k * dim + j] = 1.0;
            }
        }
    }
    let mut outer = vec![0.0; 2 * dim * hidden];
    for o in 0..2 * dim {
        let degree = o % dim + 1;
        for (k, &m) in degrees.iter().enumerate() {
            if dim > 1 && degree > m {
                outer[o * hidden + k] = 1.0;
            }
        }
    }
    vec![inner, outer]
}

fn clamp_log_scale(raw: f64) -> (f64, bool) {
    if raw > LOG_SCALE_CLAMP {
        (LOG_SCALE_CLAMP, false)
    } else if raw < -LOG_SCALE_CLAMP {
        (-LOG_SCALE_CLAMP, false)
    } else {
        (raw, true)
    }
}

impl FlowModel {
    pub fn new(dim: usize, layers: usize, hidden: usize, seed: u64) -> Self {
        assert!(dim >= 1 && layers >= 1 && hidden >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks = made_masks(dim, hidden);
        let layers = (0..layers)
            .map(|_| {
                let mut m = Mlp::new(&[dim, hidden, 2 * dim], Activation::Tanh, OutputActivation::Identity, &mut rng)
                    .with_weight_masks(&masks)
                    .expect("masks match the conditioner layout");
                // start close to the identity map
                for w in m.weights_mut(1) {
                    *w *= 0.1;
                }
                m
            })
            .collect();
        Self { dim, layers, perm: (0..dim).rev().collect(), norm: Standardizer::identity(dim) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn conditioner(&self, l: usize) -> &Mlp {
        &self.layers[l]
    }

    pub fn conditioner_mut(&mut self, l: usize) -> &mut Mlp {
        &mut self.layers[l]
    }

    pub fn normalization(&self) -> &Standardizer {
        &self.norm
    }

    pub fn set_normalization(&mut self, norm: Standardizer) {
        assert_eq!(norm.dim(), self.dim);
        self.norm = norm;
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|m| m.params().len()).sum()
    }

    /// All conditioner parameters, concatenated in layer order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|m| m.params().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, p: &[f64]) -> Result<(), FlowError> {
        if p.len() != self.param_count() {
            return Err(NnError::DimensionMismatch { expected: self.param_count(), got: p.len() }.into());
        }
        let mut off = 0;
        for m in &mut self.layers {
            let n = m.params().len();
            m.set_params(&p[off..off + n])?;
            off += n;
        }
        Ok(())
    }

    fn permute(&self, u: &[f64]) -> Vec<f64> {
        self.perm.iter().map(|&i| u[i]).collect()
    }

    fn unpermute(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for (j, &i) in self.perm.iter().enumerate() {
            out[i] = v[j];
        }
        out
    }

    fn layer_vals(&self, y: &[f64], out: &[f64]) -> LayerVals {
        let d = self.dim;
        let mu = out[..d].to_vec();
        let (alpha, live): (Vec<f64>, Vec<bool>) = out[d..].iter().map(|&a| clamp_log_scale(a)).unzip();
        let e: Vec<f64> = alpha.iter().map(|a| (-a).exp()).collect();
        let u = (0..d).map(|i| (y[i] - mu[i]) * e[i]).collect();
        LayerVals { mu, alpha, live, e, u }
    }

    fn check(v: &[f64], layer: usize) -> Result<(), FlowError> {
        if v.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(FlowError::NonFinite { layer })
        }
    }

    fn base_log_prob(u: &[f64]) -> f64 {
        u.iter().map(|v| -0.5 * v * v - HALF_LOG_2PI).sum()
    }

    /// Base noise and log-density of a point in normalized coordinates.
    fn inverse_normalized(&self, y0: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        let mut y = y0.to_vec();
        let mut log_det = 0.0;
        let k = self.layers.len();
        for (l, cond) in self.layers.iter().enumerate() {
            let out = cond.forward(&y)?;
            let v = self.layer_vals(&y, &out);
            Self::check(&v.u, l)?;
            log_det -= v.alpha.iter().sum::<f64>();
            y = if l + 1 < k { self.permute(&v.u) } else { v.u };
        }
        let lp = Self::base_log_prob(&y) + log_det;
        Ok((y, lp))
    }

    /// Map a data point to its base noise `z₀`.
    pub fn inverse(&self, x: &[f64]) -> Result<Vec<f64>, FlowError> {
        self.check_dim(x)?;
        Ok(self.inverse_normalized(&self.norm.apply(x))?.0)
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), FlowError> {
        if x.len() != self.dim {
            return Err(NnError::DimensionMismatch { expected: self.dim, got: x.len() }.into());
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite { layer: 0 });
        }
        Ok(())
    }

    /// Log-density of `x` in data coordinates.
    pub fn log_prob(&self, x: &[f64]) -> Result<f64, FlowError> {
        self.check_dim(x)?;
        let (_, lp) = self.inverse_normalized(&self.norm.apply(x))?;
        Ok(lp - self.norm.log_scale())
    }

    /// Log-density and its gradient with respect to `x` (data coordinates).
    pub fn log_prob_and_input_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), FlowError> {
        self.check_dim(x)?;
        let tape = self.tape(&self.norm.apply(x))?;
        let gy = self.backward(&tape, 1.0, None);
        let g = gy.iter().zip(&self.norm.std).map(|(g, s)| g / s).collect();
        Ok((tape.log_prob - self.norm.log_scale(), g))
    }

    fn tape(&self, y0: &[f64]) -> Result<FlowTape, FlowError> {
        let k = self.layers.len();
        let mut layers = Vec::with_capacity(k);
        let mut y = y0.to_vec();
        let mut log_det = 0.0;
        for (l, cond) in self.layers.iter().enumerate() {
            let tape = cond.tape(&y)?;
            let vals = self.layer_vals(&y, tape.output());
            Self::check(&vals.u, l)?;
            log_det -= vals.alpha.iter().sum::<f64>();
            let next = if l + 1 < k { self.permute(&vals.u) } else { vals.u.clone() };
            layers.push(LayerTape { y, tape, vals });
            y = next;
        }
        let log_prob = Self::base_log_prob(&y) + log_det;
        Ok(FlowTape { layers, log_prob })
    }

    /// Reverse pass for adjoint `a` of the (normalized) log-density. Returns
    /// the input adjoint; accumulates conditioner gradients when asked.
    fn backward(&self, tape: &FlowTape, a: f64, mut grads: Option<&mut [Vec<f64>]>) -> Vec<f64> {
        let last = tape.layers.last().unwrap();
        let mut ubar: Vec<f64> = last.vals.u.iter().map(|u| -a * u).collect();
        for (l, lt) in tape.layers.iter().enumerate().rev() {
            let v = &lt.vals;
            let d = self.dim;
            let mut ybar = vec![0.0; d];
            let mut dout = vec![0.0; 2 * d];
            for i in 0..d {
                ybar[i] = ubar[i] * v.e[i];
                dout[i] = -ubar[i] * v.e[i];
                let ebar = ubar[i] * (lt.y[i] - v.mu[i]);
                let abar = -a - ebar * v.e[i];
                dout[d + i] = if v.live[i] { abar } else { 0.0 };
            }
            let g = grads.as_deref_mut().map(|g| g[l].as_mut_slice());
            let yc = self.layers[l].backward(&lt.tape, &dout, g);
            for i in 0..d {
                ybar[i] += yc[i];
            }
            ubar = if l > 0 { self.unpermute(&ybar) } else { ybar };
        }
        ubar
    }

    fn dual_tape(&self, y0: &[f64], yd0: &[f64]) -> Result<DualFlowTape, FlowError> {
        let k = self.layers.len();
        let d = self.dim;
        let mut layers = Vec::with_capacity(k);
        let (mut y, mut yd) = (y0.to_vec(), yd0.to_vec());
        let (mut log_det, mut log_det_dot) = (0.0, 0.0);
        for (l, cond) in self.layers.iter().enumerate() {
            let tape = cond.jvp_tape(&y, &yd)?;
            let vals = self.layer_vals(&y, tape.output());
            Self::check(&vals.u, l)?;
            let out_d = tape.tangent();
            let mud = out_d[..d].to_vec();
            let alphad: Vec<f64> =
                (0..d).map(|i| if vals.live[i] { out_d[d + i] } else { 0.0 }).collect();
            let ud: Vec<f64> = (0..d).map(|i| (yd[i] - mud[i]) * vals.e[i] - vals.u[i] * alphad[i]).collect();
            log_det -= vals.alpha.iter().sum::<f64>();
            log_det_dot -= alphad.iter().sum::<f64>();
            let (next, next_d) =
                if l + 1 < k { (self.permute(&vals.u), self.permute(&ud)) } else { (vals.u.clone(), ud.clone()) };
            layers.push(DualLayerTape { y, yd, tape, vals, mud, alphad, ud });
            y = next;
            yd = next_d;
        }
        let log_prob = Self::base_log_prob(&y) + log_det;
        let log_prob_dot = -y.iter().zip(&yd).map(|(u, ud)| u * ud).sum::<f64>() + log_det_dot;
        Ok(DualFlowTape { layers, log_prob, log_prob_dot })
    }

    /// Reverse pass through value and tangent with adjoints `a` (log-density)
    /// and `b` (its directional derivative).
    fn dual_backward(&self, tape: &DualFlowTape, a: f64, b: f64, mut grads: Option<&mut [Vec<f64>]>) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let last = tape.layers.last().unwrap();
        let mut ubar: Vec<f64> = (0..d).map(|i| -a * last.vals.u[i] - b * last.ud[i]).collect();
        let mut udbar: Vec<f64> = last.vals.u.iter().map(|u| -b * u).collect();
        for (l, lt) in tape.layers.iter().enumerate().rev() {
            let v = &lt.vals;
            let mut ybar = vec![0.0; d];
            let mut ydbar = vec![0.0; d];
            let mut dout = vec![0.0; 2 * d];
            let mut doutd = vec![0.0; 2 * d];
            for i in 0..d {
                let mut abar = -a;
                let mut adbar = -b;
                let mut ebar = 0.0;
                let mut ub = ubar[i];
                // u̇ = (ẏ − μ̇)·e − u·α̇
                ydbar[i] += udbar[i] * v.e[i];
                doutd[i] = -udbar[i] * v.e[i];
                ebar += udbar[i] * (lt.yd[i] - lt.mud[i]);
                ub -= udbar[i] * lt.alphad[i];
                adbar -= udbar[i] * v.u[i];
                // u = (y − μ)·e
                ybar[i] += ub * v.e[i];
                dout[i] = -ub * v.e[i];
                ebar += ub * (lt.y[i] - v.mu[i]);
                // e = exp(−α)
                abar -= ebar * v.e[i];
                if v.live[i] {
                    dout[d + i] = abar;
                    doutd[d + i] = adbar;
                }
            }
            let g = grads.as_deref_mut().map(|g| g[l].as_mut_slice());
            let (yc, ydc) = self.layers[l].jvp_backward(&lt.tape, &dout, &doutd, g);
            for i in 0..d {
                ybar[i] += yc[i];
                ydbar[i] += ydc[i];
            }
            if l > 0 {
                ubar = self.unpermute(&ybar);
                udbar = self.unpermute(&ydbar);
            } else {
                ubar = ybar;
                udbar = ydbar;
            }
        }
        (ubar, udbar)
    }

    /// Push base noise through the flow (sequential per coordinate).
    pub fn transform(&self, z0: &[f64]) -> Result<Vec<f64>, FlowError> {
        let k = self.layers.len();
        let d = self.dim;
        let mut cur = z0.to_vec();
        for l in (0..k).rev() {
            let mut y = vec![0.0; d];
            for i in 0..d {
                let out = self.layers[l].forward(&y)?;
                let (alpha, _) = clamp_log_scale(out[d + i]);
                y[i] = out[i] + alpha.exp() * cur[i];
            }
            Self::check(&y, l)?;
            cur = if l > 0 { self.unpermute(&y) } else { y };
        }
        Ok(self.norm.invert(&cur))
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>, FlowError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                self.transform(&z)
            })
            .collect()
    }

    /// `c · log(p(s ⊕ a) + ε)`.
    pub fn potential(&self, scale: f64, floor: f64, s: &[f64], a: &[f64]) -> Result<f64, FlowError> {
        let x: Vec<f64> = s.iter().chain(a).copied().collect();
        Ok(scale * log_add_exp(self.log_prob(&x)?, floor.ln()))
    }

    /// Potential and its gradient with respect to the action.
    pub fn potential_action_grad(&self, scale: f64, floor: f64, s: &[f64], a: &[f64]) -> Result<(f64, Vec<f64>), FlowError> {
        let x: Vec<f64> = s.iter().chain(a).copied().collect();
        let (lp, g) = self.log_prob_and_input_grad(&x)?;
        let log_floor = floor.ln();
        let weight = 1.0 / (1.0 + (log_floor - lp).exp());
        let value = scale * log_add_exp(lp, log_floor);
        Ok((value, g[s.len()..].iter().map(|v| scale * weight * v).collect()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FlowError> {
        let ckpt = FlowCheckpoint { format: FLOW_FORMAT.into(), model: self.clone() };
        std::fs::write(path, serde_json::to_vec(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FlowError> {
        let ckpt: FlowCheckpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ckpt.format != FLOW_FORMAT {
            return Err(FlowError::InvalidConfig(format!("unknown checkpoint format {:?}", ckpt.format)));
        }
        let m = ckpt.model;
        let mut sorted = m.perm.clone();
        sorted.sort_unstable();
        if sorted != (0..m.dim).collect::<Vec<_>>() || m.norm.dim() != m.dim {
            return Err(FlowError::InvalidConfig("inconsistent flow checkpoint".into()));
        }
        for l in &m.layers {
            l.validate()?;
        }
        Ok(m)
    }
}

#[derive(Serialize, Deserialize)]
struct FlowCheckpoint {
    format: String,
    model: FlowModel,
}

pub(crate) fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Per-sample training objective `−log p(y) + η‖∇ log p(y)‖²` in normalized
/// coordinates, accumulating `weight ×` its parameter gradient.
fn sample_objective(model: &FlowModel, y: &[f64], eta: f64, weight: f64, grads: &mut [Vec<f64>]) -> Result<f64, FlowError> {
    if eta == 0.0 {
        let tape = model.tape(y)?;
        model.backward(&tape, -weight, Some(grads));
        return Ok(-tape.log_prob);
    }
    let tape = model.tape(y)?;
    let g = model.backward(&tape, 1.0, None);
    let dual = model.dual_tape(y, &g)?;
    // ∂‖g‖²/∂ψ = 2 · ∂(v·g)/∂ψ with v = g held fixed, and v·g is the tangent
    model.dual_backward(&dual, -weight, 2.0 * eta * weight, Some(grads));
    Ok(-dual.log_prob + eta * dual.log_prob_dot)
}

/// Objective and flat parameter gradient over a batch of normalized rows.
pub fn batch_objective(model: &FlowModel, rows: &[Vec<f64>], eta: f64) -> Result<(f64, Vec<f64>), FlowError> {
    let mut grads: Vec<Vec<f64>> = model.layers.iter().map(|m| vec![0.0; m.params().len()]).collect();
    let w = 1.0 / rows.len() as f64;
    let mut total = 0.0;
    for y in rows {
        total += sample_objective(model, y, eta, w, &mut grads)? * w;
    }
    Ok((total, grads.concat()))
}

/// Value of the same objective, for finite-difference checks.
pub fn batch_objective_value(model: &FlowModel, rows: &[Vec<f64>], eta: f64) -> Result<f64, FlowError> {
    let mut total = 0.0;
    for y in rows {
        let tape = model.tape(y)?;
        let g = model.backward(&tape, 1.0, None);
        total += -tape.log_prob + eta * g.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total / rows.len() as f64)
}

/// Midpoint-rule integral of the density over `[−half, half]²`.
pub fn grid_mass(model: &FlowModel, half: f64, cells: usize) -> f64 {
    assert_eq!(model.dim(), 2);
    let h = 2.0 * half / cells as f64;
    let mut mass = 0.0;
    for i in 0..cells {
        for j in 0..cells {
            let x = [-half + (i as f64 + 0.5) * h, -half + (j as f64 + 0.5) * h];
            mass += model.log_prob(&x).map_or(0.0, f64::exp) * h * h;
        }
    }
    mass
}

#[derive(Debug, Clone)]
pub struct FlowTraining {
    pub model: FlowModel,
    /// Mean training objective per epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn train_flow(dataset: &DemoDataset, cfg: &FlowTrainConfig, seed: u64) -> Result<FlowTraining, FlowError> {
    fit_flow(&dataset.joint_rows(), cfg, seed)
}

/// Maximum-likelihood fit on raw rows; normalization constants are fitted to
/// the rows and stored in the model.
pub fn fit_flow(rows: &[Vec<f64>], cfg: &FlowTrainConfig, seed: u64) -> Result<FlowTraining, FlowError> {
    cfg.validate()?;
    if rows.is_empty() {
        return Err(FlowError::InvalidConfig("empty training set".into()));
    }
    let dim = rows[0].len();
    if rows.iter().any(|r| r.len() != dim) {
        return Err(FlowError::InvalidConfig("rows have inconsistent dimensions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = FlowModel::new(dim, cfg.layers, cfg.hidden, rand::Rng::gen(&mut rng));
    let norm = Standardizer::fit(rows);
    let data: Vec<Vec<f64>> = rows.iter().map(|r| norm.apply(r)).collect();
    model.set_normalization(norm);
    let mut opts: Vec<Adam> = model.layers.iter().map(|m| Adam::new(m.params().len(), cfg.lr)).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Vec<f64>> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (loss, grad) = batch_objective(&model, &batch, cfg.eta)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(FlowError::Diverged { epoch, loss });
            }
            sum += loss * chunk.len() as f64;
            let mut off = 0;
            for (m, opt) in model.layers.iter_mut().zip(&mut opts) {
                let n = m.params().len();
                opt.step(m.params_mut(), &grad[off..off + n])?;
                off += n;
            }
        }
        epoch_losses.push(sum / data.len() as f64);
    }
    Ok(FlowTraining { model, epoch_losses })
}
