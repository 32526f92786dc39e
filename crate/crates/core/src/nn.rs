//! Small dense networks with explicit parameter vectors.
//!
//! Every network keeps its weights and biases in one flat `Vec<f64>` so that
//! optimizers, Polyak averaging and finite-difference checks can treat the
//! parameters as a plain vector. Gradients are computed by hand-written
//! reverse passes. Besides the ordinary value pass, [`Mlp::jvp_tape`] pushes a
//! tangent through the network (forward-mode) and [`Mlp::jvp_backward`]
//! reverses through both value and tangent. That pair is what the gradient
//! penalty and the flow Jacobian regularizer need: the parameter gradient of
//! `v · ∇ₓf(x)` for a fixed direction `v`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite loss value {0}")]
    NonFiniteLoss(f64),
    #[error("polyak rate must lie in [0, 1], got {0}")]
    InvalidTau(f64),
    #[error("invalid network layout: {0}")]
    InvalidLayout(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn eval(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    (z, 1.0, 0.0)
                } else {
                    (0.0, 0.0, 0.0)
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                let d = 1.0 - t * t;
                (t, d, -2.0 * t * d)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    /// `bound · tanh(z)`, element-wise.
    TanhScaled { bound: f64 },
}

impl OutputActivation {
    /// Value, first and second derivative.
    #[inline]
    fn eval(self, z: f64) -> (f64, f64, f64) {
        match self {
            OutputActivation::Identity => (z, 1.0, 0.0),
            OutputActivation::TanhScaled { bound } => {
                let t = z.tanh();
                let d = 1.0 - t * t;
                (bound * t, bound * d, -2.0 * bound * t * d)
            }
        }
    }
}

/// Multilayer perceptron. Layer `l` maps `sizes[l]` inputs to `sizes[l + 1]`
/// outputs; weights are stored row-major (`out × in`) followed by the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    hidden: Vec<Activation>,
    output: OutputActivation,
    params: Vec<f64>,
    /// Optional 0/1 connectivity mask over `params` (used by masked
    /// autoregressive conditioners). Masked entries stay exactly zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<Vec<f64>>,
}

/// Cached activations of one value pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("tape has at least the input")
    }
}

/// Cached activations and tangents of one forward-mode pass.
#[derive(Debug, Clone)]
pub struct DualTape {
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    dacts: Vec<Vec<f64>>,
    dpre: Vec<Vec<f64>>,
}

impl DualTape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("tape has at least the input")
    }

    pub fn tangent(&self) -> &[f64] {
        self.dacts.last().expect("tape has at least the input")
    }
}

impl Mlp {
    /// Build a network with uniform(−1/√fan_in, 1/√fan_in) weights and zero
    /// biases.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: OutputActivation,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least one layer");
        assert!(sizes.iter().all(|&s| s > 0), "layer widths must be positive");
        let n = param_count(sizes);
        let mut params = vec![0.0; n];
        let mut off = 0;
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[off..off + fan_in * fan_out] {
                *p = rng.gen_range(-bound..bound);
            }
            off += fan_in * fan_out + fan_out;
        }
        Self {
            sizes: sizes.to_vec(),
            hidden: vec![hidden; sizes.len() - 2],
            output,
            params,
            mask: None,
        }
    }

    /// Network with every parameter zero.
    pub fn zeros(sizes: &[usize], hidden: Activation, output: OutputActivation) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least one layer");
        Self {
            sizes: sizes.to_vec(),
            hidden: vec![hidden; sizes.len() - 2],
            output,
            params: vec![0.0; param_count(sizes)],
            mask: None,
        }
    }

    /// Attach per-layer weight masks (`out × in`, 1 keeps a connection).
    /// Masked weights are zeroed immediately and receive zero gradient.
    pub fn with_weight_masks(mut self, masks: &[Vec<f64>]) -> Result<Self, NnError> {
        if masks.len() != self.n_layers() {
            return Err(NnError::InvalidLayout(format!(
                "{} masks for {} layers",
                masks.len(),
                self.n_layers()
            )));
        }
        let mut full = vec![1.0; self.params.len()];
        for (l, m) in masks.iter().enumerate() {
            let (w_off, _) = self.offsets(l);
            let n_w = self.sizes[l] * self.sizes[l + 1];
            if m.len() != n_w {
                return Err(NnError::DimensionMismatch { expected: n_w, got: m.len() });
            }
            full[w_off..w_off + n_w].copy_from_slice(m);
        }
        for (p, m) in self.params.iter_mut().zip(&full) {
            *p *= m;
        }
        self.mask = Some(full);
        Ok(self)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn mask(&self) -> Option<&[f64]> {
        self.mask.as_deref()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), NnError> {
        if params.len() != self.params.len() {
            return Err(NnError::DimensionMismatch { expected: self.params.len(), got: params.len() });
        }
        self.params.copy_from_slice(params);
        if let Some(mask) = &self.mask {
            for (p, k) in self.params.iter_mut().zip(mask) {
                *p *= k;
            }
        }
        Ok(())
    }

    /// Offsets of the weight block and bias block of layer `l`.
    pub fn offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for w in self.sizes.windows(2).take(l) {
            off += w[0] * w[1] + w[1];
        }
        (off, off + self.sizes[l] * self.sizes[l + 1])
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let (_, b) = self.offsets(l);
        let n = self.sizes[l + 1];
        &mut self.params[b..b + n]
    }

    pub fn weights_mut(&mut self, l: usize) -> &mut [f64] {
        let (w, b) = self.offsets(l);
        &mut self.params[w..b]
    }

    #[inline]
    fn act(&self, l: usize, z: f64) -> (f64, f64, f64) {
        if l + 1 == self.n_layers() {
            self.output.eval(z)
        } else {
            self.hidden[l].eval(z)
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NnError> {
        if x.len() != self.sizes[0] {
            return Err(NnError::DimensionMismatch { expected: self.sizes[0], got: x.len() });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        self.check_input(x)?;
        let mut h = x.to_vec();
        let mut off = 0;
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let mut next = Vec::with_capacity(n_out);
            for o in 0..n_out {
                let z = b[o] + dot(&w[o * n_in..(o + 1) * n_in], &h);
                next.push(self.act(l, z).0);
            }
            h = next;
            off += n_in * n_out + n_out;
        }
        Ok(h)
    }

    pub fn tape(&self, x: &[f64]) -> Result<Tape, NnError> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.sizes.len());
        let mut pre = Vec::with_capacity(self.n_layers());
        acts.push(x.to_vec());
        let mut off = 0;
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let h = &acts[l];
            let mut z = Vec::with_capacity(n_out);
            let mut a = Vec::with_capacity(n_out);
            for o in 0..n_out {
                let zo = b[o] + dot(&w[o * n_in..(o + 1) * n_in], h);
                z.push(zo);
                a.push(self.act(l, zo).0);
            }
            pre.push(z);
            acts.push(a);
            off += n_in * n_out + n_out;
        }
        Ok(Tape { acts, pre })
    }

    /// Reverse pass. Accumulates `∂(dy · y)/∂params` into `grad` (when given)
    /// and returns `∂(dy · y)/∂x`.
    pub fn backward(&self, tape: &Tape, dy: &[f64], mut grad: Option<&mut [f64]>) -> Vec<f64> {
        debug_assert_eq!(dy.len(), self.output_dim());
        let mut da = dy.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w_off, b_off) = self.offsets(l);
            let w = &self.params[w_off..b_off];
            let h = &tape.acts[l];
            let dz: Vec<f64> = tape.pre[l]
                .iter()
                .zip(&da)
                .map(|(&z, &g)| g * self.act(l, z).1)
                .collect();
            if let Some(g) = grad.as_deref_mut() {
                self.accumulate(g, w_off, b_off, n_in, &dz, h);
            }
            let mut dh = vec![0.0; n_in];
            for o in 0..n_out {
                if dz[o] != 0.0 {
                    axpy(dz[o], &w[o * n_in..(o + 1) * n_in], &mut dh);
                }
            }
            da = dh;
        }
        da
    }

    /// Gradient of `dy · f(x)` with respect to the input only.
    pub fn input_grad(&self, x: &[f64], dy: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NnError> {
        let tape = self.tape(x)?;
        let dx = self.backward(&tape, dy, None);
        Ok((tape.acts.last().unwrap().clone(), dx))
    }

    /// Forward pass carrying the tangent `xdot` (a Jacobian-vector product).
    pub fn jvp_tape(&self, x: &[f64], xdot: &[f64]) -> Result<DualTape, NnError> {
        self.check_input(x)?;
        self.check_input(xdot)?;
        let nl = self.n_layers();
        let mut t = DualTape {
            acts: Vec::with_capacity(nl + 1),
            pre: Vec::with_capacity(nl),
            dacts: Vec::with_capacity(nl + 1),
            dpre: Vec::with_capacity(nl),
        };
        t.acts.push(x.to_vec());
        t.dacts.push(xdot.to_vec());
        let mut off = 0;
        for l in 0..nl {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let (h, hd) = (&t.acts[l], &t.dacts[l]);
            let mut z = Vec::with_capacity(n_out);
            let mut zd = Vec::with_capacity(n_out);
            let mut a = Vec::with_capacity(n_out);
            let mut ad = Vec::with_capacity(n_out);
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let zo = b[o] + dot(row, h);
                let zdo = dot(row, hd);
                let (v, d1, _) = self.act(l, zo);
                z.push(zo);
                zd.push(zdo);
                a.push(v);
                ad.push(d1 * zdo);
            }
            t.pre.push(z);
            t.dpre.push(zd);
            t.acts.push(a);
            t.dacts.push(ad);
            off += n_in * n_out + n_out;
        }
        Ok(t)
    }

    /// Reverse pass through a [`DualTape`]: given adjoints `dy` of the output
    /// and `dydot` of the output tangent, accumulates the parameter gradient
    /// of `dy · y + dydot · ẏ` and returns the adjoints of `x` and `ẋ`.
    pub fn jvp_backward(
        &self,
        tape: &DualTape,
        dy: &[f64],
        dydot: &[f64],
        mut grad: Option<&mut [f64]>,
    ) -> (Vec<f64>, Vec<f64>) {
        let mut da = dy.to_vec();
        let mut dad = dydot.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w_off, b_off) = self.offsets(l);
            let w = &self.params[w_off..b_off];
            let mut dz = vec![0.0; n_out];
            let mut dzd = vec![0.0; n_out];
            for o in 0..n_out {
                let (_, s1, s2) = self.act(l, tape.pre[l][o]);
                dz[o] = da[o] * s1 + dad[o] * tape.dpre[l][o] * s2;
                dzd[o] = dad[o] * s1;
            }
            if let Some(g) = grad.as_deref_mut() {
                self.accumulate(g, w_off, b_off, n_in, &dz, &tape.acts[l]);
                // the tangent path only touches weights (ż = W ḣ)
                self.accumulate_weights(g, w_off, n_in, &dzd, &tape.dacts[l]);
            }
            let mut dh = vec![0.0; n_in];
            let mut dhd = vec![0.0; n_in];
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                if dz[o] != 0.0 {
                    axpy(dz[o], row, &mut dh);
                }
                if dzd[o] != 0.0 {
                    axpy(dzd[o], row, &mut dhd);
                }
            }
            da = dh;
            dad = dhd;
        }
        (da, dad)
    }

    fn accumulate(&self, g: &mut [f64], w_off: usize, b_off: usize, n_in: usize, dz: &[f64], h: &[f64]) {
        self.accumulate_weights(g, w_off, n_in, dz, h);
        for (gb, &d) in g[b_off..b_off + dz.len()].iter_mut().zip(dz) {
            *gb += d;
        }
    }

    fn accumulate_weights(&self, g: &mut [f64], w_off: usize, n_in: usize, dz: &[f64], h: &[f64]) {
        for (o, &d) in dz.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let start = w_off + o * n_in;
            match &self.mask {
                Some(m) => {
                    for i in 0..n_in {
                        g[start + i] += d * h[i] * m[start + i];
                    }
                }
                None => axpy(d, h, &mut g[start..start + n_in]),
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        let ckpt = MlpCheckpoint { format: MLP_FORMAT.to_string(), mlp: self.clone() };
        std::fs::write(path, serde_json::to_vec(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        let ckpt: MlpCheckpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ckpt.format != MLP_FORMAT {
            return Err(NnError::InvalidLayout(format!("unknown checkpoint format {:?}", ckpt.format)));
        }
        ckpt.mlp.validate()?;
        Ok(ckpt.mlp)
    }

    /// Shape and finiteness checks for deserialized networks.
    pub fn validate(&self) -> Result<(), NnError> {
        if self.sizes.len() < 2 || self.sizes.iter().any(|&s| s == 0) {
            return Err(NnError::InvalidLayout(format!("bad layer sizes {:?}", self.sizes)));
        }
        if self.hidden.len() != self.sizes.len() - 2 {
            return Err(NnError::InvalidLayout("one activation per hidden layer".into()));
        }
        let n = param_count(&self.sizes);
        if self.params.len() != n {
            return Err(NnError::DimensionMismatch { expected: n, got: self.params.len() });
        }
        if let Some(m) = &self.mask {
            if m.len() != n {
                return Err(NnError::DimensionMismatch { expected: n, got: m.len() });
            }
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(NnError::InvalidLayout("non-finite parameter".into()));
        }
        Ok(())
    }
}

const MLP_FORMAT: &str = "mlp-v1";

#[derive(Serialize, Deserialize)]
struct MlpCheckpoint {
    format: String,
    mlp: Mlp,
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Value and parameter gradient of `Σᵢ loss(i, f(xᵢ))` over a batch.
///
/// `loss` returns the per-sample loss and its derivative with respect to the
/// network output.
pub fn loss_grad<F>(mlp: &Mlp, inputs: &[Vec<f64>], mut loss: F) -> Result<(f64, Vec<f64>), NnError>
where
    F: FnMut(usize, &[f64]) -> (f64, Vec<f64>),
{
    let mut grad = vec![0.0; mlp.params().len()];
    let mut total = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let tape = mlp.tape(x)?;
        let (l, dy) = loss(i, tape.output());
        total += l;
        mlp.backward(&tape, &dy, Some(&mut grad));
    }
    if !total.is_finite() {
        return Err(NnError::NonFiniteLoss(total));
    }
    Ok((total, grad))
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Descend along `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NnError> {
        if params.len() != self.m.len() {
            return Err(NnError::DimensionMismatch { expected: self.m.len(), got: params.len() });
        }
        if grads.len() != self.m.len() {
            return Err(NnError::DimensionMismatch { expected: self.m.len(), got: grads.len() });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// `target ← τ·online + (1 − τ)·target`.
pub fn polyak_update(target: &mut [f64], online: &[f64], tau: f64) -> Result<(), NnError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(NnError::InvalidTau(tau));
    }
    if target.len() != online.len() {
        return Err(NnError::DimensionMismatch { expected: target.len(), got: online.len() });
    }
    for (t, &o) in target.iter_mut().zip(online) {
        *t = tau * o + (1.0 - tau) * *t;
    }
    Ok(())
}

/// Per-dimension affine normalization `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Fit to data rows. Near-constant dimensions get a unit scale floor of
    /// `1e-3` so that normalization stays finite.
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "cannot fit normalization to no data");
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            axpy(1.0 / n, r, &mut mean);
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for j in 0..d {
                var[j] += (r[j] - mean[j]).powi(2) / n;
            }
        }
        Self { mean, std: var.into_iter().map(|v| v.sqrt().max(1e-3)).collect() }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }

    /// `Σ log std`, the log-volume change of the normalization.
    pub fn log_scale(&self) -> f64 {
        self.std.iter().map(|s| s.ln()).sum()
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference_grad<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Worst coordinate-wise relative error `|a − n| / max(|a|, |n|, floor)`.
///
/// The floor keeps coordinates whose true derivative is zero (dead ReLU
/// units, masked weights) from dividing round-off by round-off.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    const FLOOR: f64 = 1e-6;
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(FLOOR))
        .fold(0.0, f64::max)
}
