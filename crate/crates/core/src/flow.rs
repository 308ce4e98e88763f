//! RealNVP-style normalizing flow over embedding vectors.
//!
//! The flow maps an embedding `z` to a latent `u` through a fixed
//! elementwise standardization followed by a stack of affine coupling
//! blocks. Each block permutes its input, keeps the first `⌈d/2⌉`
//! coordinates `z₁` and transforms the rest as
//!
//! ```text
//! y₂ = z₂ ⊙ exp(ŝ(z₁)) + t(z₁),   ŝ = c · tanh(s(z₁) / c)
//! ```
//!
//! where `s` and `t` are fully connected networks with two `tanh` hidden
//! layers. The log-density is `ln N(u; 0, I) + ln |det ∂u/∂z|`.
//!
//! Gradients of the mean negative log-likelihood are computed by an
//! explicit reverse pass through the blocks; training uses Adam.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::{ln_two_pi, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub n_blocks: usize,
    pub hidden: usize,
    /// Soft bound on the per-coordinate log-scale.
    pub clamp: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Standardize inputs with the training mean and standard deviation.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            n_blocks: 8,
            hidden: 256,
            clamp: 2.0,
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 50,
            standardize: true,
            seed: 0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.hidden == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("n_blocks, hidden, batch_size and epochs must be >= 1"));
        }
        if !(self.clamp > 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::invalid("clamp and learning_rate must be > 0"));
        }
        Ok(())
    }
}

/// Affine layer `y = W x + b` with `W` stored row-major (`output x input`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub input: usize,
    pub output: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            input,
            output,
            weight: vec![T::zero(); input * output],
            bias: vec![T::zero(); output],
        }
    }

    /// Glorot-uniform weights scaled by `gain`, zero bias.
    fn glorot(input: usize, output: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let limit = gain * (6.0 / (input + output) as f64).sqrt();
        let weight = (0..input * output)
            .map(|_| T::of(rng.random_range(-limit..=limit)))
            .collect();
        Dense {
            input,
            output,
            weight,
            bias: vec![T::zero(); output],
        }
    }

    fn forward(&self, x: &[T], y: &mut Vec<T>) {
        y.clear();
        y.extend(self.bias.iter().enumerate().map(|(o, &b)| {
            let row = &self.weight[o * self.input..(o + 1) * self.input];
            row.iter().zip(x).fold(b, |acc, (&w, &v)| acc + w * v)
        }));
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    fn backward(&self, x: &[T], gy: &[T], grad: &mut Dense<T>) -> Vec<T> {
        let mut gx = vec![T::zero(); self.input];
        for (o, &g) in gy.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            grad.bias[o] = grad.bias[o] + g;
            let row = o * self.input;
            for i in 0..self.input {
                grad.weight[row + i] = grad.weight[row + i] + g * x[i];
                gx[i] = gx[i] + g * self.weight[row + i];
            }
        }
        gx
    }
}

/// Two-hidden-layer perceptron with `tanh` activations and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: [Dense<T>; 3],
}

#[derive(Debug, Default)]
struct MlpTrace<T> {
    h1: Vec<T>,
    h2: Vec<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Mlp {
            layers: [
                Dense::zeros(input, hidden),
                Dense::zeros(hidden, hidden),
                Dense::zeros(hidden, output),
            ],
        }
    }

    fn random(input: usize, hidden: usize, output: usize, output_gain: f64, rng: &mut impl Rng) -> Self {
        Mlp {
            layers: [
                Dense::glorot(input, hidden, 1.0, rng),
                Dense::glorot(hidden, hidden, 1.0, rng),
                Dense::glorot(hidden, output, output_gain, rng),
            ],
        }
    }

    fn forward(&self, x: &[T], trace: &mut MlpTrace<T>, out: &mut Vec<T>) {
        self.layers[0].forward(x, &mut trace.h1);
        trace.h1.iter_mut().for_each(|v| *v = v.tanh());
        self.layers[1].forward(&trace.h1, &mut trace.h2);
        trace.h2.iter_mut().for_each(|v| *v = v.tanh());
        self.layers[2].forward(&trace.h2, out);
    }

    fn backward(&self, x: &[T], trace: &MlpTrace<T>, g_out: &[T], grad: &mut Mlp<T>) -> Vec<T> {
        let [g0, g1, g2] = &mut grad.layers;
        let mut g = self.layers[2].backward(&trace.h2, g_out, g2);
        g.iter_mut()
            .zip(&trace.h2)
            .for_each(|(g, &h)| *g = *g * (T::one() - h * h));
        let mut g = self.layers[1].backward(&trace.h1, &g, g1);
        g.iter_mut()
            .zip(&trace.h1)
            .for_each(|(g, &h)| *g = *g * (T::one() - h * h));
        self.layers[0].backward(x, &g, g0)
    }

    fn params(&self) -> impl Iterator<Item = &T> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(&l.bias))
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingBlock<T> {
    /// Block input is reordered as `p[i] = x[permutation[i]]`.
    pub permutation: Vec<usize>,
    pub scale_net: Mlp<T>,
    pub shift_net: Mlp<T>,
}

#[derive(Debug, Default)]
struct BlockTrace<T> {
    z1: Vec<T>,
    z2: Vec<T>,
    s_hat: Vec<T>,
    exp_s: Vec<T>,
    s_trace: MlpTrace<T>,
    t_trace: MlpTrace<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NfModel<T> {
    d: usize,
    clamp: T,
    /// Fixed standardization `(z - shift) / scale` applied before the blocks.
    pub input_shift: Vec<T>,
    pub input_scale: Vec<T>,
    pub blocks: Vec<CouplingBlock<T>>,
    pub fit_config: Option<FlowConfig>,
}

fn split_sizes(d: usize) -> (usize, usize) {
    (d.div_ceil(2), d / 2)
}

impl<T: Scalar> NfModel<T> {
    /// All-zero subnets with identity permutations: `u = z`, `logdet = 0`.
    pub fn identity(d: usize, n_blocks: usize, hidden: usize, clamp: f64) -> Result<Self> {
        if d < 2 {
            return Err(Error::invalid(format!("flow dimension must be >= 2, got {d}")));
        }
        let (d1, d2) = split_sizes(d);
        let block = CouplingBlock {
            permutation: (0..d).collect(),
            scale_net: Mlp::zeros(d1, hidden, d2),
            shift_net: Mlp::zeros(d1, hidden, d2),
        };
        Ok(NfModel {
            d,
            clamp: T::of(clamp),
            input_shift: vec![T::zero(); d],
            input_scale: vec![T::one(); d],
            blocks: vec![block; n_blocks],
            fit_config: None,
        })
    }

    /// Seeded random permutations and Glorot-initialized subnets. The
    /// output layers are scaled by `output_gain`; `0` starts the flow at an
    /// identity map on the standardized inputs.
    pub fn random(d: usize, cfg: &FlowConfig, output_gain: f64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut model = Self::identity(d, cfg.n_blocks, cfg.hidden, cfg.clamp)?;
        let mut rng = rng::seeded(seed);
        let (d1, d2) = split_sizes(d);
        for block in &mut model.blocks {
            block.permutation.shuffle(&mut rng);
            block.scale_net = Mlp::random(d1, cfg.hidden, d2, output_gain, &mut rng);
            block.shift_net = Mlp::random(d1, cfg.hidden, d2, output_gain, &mut rng);
        }
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn clamp(&self) -> T {
        self.clamp
    }

    pub fn hidden(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.scale_net.layers[0].output)
    }

    pub fn n_params(&self) -> usize {
        self.params().count()
    }

    /// Trainable parameters in a fixed order (per block: scale net, then
    /// shift net; per layer: weights, then biases).
    pub fn params(&self) -> impl Iterator<Item = &T> {
        self.blocks
            .iter()
            .flat_map(|b| b.scale_net.params().chain(b.shift_net.params()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.scale_net.params_mut().chain(b.shift_net.params_mut()))
    }

    fn zeroed_like(&self) -> Self {
        let mut g = self.clone();
        g.params_mut().for_each(|p| *p = T::zero());
        g
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shift.len() != self.d || self.input_scale.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: self.input_shift.len().min(self.input_scale.len()),
            });
        }
        if self.input_scale.iter().any(|&s| !(s > T::zero())) {
            return Err(Error::invalid("standardization scales must be > 0"));
        }
        let (d1, d2) = split_sizes(self.d);
        for block in &self.blocks {
            let mut seen = vec![false; self.d];
            if block.permutation.len() != self.d
                || block
                    .permutation
                    .iter()
                    .any(|&i| i >= self.d || std::mem::replace(&mut seen[i], true))
            {
                return Err(Error::invalid("block permutation is not a bijection"));
            }
            for net in [&block.scale_net, &block.shift_net] {
                let [a, b, c] = &net.layers;
                if a.input != d1 || c.output != d2 || a.output != b.input || b.output != c.input {
                    return Err(Error::invalid("subnet shapes do not match the flow dimension"));
                }
                for l in &net.layers {
                    if l.weight.len() != l.input * l.output || l.bias.len() != l.output {
                        return Err(Error::invalid("layer parameter count mismatch"));
                    }
                }
            }
        }
        if self.params().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("flow parameters".into()));
        }
        Ok(())
    }

    fn check_dim(&self, z: &[T]) -> Result<()> {
        if z.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: z.len(),
            });
        }
        Ok(())
    }

    fn standardize(&self, z: &[T]) -> (Vec<T>, T) {
        let x = z
            .iter()
            .zip(self.input_shift.iter().zip(&self.input_scale))
            .map(|(&v, (&m, &s))| (v - m) / s)
            .collect();
        let logdet = -self.input_scale.iter().map(|s| s.ln()).sum::<T>();
        (x, logdet)
    }

    fn block_forward(&self, block: &CouplingBlock<T>, x: &[T], trace: &mut BlockTrace<T>) -> Vec<T> {
        let (d1, _) = split_sizes(self.d);
        let p: Vec<T> = block.permutation.iter().map(|&i| x[i]).collect();
        trace.z1.clear();
        trace.z1.extend_from_slice(&p[..d1]);
        trace.z2.clear();
        trace.z2.extend_from_slice(&p[d1..]);
        let mut s_raw = Vec::new();
        let mut t = Vec::new();
        block.scale_net.forward(&trace.z1, &mut trace.s_trace, &mut s_raw);
        block.shift_net.forward(&trace.z1, &mut trace.t_trace, &mut t);
        let c = self.clamp;
        trace.s_hat = s_raw.iter().map(|&s| c * (s / c).tanh()).collect();
        trace.exp_s = trace.s_hat.iter().map(|s| s.exp()).collect();
        let mut y = trace.z1.clone();
        y.extend(
            trace
                .z2
                .iter()
                .zip(trace.exp_s.iter().zip(&t))
                .map(|(&z, (&e, &t))| z * e + t),
        );
        y
    }

    fn forward_traced(&self, z: &[T], traces: &mut Vec<BlockTrace<T>>) -> (Vec<T>, T) {
        let (mut x, mut logdet) = self.standardize(z);
        traces.resize_with(self.blocks.len(), BlockTrace::default);
        for (block, trace) in self.blocks.iter().zip(traces.iter_mut()) {
            x = self.block_forward(block, &x, trace);
            logdet = logdet + trace.s_hat.iter().copied().sum::<T>();
        }
        (x, logdet)
    }

    /// `z ↦ (u, ln |det ∂u/∂z|)`.
    pub fn forward(&self, z: &[T]) -> Result<(Vec<T>, T)> {
        self.check_dim(z)?;
        let mut traces = Vec::new();
        Ok(self.forward_traced(z, &mut traces))
    }

    /// Exact inverse of [`NfModel::forward`].
    pub fn inverse(&self, u: &[T]) -> Result<Vec<T>> {
        self.check_dim(u)?;
        let (d1, _) = split_sizes(self.d);
        let c = self.clamp;
        let mut y = u.to_vec();
        let mut trace = MlpTrace::default();
        for block in self.blocks.iter().rev() {
            let z1 = &y[..d1];
            let mut s_raw = Vec::new();
            let mut t = Vec::new();
            block.scale_net.forward(z1, &mut trace, &mut s_raw);
            block.shift_net.forward(z1, &mut trace, &mut t);
            let mut p = z1.to_vec();
            p.extend(
                y[d1..]
                    .iter()
                    .zip(s_raw.iter().zip(&t))
                    .map(|(&y2, (&s, &t))| (y2 - t) * (-(c * (s / c).tanh())).exp()),
            );
            let mut x = vec![T::zero(); self.d];
            for (i, &src) in block.permutation.iter().enumerate() {
                x[src] = p[i];
            }
            y = x;
        }
        Ok(y.iter()
            .zip(self.input_shift.iter().zip(&self.input_scale))
            .map(|(&v, (&m, &s))| v * s + m)
            .collect())
    }

    /// `ln N(u; 0, I) + ln |det ∂u/∂z|`.
    pub fn log_density(&self, z: &[T]) -> Result<T> {
        let (u, logdet) = self.forward(z)?;
        Ok(self.prior_log_density(&u) + logdet)
    }

    fn prior_log_density(&self, u: &[T]) -> T {
        let sq: T = u.iter().map(|&v| v * v).sum();
        -T::of(0.5) * (sq + T::of_usize(self.d) * ln_two_pi::<T>())
    }

    /// Negative log-likelihood of one sample; accumulates `weight · ∂nll/∂θ`
    /// into `grad`.
    fn nll_backward(&self, z: &[T], weight: T, traces: &mut Vec<BlockTrace<T>>, grad: &mut NfModel<T>) -> T {
        let (d1, _) = split_sizes(self.d);
        let (u, logdet) = self.forward_traced(z, traces);
        let nll = -(self.prior_log_density(&u) + logdet);
        let g_logdet = -weight;
        let mut gy: Vec<T> = u.iter().map(|&v| v * weight).collect();
        let c = self.clamp;
        for ((block, trace), gblock) in self.blocks.iter().zip(traces.iter()).zip(grad.blocks.iter_mut()).rev() {
            let gy2 = &gy[d1..];
            let g_s_raw: Vec<T> = gy2
                .iter()
                .zip(trace.z2.iter().zip(&trace.exp_s))
                .zip(&trace.s_hat)
                .map(|((&g, (&z, &e)), &sh)| {
                    let r = sh / c;
                    (g * z * e + g_logdet) * (T::one() - r * r)
                })
                .collect();
            let mut gp: Vec<T> = gy[..d1].to_vec();
            let gs_in = block
                .scale_net
                .backward(&trace.z1, &trace.s_trace, &g_s_raw, &mut gblock.scale_net);
            let gt_in = block
                .shift_net
                .backward(&trace.z1, &trace.t_trace, gy2, &mut gblock.shift_net);
            for ((g, a), b) in gp.iter_mut().zip(gs_in).zip(gt_in) {
                *g = *g + a + b;
            }
            gp.extend(gy2.iter().zip(&trace.exp_s).map(|(&g, &e)| g * e));
            let mut gx = vec![T::zero(); self.d];
            for (i, &src) in block.permutation.iter().enumerate() {
                gx[src] = gp[i];
            }
            gy = gx;
        }
        nll
    }

    /// Mean negative log-likelihood over `batch` and its gradient with
    /// respect to [`NfModel::params`] (same order).
    pub fn nll_and_gradient(&self, batch: &[&[T]]) -> Result<(T, Vec<T>)> {
        for z in batch {
            self.check_dim(z)?;
        }
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        const CHUNK: usize = 16;
        let weight = T::one() / T::of_usize(batch.len());
        // Fixed chunking and an in-order reduction keep the result independent
        // of the thread count.
        let partials: Vec<(T, NfModel<T>)> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut grad = self.zeroed_like();
                let mut traces = Vec::new();
                let loss = chunk
                    .iter()
                    .map(|z| self.nll_backward(z, weight, &mut traces, &mut grad))
                    .fold(T::zero(), |a, b| a + b);
                (loss, grad)
            })
            .collect();
        let mut total = T::zero();
        let mut flat = vec![T::zero(); self.n_params()];
        for (loss, grad) in partials {
            total = total + loss;
            for (acc, &g) in flat.iter_mut().zip(grad.params()) {
                *acc = *acc + g;
            }
        }
        Ok((total * weight, flat))
    }

    /// Same model in another scalar type.
    pub fn cast<U: Scalar>(&self) -> NfModel<U> {
        let conv = |v: &Vec<T>| v.iter().map(|&x| U::of(x.as_f64())).collect::<Vec<U>>();
        let conv_mlp = |m: &Mlp<T>| Mlp {
            layers: m.layers.clone().map(|l| Dense {
                input: l.input,
                output: l.output,
                weight: conv(&l.weight),
                bias: conv(&l.bias),
            }),
        };
        NfModel {
            d: self.d,
            clamp: U::of(self.clamp.as_f64()),
            input_shift: conv(&self.input_shift),
            input_scale: conv(&self.input_scale),
            blocks: self
                .blocks
                .iter()
                .map(|b| CouplingBlock {
                    permutation: b.permutation.clone(),
                    scale_net: conv_mlp(&b.scale_net),
                    shift_net: conv_mlp(&b.shift_net),
                })
                .collect(),
            fit_config: self.fit_config.clone(),
        }
    }
}

/// Adam optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(n: usize, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step<'a, T: Scalar>(&mut self, params: impl Iterator<Item = &'a mut T>, grad: &[T]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (((p, &g), m), v) in params.zip(grad).zip(&mut self.m).zip(&mut self.v) {
            let g = g.as_f64();
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let update = self.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + self.epsilon);
            *p = *p - T::of(update);
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowFit<T> {
    pub model: NfModel<T>,
    /// Mean training NLL of each epoch (averaged over its mini-batches).
    pub loss_trace: Vec<T>,
}

fn column_stats<T: Scalar>(data: &[Vec<T>], d: usize) -> (Vec<T>, Vec<T>) {
    let n = T::of_usize(data.len());
    let mean: Vec<T> = (0..d).map(|a| data.iter().map(|x| x[a]).sum::<T>() / n).collect();
    let std = (0..d)
        .map(|a| {
            let var = data.iter().map(|x| (x[a] - mean[a]).powi(2)).sum::<T>() / n;
            // constant columns keep unit scale
            if var > T::of(1e-24) {
                var.sqrt()
            } else {
                T::one()
            }
        })
        .collect();
    (mean, std)
}

/// Trains a flow on `data` by mini-batch Adam on the mean negative
/// log-likelihood.
///
/// The model starts from [`NfModel::random`] with zero-gain output layers
/// (identity coupling maps). Mini-batch order is reshuffled each epoch from
/// the configured seed, so two runs with equal inputs are identical.
pub fn nf_fit<T: Scalar>(data: &[Vec<T>], cfg: &FlowConfig) -> Result<FlowFit<T>> {
    cfg.validate()?;
    let n = data.len();
    if n < cfg.batch_size {
        return Err(Error::invalid(format!(
            "need at least batch_size = {} samples, got {n}",
            cfg.batch_size
        )));
    }
    let d = data[0].len();
    for row in data {
        if row.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training data".into()));
        }
    }
    let mut model = NfModel::random(d, cfg, 0.0, rng::derive_seed(cfg.seed, 0))?;
    if cfg.standardize {
        let (shift, scale) = column_stats(data, d);
        model.input_shift = shift;
        model.input_scale = scale;
    }
    let mut adam = Adam::new(model.n_params(), cfg.learning_rate);
    let mut rng = rng::seeded(rng::derive_seed(cfg.seed, 1));
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut last_finite = f64::NAN;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = T::zero();
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&[T]> = idx.iter().map(|&i| data[i].as_slice()).collect();
            let (loss, grad) = model.nll_and_gradient(&batch)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    last_finite_loss: last_finite,
                    last_state: Box::new(model.cast()),
                });
            }
            last_finite = loss.as_f64();
            adam.step(model.params_mut(), &grad);
            epoch_loss = epoch_loss + loss * T::of_usize(idx.len());
        }
        trace.push(epoch_loss / T::of_usize(n));
    }
    model.fit_config = Some(cfg.clone());
    Ok(FlowFit {
        model,
        loss_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn small_cfg(n_blocks: usize, hidden: usize) -> FlowConfig {
        FlowConfig {
            n_blocks,
            hidden,
            ..FlowConfig::default()
        }
    }

    /// d = 2, one block, ŝ ≡ 0.5 and t ≡ 1 through the output biases.
    fn constant_coupling() -> NfModel<f64> {
        let mut m = NfModel::identity(2, 1, 4, 2.0).unwrap();
        m.blocks[0].scale_net.layers[2].bias[0] = 2.0 * (0.5f64 / 2.0).atanh();
        m.blocks[0].shift_net.layers[2].bias[0] = 1.0;
        m
    }

    #[test]
    fn identity_flow_is_identity() {
        let m = NfModel::<f64>::identity(3, 2, 5, 2.0).unwrap();
        let z = [0.3, -1.2, 4.0];
        let (u, ld) = m.forward(&z).unwrap();
        assert_eq!(u, z);
        assert_eq!(ld, 0.0);
        assert_eq!(m.inverse(&z).unwrap(), z);
        let m2 = NfModel::<f64>::identity(2, 1, 3, 2.0).unwrap();
        assert!((m2.log_density(&[0.0, 0.0]).unwrap() + 1.837_877_066_409_345_5).abs() < 1e-12);
    }

    #[test]
    fn constant_coupling_by_hand() {
        let m = constant_coupling();
        let (a, b) = (0.7, -1.3);
        let (u, ld) = m.forward(&[a, b]).unwrap();
        assert!((u[0] - a).abs() < 1e-15);
        assert!((u[1] - (b * 0.5f64.exp() + 1.0)).abs() < 1e-12);
        assert!((ld - 0.5).abs() < 1e-12);
        let z = m.inverse(&u).unwrap();
        assert!((z[0] - a).abs() < 1e-12 && (z[1] - b).abs() < 1e-12);
    }

    #[test]
    fn dimension_checks() {
        assert!(NfModel::<f64>::identity(1, 1, 2, 2.0).is_err());
        let m = NfModel::<f64>::identity(2, 1, 2, 2.0).unwrap();
        assert!(matches!(
            m.forward(&[1.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
        assert!(m.inverse(&[1.0, 2.0, 3.0]).is_err());
        assert!(m.log_density(&[1.0]).is_err());
    }

    #[test]
    fn odd_dimension_round_trip() {
        let m = NfModel::<f64>::random(5, &small_cfg(3, 8), 1.0, 7).unwrap();
        m.validate().unwrap();
        let z = [0.1, -0.2, 0.3, 1.5, -2.0];
        let back = m.inverse(&m.forward(&z).unwrap().0).unwrap();
        for (a, b) in z.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn validate_rejects_broken_permutation() {
        let mut m = NfModel::<f64>::identity(3, 1, 2, 2.0).unwrap();
        m.blocks[0].permutation = vec![0, 0, 2];
        assert!(m.validate().is_err());
    }

    #[test]
    fn standardization_contributes_to_logdet() {
        let mut m = NfModel::<f64>::identity(2, 1, 2, 2.0).unwrap();
        m.input_shift = vec![1.0, -1.0];
        m.input_scale = vec![2.0, 0.5];
        let (u, ld) = m.forward(&[3.0, 0.0]).unwrap();
        assert_eq!(u, vec![1.0, 2.0]);
        assert!((ld - (-(2.0f64.ln() + 0.5f64.ln()))).abs() < 1e-15);
        assert_eq!(m.inverse(&u).unwrap(), vec![3.0, 0.0]);
    }

    #[test]
    fn gradient_of_constant_coupling_bias() {
        // nll = 0.5 (a² + (b e^s + t)²) + ln 2π - s, with s the clamped bias.
        let m = constant_coupling();
        let z = [0.7, -1.3];
        let (_, grad) = m.nll_and_gradient(&[&z]).unwrap();
        let s = 0.5f64;
        let y2 = z[1] * s.exp() + 1.0;
        let d_shift_bias = y2;
        let d_s_hat = y2 * z[1] * s.exp() - 1.0;
        let d_scale_bias = d_s_hat * (1.0 - (s / 2.0).powi(2));
        // scale net comes first; its output bias is the last scale-net parameter
        let n_mlp = m.blocks[0].scale_net.params().count();
        assert!((grad[n_mlp - 1] - d_scale_bias).abs() < 1e-12);
        assert!((grad[2 * n_mlp - 1] - d_shift_bias).abs() < 1e-12);
    }

    #[test]
    fn cast_round_trips_through_f32() {
        let m = NfModel::<f64>::random(4, &small_cfg(2, 4), 1.0, 3).unwrap();
        let m32: NfModel<f32> = m.cast();
        let z = [0.5f32, -0.25, 1.0, 2.0];
        let back = m32.inverse(&m32.forward(&z).unwrap().0).unwrap();
        for (a, b) in z.iter().zip(&back) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn fit_requires_a_full_batch() {
        let data = vec![vec![0.0f64, 1.0]; 10];
        let cfg = FlowConfig {
            batch_size: 32,
            ..small_cfg(2, 4)
        };
        assert!(nf_fit(&data, &cfg).is_err());
    }

    #[test]
    fn fit_is_deterministic() {
        let mut rng = rng::seeded(1);
        let data: Vec<Vec<f64>> = (0..64)
            .map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let cfg = FlowConfig {
            batch_size: 16,
            epochs: 3,
            ..small_cfg(2, 8)
        };
        let a = nf_fit(&data, &cfg).unwrap();
        let b = nf_fit(&data, &cfg).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.model, b.model);
    }
}
