//! Convolution kernels generated by integrating a learned ODE.
//!
//! The kernel `W(tau)` follows `dW/dtau = f(W, H_t)` from `W_0` over
//! `[0, tau_hat]`, where `tau_hat = |H_t| / max_s |H_s|`. The field `f` is a
//! one-hidden-layer tanh perceptron; the solve is classic fixed-step RK4 and
//! every stage is recorded on the graph, so gradients reach `W_0`, the field
//! weights, and the encodings (including through `tau_hat`).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Padding, Tensor, Var};
use crate::error::{domain_err, numerical_err, shape_err, Result};
use crate::temporal::TemporalEncoding;

/// A `k x k x c_in x c_out` convolution kernel with odd `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelState(Tensor);

impl KernelState {
    pub fn new(weights: Tensor) -> Result<Self> {
        match weights.shape()[..] {
            [a, b, _, _] if a == b && a % 2 == 1 => {}
            ref s => return Err(shape_err!("kernel must be odd k x k x c_in x c_out, got {s:?}")),
        }
        if !weights.is_finite() {
            return Err(numerical_err!("kernel has non-finite entries"));
        }
        Ok(KernelState(weights))
    }

    pub fn zeros(k: usize, c_in: usize, c_out: usize) -> Self {
        KernelState(Tensor::zeros(&[k, k, c_in, c_out]))
    }

    /// Center tap `scale` on every `i -> i` channel pair, zero elsewhere.
    pub fn identity(k: usize, channels: usize, scale: f64) -> Self {
        let r = k / 2;
        let c = channels;
        KernelState(Tensor::from_fn(&[k, k, c, c], |idx| {
            let (o, i, pos) = (idx % c, (idx / c) % c, idx / (c * c));
            if pos == r * k + r && i == o {
                scale
            } else {
                0.0
            }
        }))
    }

    pub fn k(&self) -> usize {
        self.0.shape()[0]
    }
    pub fn c_in(&self) -> usize {
        self.0.shape()[2]
    }
    pub fn c_out(&self) -> usize {
        self.0.shape()[3]
    }
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
    pub fn into_tensor(self) -> Tensor {
        self.0
    }
    /// Number of scalar weights, `k^2 c_in c_out`.
    pub fn numel(&self) -> usize {
        self.0.len()
    }
}

/// Two-layer perceptron `[vec(W) ++ H] -> vec(dW/dtau)`.
///
/// The first layer is stored split by input block (`state_weights` for the
/// kernel part, `encoding_weights` for the encoding part); this is the same
/// affine map as one matrix on the concatenation.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorFieldParams {
    pub state_weights: Tensor,
    pub encoding_weights: Tensor,
    pub hidden_bias: Tensor,
    pub output_weights: Tensor,
    pub output_bias: Tensor,
}

impl VectorFieldParams {
    /// First layer uniform in `+-1/sqrt(K + d)`, output layer zero, so the
    /// initial field vanishes everywhere.
    pub fn init(kernel_numel: usize, encoding_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((kernel_numel + encoding_dim) as f64).sqrt();
        let mut u = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        VectorFieldParams {
            state_weights: u(&[kernel_numel, hidden]),
            encoding_weights: u(&[encoding_dim, hidden]),
            hidden_bias: Tensor::zeros(&[hidden]),
            output_weights: Tensor::zeros(&[hidden, kernel_numel]),
            output_bias: Tensor::zeros(&[kernel_numel]),
        }
    }

    pub fn zeros(kernel_numel: usize, encoding_dim: usize, hidden: usize) -> Self {
        VectorFieldParams {
            state_weights: Tensor::zeros(&[kernel_numel, hidden]),
            encoding_weights: Tensor::zeros(&[encoding_dim, hidden]),
            hidden_bias: Tensor::zeros(&[hidden]),
            output_weights: Tensor::zeros(&[hidden, kernel_numel]),
            output_bias: Tensor::zeros(&[kernel_numel]),
        }
    }

    pub fn kernel_numel(&self) -> usize {
        self.state_weights.shape()[0]
    }

    pub fn encoding_dim(&self) -> usize {
        self.encoding_weights.shape()[0]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.state_weights,
            &self.encoding_weights,
            &self.hidden_bias,
            &self.output_weights,
            &self.output_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.state_weights,
            &mut self.encoding_weights,
            &mut self.hidden_bias,
            &mut self.output_weights,
            &mut self.output_bias,
        ]
    }

    pub fn bind(&self, g: &mut Graph) -> FieldVars {
        FieldVars {
            state_weights: g.leaf(self.state_weights.clone()),
            encoding_weights: g.leaf(self.encoding_weights.clone()),
            hidden_bias: g.leaf(self.hidden_bias.clone()),
            output_weights: g.leaf(self.output_weights.clone()),
            output_bias: g.leaf(self.output_bias.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FieldVars {
    pub state_weights: Var,
    pub encoding_weights: Var,
    pub hidden_bias: Var,
    pub output_weights: Var,
    pub output_bias: Var,
}

impl FieldVars {
    pub fn vars(&self) -> Vec<Var> {
        vec![
            self.state_weights,
            self.encoding_weights,
            self.hidden_bias,
            self.output_weights,
            self.output_bias,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdeConfig {
    /// RK4 steps over `[0, tau_hat]`.
    pub steps: usize,
    /// Floor for the horizon denominator.
    pub eps_norm: f64,
}

impl Default for OdeConfig {
    fn default() -> Self {
        OdeConfig { steps: 4, eps_norm: 1e-8 }
    }
}

impl OdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || !(self.eps_norm > 0.0) {
            return Err(domain_err!("ode config needs steps >= 1 and eps_norm > 0, got {self:?}"));
        }
        Ok(())
    }
}

/// `tau_hat` for every step of an encoded sequence, recorded on the graph.
///
/// The denominator is the largest encoding norm of this sequence, or
/// `eps_norm` when every norm is below it. Ties pick the earliest step.
pub fn horizons(g: &mut Graph, encodings: &[Var], cfg: &OdeConfig) -> Result<Vec<Var>> {
    cfg.validate()?;
    if encodings.is_empty() {
        return Err(domain_err!("no encodings to normalize"));
    }
    let norms = encodings.iter().map(|&h| g.l2_norm(h)).collect::<Result<Vec<_>>>()?;
    let (arg, largest) = norms
        .iter()
        .enumerate()
        .map(|(i, &n)| (i, g.value(n).item()))
        .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
    let denom = if largest >= cfg.eps_norm { norms[arg] } else { g.scalar(cfg.eps_norm) };
    norms.iter().map(|&n| g.div(n, denom)).collect()
}

/// `tau_hat` of step `t` (1-based) of a concrete encoding.
pub fn horizon(encoding: &TemporalEncoding, t: usize, cfg: &OdeConfig) -> Result<f64> {
    if t == 0 || t > encoding.len() {
        return Err(domain_err!("step {t} outside 1..={}", encoding.len()));
    }
    let mut g = Graph::new();
    let hs: Vec<Var> = encoding.steps.iter().map(|h| g.leaf(h.clone())).collect();
    let taus = horizons(&mut g, &hs, cfg)?;
    Ok(g.value(taus[t - 1]).item())
}

/// Classic RK4 for an autonomous field over `[0, tau]` in `steps` equal steps.
/// `tau` is a scalar node so the result is differentiable in the horizon.
pub fn rk4_integrate<F>(g: &mut Graph, y0: Var, tau: Var, steps: usize, mut field: F) -> Result<Var>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    if steps == 0 {
        return Err(domain_err!("rk4 needs at least one step"));
    }
    let h = g.scale(tau, 1.0 / steps as f64)?;
    let half = g.scale(h, 0.5)?;
    let sixth = g.scale(h, 1.0 / 6.0)?;
    let mut y = y0;
    for s in 0..steps {
        let k1 = field(g, y)?;
        let d = g.scale_by(half, k1)?;
        let y2 = g.add(y, d)?;
        let k2 = field(g, y2)?;
        let d = g.scale_by(half, k2)?;
        let y3 = g.add(y, d)?;
        let k3 = field(g, y3)?;
        let d = g.scale_by(h, k3)?;
        let y4 = g.add(y, d)?;
        let k4 = field(g, y4)?;
        let k23 = g.add(k2, k3)?;
        let k23 = g.scale(k23, 2.0)?;
        let k14 = g.add(k1, k4)?;
        let incr = g.add(k14, k23)?;
        let incr = g.scale_by(sixth, incr)?;
        y = g.add(y, incr)?;
        if !g.value(y).is_finite() {
            return Err(numerical_err!("rk4 state became non-finite at step {}", s + 1));
        }
    }
    Ok(y)
}

/// Integrates the kernel field from `w0` conditioned on `encoding` over
/// `[0, tau_hat]`. The encoding is held fixed during the solve.
pub fn rk4_solve(
    g: &mut Graph,
    field: &FieldVars,
    w0: Var,
    encoding: Var,
    tau_hat: Var,
    cfg: &OdeConfig,
) -> Result<Var> {
    cfg.validate()?;
    let shape = g.shape(w0).to_vec();
    let numel = g.value(w0).len();
    let (k_in, hidden) = match g.shape(field.state_weights)[..] {
        [a, b] => (a, b),
        ref s => return Err(shape_err!("field state weights must be rank 2, got {s:?}")),
    };
    let d = g.value(encoding).len();
    if k_in != numel || g.shape(field.encoding_weights) != [d, hidden] {
        return Err(shape_err!(
            "field expects {k_in} kernel weights and a {:?} encoding block, got kernel {shape:?} and encoding of {d}",
            g.shape(field.encoding_weights)
        ));
    }
    // H_t is constant over the solve, so its contribution to the hidden layer is computed once
    let enc = g.reshape(encoding, &[1, d])?;
    let enc = g.matmul(enc, field.encoding_weights)?;
    let enc = g.add_bias(enc, field.hidden_bias)?;
    let y0 = g.reshape(w0, &[1, numel])?;
    let y = rk4_integrate(g, y0, tau_hat, cfg.steps, |g, y| {
        let a = g.matmul(y, field.state_weights)?;
        let a = g.add(a, enc)?;
        let a = g.tanh(a)?;
        let out = g.matmul(a, field.output_weights)?;
        g.add_bias(out, field.output_bias)
    })?;
    g.reshape(y, &shape)
}

/// One kernel per encoding step, each solved afresh from `w0`.
pub fn evolve_kernels(
    g: &mut Graph,
    encodings: &[Var],
    field: &FieldVars,
    w0: Var,
    cfg: &OdeConfig,
) -> Result<Vec<Var>> {
    let taus = horizons(g, encodings, cfg)?;
    encodings
        .iter()
        .zip(taus)
        .map(|(&h, tau)| rk4_solve(g, field, w0, h, tau, cfg))
        .collect()
}

/// `conv2d(f0, w) + f0`.
pub fn adjust_feature(g: &mut Graph, f0: Var, w: Var, padding: Padding) -> Result<Var> {
    let (_, _, c) = g.value(f0).hwc()?;
    match g.shape(w)[..] {
        [_, _, ci, co] if ci == c && co == c => {}
        ref s => return Err(shape_err!("kernel {s:?} must map {c} channels to {c}")),
    }
    let y = g.conv2d(f0, w, padding)?;
    g.add(y, f0)
}

/// Tensor-level [`rk4_solve`].
pub fn solve_kernel(
    field: &VectorFieldParams,
    w0: &KernelState,
    encoding: &Tensor,
    tau_hat: f64,
    cfg: &OdeConfig,
) -> Result<KernelState> {
    if !(0.0..=1.0).contains(&tau_hat) {
        return Err(domain_err!("tau_hat {tau_hat} outside [0, 1]"));
    }
    let mut g = Graph::new();
    let fv = field.bind(&mut g);
    let w = g.leaf(w0.tensor().clone());
    let h = g.leaf(encoding.clone());
    let tau = g.scalar(tau_hat);
    let out = rk4_solve(&mut g, &fv, w, h, tau, cfg)?;
    KernelState::new(g.value(out).clone())
}

/// Tensor-level [`evolve_kernels`].
pub fn evolve_kernel_states(
    encoding: &TemporalEncoding,
    field: &VectorFieldParams,
    w0: &KernelState,
    cfg: &OdeConfig,
) -> Result<Vec<KernelState>> {
    let mut g = Graph::new();
    let fv = field.bind(&mut g);
    let w = g.leaf(w0.tensor().clone());
    let hs: Vec<Var> = encoding.steps.iter().map(|h| g.leaf(h.clone())).collect();
    let ws = evolve_kernels(&mut g, &hs, &fv, w, cfg)?;
    ws.into_iter().map(|v| KernelState::new(g.value(v).clone())).collect()
}

/// Tensor-level [`adjust_feature`].
pub fn adjust(f0: &Tensor, w: &KernelState, padding: Padding) -> Result<Tensor> {
    let mut g = Graph::new();
    let f = g.leaf(f0.clone());
    let wv = g.leaf(w.tensor().clone());
    let out = adjust_feature(&mut g, f, wv, padding)?;
    Ok(g.value(out).clone())
}
