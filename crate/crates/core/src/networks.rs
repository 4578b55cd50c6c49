//! Two-layer perceptrons (affine → ReLU → affine) with hand-written
//! backpropagation, the batching used to feed complex gradients through them,
//! and an Adam optimizer.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{CMatrix, C64};

/// Hidden width of the precoder network.
pub const PN_HIDDEN: usize = 200;
/// Hidden width of the amplitude and phase networks.
pub const AN_TN_HIDDEN: usize = 300;

/// `y = W2 · relu(W1 x + b1) + b2`, parameters stored flat as
/// `[W1 (row-major, hidden × input), b1, W2 (row-major, output × hidden), b2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    input_dim: usize,
    hidden_dim: usize,
    output_dim: usize,
    params: Vec<f64>,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    hidden_pre: Vec<f64>,
}

impl Mlp {
    pub fn zeros(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        let len = hidden_dim * input_dim + hidden_dim + output_dim * hidden_dim + output_dim;
        Self {
            input_dim,
            hidden_dim,
            output_dim,
            params: vec![0.0; len],
        }
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn random<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, output_dim: usize, rng: &mut R) -> Self {
        let mut net = Self::zeros(input_dim, hidden_dim, output_dim);
        let b1 = 1.0 / (input_dim as f64).sqrt();
        for w in net.w1_mut() {
            *w = rng.random_range(-b1..b1);
        }
        let b2 = 1.0 / (hidden_dim as f64).sqrt();
        for w in net.w2_mut() {
            *w = rng.random_range(-b2..b2);
        }
        net
    }

    /// Precoder network: `M → 200 → M`.
    pub fn precoder<R: Rng + ?Sized>(antennas: usize, rng: &mut R) -> Self {
        Self::random(antennas, PN_HIDDEN, antennas, rng)
    }

    /// Amplitude or phase network: `2N → 300 → 2N`.
    pub fn coefficient<R: Rng + ?Sized>(elements: usize, rng: &mut R) -> Self {
        Self::random(2 * elements, AN_TN_HIDDEN, 2 * elements, rng)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn offsets(&self) -> [usize; 4] {
        let w1 = 0;
        let b1 = w1 + self.hidden_dim * self.input_dim;
        let w2 = b1 + self.hidden_dim;
        let b2 = w2 + self.output_dim * self.hidden_dim;
        [w1, b1, w2, b2]
    }

    pub fn w1(&self) -> &[f64] {
        let [w1, b1, _, _] = self.offsets();
        &self.params[w1..b1]
    }

    pub fn b1(&self) -> &[f64] {
        let [_, b1, w2, _] = self.offsets();
        &self.params[b1..w2]
    }

    pub fn w2(&self) -> &[f64] {
        let [_, _, w2, b2] = self.offsets();
        &self.params[w2..b2]
    }

    pub fn b2(&self) -> &[f64] {
        let [_, _, _, b2] = self.offsets();
        &self.params[b2..]
    }

    pub fn w1_mut(&mut self) -> &mut [f64] {
        let [w1, b1, _, _] = self.offsets();
        &mut self.params[w1..b1]
    }

    pub fn b1_mut(&mut self) -> &mut [f64] {
        let [_, b1, w2, _] = self.offsets();
        &mut self.params[b1..w2]
    }

    pub fn w2_mut(&mut self) -> &mut [f64] {
        let [_, _, w2, b2] = self.offsets();
        &mut self.params[w2..b2]
    }

    pub fn b2_mut(&mut self) -> &mut [f64] {
        let [_, _, _, b2] = self.offsets();
        &mut self.params[b2..]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::Config(format!(
                "network expects input of length {}, got {}",
                self.input_dim,
                x.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(x)?;
        let (w1, b1, w2, b2) = (self.w1(), self.b1(), self.w2(), self.b2());
        let hidden_pre: Vec<f64> = (0..self.hidden_dim)
            .map(|h| {
                let row = &w1[h * self.input_dim..(h + 1) * self.input_dim];
                b1[h] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect();
        if let Some(h) = hidden_pre.iter().position(|z| !z.is_finite()) {
            return Err(Error::NonFinite(format!("hidden unit {h} pre-activation is {}", hidden_pre[h])));
        }
        let out: Vec<f64> = (0..self.output_dim)
            .map(|o| {
                let row = &w2[o * self.hidden_dim..(o + 1) * self.hidden_dim];
                b2[o]
                    + row
                        .iter()
                        .zip(&hidden_pre)
                        .map(|(w, z)| w * z.max(0.0))
                        .sum::<f64>()
            })
            .collect();
        if let Some(o) = out.iter().position(|y| !y.is_finite()) {
            return Err(Error::NonFinite(format!("network output {o} is {}", out[o])));
        }
        Ok((
            out,
            ForwardCache {
                input: x.to_vec(),
                hidden_pre,
            },
        ))
    }

    /// Accumulates `∂L/∂params` into `grad` given `∂L/∂y` for the pass that
    /// produced `cache`. Returns nothing about the input: network inputs are
    /// treated as constants by the training loop.
    pub fn backward(&self, cache: &ForwardCache, d_out: &[f64], grad: &mut [f64]) {
        assert_eq!(d_out.len(), self.output_dim, "output gradient length");
        assert_eq!(grad.len(), self.params.len(), "parameter gradient length");
        let [o_w1, o_b1, o_w2, o_b2] = self.offsets();
        let w2 = self.w2();
        let mut d_hidden = vec![0.0; self.hidden_dim];
        for (o, d) in d_out.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            grad[o_b2 + o] += d;
            let row = o * self.hidden_dim;
            for (h, z) in cache.hidden_pre.iter().enumerate() {
                if *z > 0.0 {
                    grad[o_w2 + row + h] += d * z;
                    d_hidden[h] += d * w2[row + h];
                }
            }
        }
        for (h, dh) in d_hidden.iter().enumerate() {
            if *dh == 0.0 {
                continue;
            }
            grad[o_b1 + h] += dh;
            let row = o_w1 + h * self.input_dim;
            for (i, x) in cache.input.iter().enumerate() {
                grad[row + i] += dh * x;
            }
        }
    }
}

/// Splits an M×K complex matrix into `2K` real M-vectors: the real parts of
/// the K columns followed by their imaginary parts.
pub fn complex_to_batch(m: &CMatrix) -> Vec<Vec<f64>> {
    let re = (0..m.cols()).map(|c| m.col(c).iter().map(|z| z.re).collect());
    let im = (0..m.cols()).map(|c| m.col(c).iter().map(|z| z.im).collect());
    re.chain(im).collect()
}

/// Inverse of [`complex_to_batch`].
pub fn batch_to_complex(batch: &[Vec<f64>], rows: usize) -> CMatrix {
    let cols = batch.len() / 2;
    CMatrix::from_fn(rows, cols, |r, c| C64::new(batch[c][r], batch[cols + c][r]))
}

/// Runs the precoder network on a complex gradient, column by column, with
/// real and imaginary parts as separate batch entries sharing weights.
pub fn pn_forward(net: &Mlp, grad_w: &CMatrix) -> Result<CMatrix> {
    Ok(pn_forward_cached(net, grad_w)?.0)
}

pub fn pn_forward_cached(net: &Mlp, grad_w: &CMatrix) -> Result<(CMatrix, Vec<ForwardCache>)> {
    if net.output_dim != net.input_dim {
        return Err(Error::Config(format!(
            "precoder network must map M to M, got {} -> {}",
            net.input_dim, net.output_dim
        )));
    }
    let mut outs = Vec::with_capacity(2 * grad_w.cols());
    let mut caches = Vec::with_capacity(2 * grad_w.cols());
    for x in complex_to_batch(grad_w) {
        let (y, cache) = net.forward_cached(&x)?;
        outs.push(y);
        caches.push(cache);
    }
    Ok((batch_to_complex(&outs, grad_w.rows()), caches))
}

/// Backpropagates `∂L/∂ΔW` (real coordinates packed as `∂/∂Re + j∂/∂Im`)
/// through a batched precoder pass.
pub fn pn_backward(net: &Mlp, caches: &[ForwardCache], d_delta: &CMatrix, grad: &mut [f64]) {
    for (cache, d) in caches.iter().zip(complex_to_batch(d_delta)) {
        net.backward(cache, &d, grad);
    }
}

fn coefficient_forward(net: &Mlp, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
    if net.output_dim != x.len() {
        return Err(Error::Config(format!(
            "coefficient network must map 2N to 2N, got {} -> {}",
            net.input_dim, net.output_dim
        )));
    }
    net.forward_cached(x)
}

/// Amplitude network pass on `∂R/∂(β_t, β_r)`.
pub fn an_forward(net: &Mlp, grad_beta: &[f64]) -> Result<Vec<f64>> {
    Ok(coefficient_forward(net, grad_beta)?.0)
}

/// Phase network pass on `∂R/∂(θ_t, θ_r)`; the output is the raw delta fed to
/// the sigmoid regulator.
pub fn tn_forward(net: &Mlp, grad_theta: &[f64]) -> Result<Vec<f64>> {
    Ok(coefficient_forward(net, grad_theta)?.0)
}

pub(crate) fn coefficient_forward_cached(net: &Mlp, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
    coefficient_forward(net, x)
}

/// Adam moments and step counter for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam step that moves `params` to decrease the loss
/// whose gradient is `grad`. A non-finite gradient leaves everything as is.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grad.len() || params.len() != state.first_moment.len() {
        return Err(Error::Config(format!(
            "Adam shapes differ: params {}, grad {}, state {}",
            params.len(),
            grad.len(),
            state.first_moment.len()
        )));
    }
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i} is {}", grad[i])));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grad)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &str = "stargml-checkpoint 1";

/// Serializes named networks as UTF-8 text.
///
/// ```text
/// stargml-checkpoint 1
/// mlp <name> <input> <hidden> <output>
/// <parameter>        one per line, W1 | b1 | W2 | b2, shortest round-trip decimal
/// ...
/// end
/// ```
///
/// Decimal text sidesteps byte order entirely and round-trips every `f64`
/// exactly.
pub fn checkpoint_to_string(nets: &[(&str, &Mlp)]) -> String {
    let mut out = String::new();
    writeln!(out, "{CHECKPOINT_MAGIC}").unwrap();
    for (name, net) in nets {
        writeln!(out, "mlp {name} {} {} {}", net.input_dim, net.hidden_dim, net.output_dim).unwrap();
        for p in &net.params {
            writeln!(out, "{p:?}").unwrap();
        }
        writeln!(out, "end").unwrap();
    }
    out
}

pub fn checkpoint_from_str(text: &str) -> Result<Vec<(String, Mlp)>> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(Error::Parse("missing checkpoint header".into()));
    }
    let mut nets = Vec::new();
    while let Some(line) = lines.next() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [tag, name, i, h, o] = fields[..] else {
            return Err(Error::Parse(format!("bad network header: {line}")));
        };
        if tag != "mlp" {
            return Err(Error::Parse(format!("expected 'mlp', got {tag}")));
        }
        let dim = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("{s}: {e}")));
        let mut net = Mlp::zeros(dim(i)?, dim(h)?, dim(o)?);
        for p in net.params.iter_mut() {
            let v = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("network {name} truncated")))?;
            *p = v.parse().map_err(|e| Error::Parse(format!("{v}: {e}")))?;
        }
        if lines.next() != Some("end") {
            return Err(Error::Parse(format!("network {name}: parameter count mismatch")));
        }
        nets.push((name.to_string(), net));
    }
    Ok(nets)
}

pub fn save_checkpoint(path: &Path, nets: &[(&str, &Mlp)]) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(nets)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Mlp)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text)
}
