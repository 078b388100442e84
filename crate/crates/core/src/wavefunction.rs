//! Autoregressive GRU wavefunction.
//!
//! The network reads the lattice as a 1D sequence in row-major order. At
//! site `i` it consumes the one-hot encoding of `σ_{i-1}` (a zero vector at
//! `i = 0`) and the hidden state `h_i`, and emits the conditional
//! distribution of `σ_i`:
//!
//! ```text
//! r   = logistic(x W_r + h U_r + b_r)
//! z   = logistic(x W_z + h U_z + b_z)
//! h~  = tanh(x W_c + (r ⊙ h) U_c + b_c)
//! h'  = (1 - z) ⊙ h + z ⊙ h~
//! p_i = softmax(h' V + c)
//! ```
//!
//! Kernels act on row vectors: `(x W)_j = Σ_k x_k W[k][j]`, stored row-major.
//! The positive amplitude is `ψ(σ) = sqrt(p(σ))`.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::Configuration;
use crate::rng;

/// Anything that assigns a normalized log-probability to a configuration.
pub trait LogProb: Sync {
    fn log_prob_bits(&self, bits: &[u8]) -> f64;

    fn log_prob(&self, sigma: &Configuration) -> f64 {
        self.log_prob_bits(sigma.bits())
    }
}

/// Named parameter tensors, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tensor {
    ResetInput,
    ResetRecurrent,
    ResetBias,
    UpdateInput,
    UpdateRecurrent,
    UpdateBias,
    CandidateInput,
    CandidateRecurrent,
    CandidateBias,
    OutputKernel,
    OutputBias,
}

impl Tensor {
    pub const ALL: [Tensor; 11] = [
        Tensor::ResetInput,
        Tensor::ResetRecurrent,
        Tensor::ResetBias,
        Tensor::UpdateInput,
        Tensor::UpdateRecurrent,
        Tensor::UpdateBias,
        Tensor::CandidateInput,
        Tensor::CandidateRecurrent,
        Tensor::CandidateBias,
        Tensor::OutputKernel,
        Tensor::OutputBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tensor::ResetInput => "reset.input",
            Tensor::ResetRecurrent => "reset.recurrent",
            Tensor::ResetBias => "reset.bias",
            Tensor::UpdateInput => "update.input",
            Tensor::UpdateRecurrent => "update.recurrent",
            Tensor::UpdateBias => "update.bias",
            Tensor::CandidateInput => "candidate.input",
            Tensor::CandidateRecurrent => "candidate.recurrent",
            Tensor::CandidateBias => "candidate.bias",
            Tensor::OutputKernel => "output.kernel",
            Tensor::OutputBias => "output.bias",
        }
    }

    pub fn from_name(name: &str) -> Option<Tensor> {
        Tensor::ALL.into_iter().find(|t| t.name() == name)
    }

    /// `(rows, cols)`; biases are `(1, len)`.
    pub fn shape(self, nh: usize) -> (usize, usize) {
        match self {
            Tensor::ResetInput | Tensor::UpdateInput | Tensor::CandidateInput => (2, nh),
            Tensor::ResetRecurrent | Tensor::UpdateRecurrent | Tensor::CandidateRecurrent => {
                (nh, nh)
            }
            Tensor::ResetBias | Tensor::UpdateBias | Tensor::CandidateBias => (1, nh),
            Tensor::OutputKernel => (nh, 2),
            Tensor::OutputBias => (1, 2),
        }
    }

    pub fn is_bias(self) -> bool {
        matches!(
            self,
            Tensor::ResetBias | Tensor::UpdateBias | Tensor::CandidateBias | Tensor::OutputBias
        )
    }

    fn offset(self, nh: usize) -> usize {
        Tensor::ALL
            .iter()
            .take_while(|&&t| t != self)
            .map(|t| {
                let (r, c) = t.shape(nh);
                r * c
            })
            .sum()
    }
}

/// All trainable weights, stored contiguously in [`Tensor::ALL`] order.
///
/// The same type carries gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnParams {
    nh: usize,
    values: Vec<f64>,
}

const GATE_RESET: usize = 0;
const GATE_UPDATE: usize = 1;
const GATE_CANDIDATE: usize = 2;

impl RnnParams {
    pub fn param_count(nh: usize) -> usize {
        3 * (2 * nh + nh * nh + nh) + 2 * nh + 2
    }

    pub fn zeros(nh: usize) -> Self {
        Self {
            nh,
            values: vec![0.0; Self::param_count(nh)],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.nh)
    }

    /// Glorot-uniform kernels, zero biases.
    pub fn glorot(nh: usize, seed: u64) -> Result<Self> {
        if nh == 0 {
            return Err(Error::invalid("hidden size must be positive"));
        }
        let mut params = Self::zeros(nh);
        let mut rng = rng::stream(seed, 0);
        for t in Tensor::ALL {
            if t.is_bias() {
                continue;
            }
            let (fan_in, fan_out) = t.shape(nh);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in params.tensor_mut(t) {
                *w = limit * (2.0 * rng.random::<f64>() - 1.0);
            }
        }
        Ok(params)
    }

    pub fn from_values(nh: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != Self::param_count(nh) {
            return Err(Error::invalid(format!(
                "expected {} parameters for nh={nh}, got {}",
                Self::param_count(nh),
                values.len()
            )));
        }
        Ok(Self { nh, values })
    }

    pub fn nh(&self) -> usize {
        self.nh
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn tensor(&self, t: Tensor) -> &[f64] {
        let (r, c) = t.shape(self.nh);
        let off = t.offset(self.nh);
        &self.values[off..off + r * c]
    }

    pub fn tensor_mut(&mut self, t: Tensor) -> &mut [f64] {
        let (r, c) = t.shape(self.nh);
        let off = t.offset(self.nh);
        &mut self.values[off..off + r * c]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &RnnParams) -> bool {
        self.nh == other.nh && self.values.len() == other.values.len()
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &RnnParams) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn gate(&self, gate: usize) -> GateView<'_> {
        let nh = self.nh;
        let block = 2 * nh + nh * nh + nh;
        let base = gate * block;
        let v = &self.values;
        GateView {
            input: &v[base..base + 2 * nh],
            recurrent: &v[base + 2 * nh..base + 2 * nh + nh * nh],
            bias: &v[base + 2 * nh + nh * nh..base + block],
        }
    }

    fn head(&self) -> (&[f64], &[f64]) {
        (
            self.tensor(Tensor::OutputKernel),
            self.tensor(Tensor::OutputBias),
        )
    }
}

struct GateView<'a> {
    input: &'a [f64],
    recurrent: &'a [f64],
    bias: &'a [f64],
}

impl GateView<'_> {
    /// `out = x W + h U + b` with one-hot `x`.
    fn preactivation(&self, nh: usize, input: Option<u8>, h: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.bias);
        if let Some(x) = input {
            let row = &self.input[x as usize * nh..(x as usize + 1) * nh];
            out.iter_mut().zip(row).for_each(|(o, w)| *o += w);
        }
        for (k, &hk) in h.iter().enumerate() {
            let row = &self.recurrent[k * nh..(k + 1) * nh];
            out.iter_mut().zip(row).for_each(|(o, u)| *o += hk * u);
        }
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `tanh` through a single `exp`; absolute error stays near machine epsilon.
fn tanh(x: f64) -> f64 {
    1.0 - 2.0 / (1.0 + (2.0 * x).exp())
}

/// Log-softmax of the two output logits, computed from their difference.
fn log_conditional(params: &RnnParams, h: &[f64]) -> [f64; 2] {
    let (kernel, bias) = params.head();
    let mut d = bias[1] - bias[0];
    for (k, &hk) in h.iter().enumerate() {
        d += hk * (kernel[2 * k + 1] - kernel[2 * k]);
    }
    // log(1 + e^{-|d|}) is shared by both outcomes
    let tail = (-d.abs()).exp().ln_1p();
    [-(d.max(0.0) + tail), -((-d).max(0.0) + tail)]
}

/// Scratch buffers for one GRU update.
struct StepBuffers {
    r: Vec<f64>,
    z: Vec<f64>,
    c: Vec<f64>,
    rh: Vec<f64>,
}

impl StepBuffers {
    fn new(nh: usize) -> Self {
        Self {
            r: vec![0.0; nh],
            z: vec![0.0; nh],
            c: vec![0.0; nh],
            rh: vec![0.0; nh],
        }
    }
}

/// Advances `h_prev` by one site into `h_next`, leaving the gate values in `buf`.
fn gru_update(
    params: &RnnParams,
    input: Option<u8>,
    h_prev: &[f64],
    h_next: &mut [f64],
    buf: &mut StepBuffers,
) {
    let nh = params.nh;
    let reset = params.gate(GATE_RESET);
    let update = params.gate(GATE_UPDATE);
    buf.r.copy_from_slice(reset.bias);
    buf.z.copy_from_slice(update.bias);
    if let Some(x) = input {
        let span = x as usize * nh..(x as usize + 1) * nh;
        let (wr, wz) = (&reset.input[span.clone()], &update.input[span]);
        buf.r.iter_mut().zip(wr).for_each(|(o, w)| *o += w);
        buf.z.iter_mut().zip(wz).for_each(|(o, w)| *o += w);
    }
    // both gates read the same h, so one pass feeds them
    for (k, &hk) in h_prev.iter().enumerate() {
        let ur = &reset.recurrent[k * nh..(k + 1) * nh];
        let uz = &update.recurrent[k * nh..(k + 1) * nh];
        let gates = buf.r.iter_mut().zip(buf.z.iter_mut());
        for ((r, z), (a, b)) in gates.zip(ur.iter().zip(uz)) {
            *r += hk * a;
            *z += hk * b;
        }
    }
    buf.r.iter_mut().for_each(|v| *v = logistic(*v));
    buf.z.iter_mut().for_each(|v| *v = logistic(*v));
    for ((rh, r), h) in buf.rh.iter_mut().zip(&buf.r).zip(h_prev) {
        *rh = r * h;
    }
    params
        .gate(GATE_CANDIDATE)
        .preactivation(nh, input, &buf.rh, &mut buf.c);
    buf.c.iter_mut().for_each(|v| *v = tanh(*v));
    for k in 0..nh {
        h_next[k] = (1.0 - buf.z[k]) * h_prev[k] + buf.z[k] * buf.c[k];
    }
}

fn previous_input(bits: &[u8], site: usize) -> Option<u8> {
    if site == 0 {
        None
    } else {
        Some(bits[site - 1])
    }
}

/// Recurrent state entering a site.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnState {
    pub hidden: Vec<f64>,
    /// Occupation of the previous site; `None` encodes the zero input vector.
    pub last_input: Option<u8>,
}

impl RnnState {
    pub fn initial(nh: usize) -> Self {
        Self {
            hidden: vec![0.0; nh],
            last_input: None,
        }
    }

    pub fn one_hot(&self) -> [f64; 2] {
        match self.last_input {
            None => [0.0, 0.0],
            Some(0) => [1.0, 0.0],
            Some(_) => [0.0, 1.0],
        }
    }
}

/// One GRU update followed by the output head. Returns the next hidden state
/// and the conditional probabilities of the current site being 0 or 1.
pub fn step(params: &RnnParams, state: &RnnState) -> (Vec<f64>, [f64; 2]) {
    let nh = params.nh;
    let mut next = vec![0.0; nh];
    let mut buf = StepBuffers::new(nh);
    gru_update(params, state.last_input, &state.hidden, &mut next, &mut buf);
    let lp = log_conditional(params, &next);
    (next, [lp[0].exp(), lp[1].exp()])
}

impl LogProb for RnnParams {
    fn log_prob_bits(&self, bits: &[u8]) -> f64 {
        let nh = self.nh;
        let mut h = vec![0.0; nh];
        let mut next = vec![0.0; nh];
        let mut buf = StepBuffers::new(nh);
        let mut acc = 0.0;
        for (i, &b) in bits.iter().enumerate() {
            gru_update(self, previous_input(bits, i), &h, &mut next, &mut buf);
            acc += log_conditional(self, &next)[b as usize];
            std::mem::swap(&mut h, &mut next);
        }
        acc
    }
}

/// `log p(σ)` under the network.
pub fn log_prob(params: &RnnParams, sigma: &Configuration) -> f64 {
    params.log_prob(sigma)
}

/// `ψ(σ')/ψ(σ) = exp(½ (log p(σ') - log p(σ)))`.
pub fn amplitude_ratio(
    params: &RnnParams,
    sigma: &Configuration,
    sigma_prime: &Configuration,
) -> f64 {
    (0.5 * (params.log_prob(sigma_prime) - params.log_prob(sigma))).exp()
}

/// `log p(σ)` together with `log p` of every single-site flip of `σ`.
///
/// Hidden states before the flipped site are shared with the forward pass on
/// `σ`; the sums are accumulated in the same order as [`log_prob`], so each
/// entry is bit-identical to an independent evaluation.
pub fn log_prob_with_flips(params: &RnnParams, bits: &[u8]) -> (f64, Vec<f64>) {
    let nh = params.nh;
    let n = bits.len();
    let mut hidden = vec![0.0; (n + 1) * nh];
    let mut cond = Vec::with_capacity(n);
    let mut prefix = Vec::with_capacity(n + 1);
    let mut buf = StepBuffers::new(nh);

    let mut acc = 0.0;
    prefix.push(acc);
    for i in 0..n {
        let (before, after) = hidden.split_at_mut((i + 1) * nh);
        let h_prev = &before[i * nh..];
        let h_next = &mut after[..nh];
        gru_update(params, previous_input(bits, i), h_prev, h_next, &mut buf);
        let lc = log_conditional(params, h_next);
        acc += lc[bits[i] as usize];
        cond.push(lc);
        prefix.push(acc);
    }
    let total = acc;

    let mut flipped = Vec::with_capacity(n);
    let mut h = vec![0.0; nh];
    let mut next = vec![0.0; nh];
    for i in 0..n {
        let flip_bit = bits[i] ^ 1;
        let mut acc = prefix[i] + cond[i][flip_bit as usize];
        h.copy_from_slice(&hidden[(i + 1) * nh..(i + 2) * nh]);
        for j in (i + 1)..n {
            let input = if j - 1 == i { flip_bit } else { bits[j - 1] };
            gru_update(params, Some(input), &h, &mut next, &mut buf);
            acc += log_conditional(params, &next)[bits[j] as usize];
            std::mem::swap(&mut h, &mut next);
        }
        flipped.push(acc);
    }
    (total, flipped)
}

/// Activations of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    nh: usize,
    bits: Vec<u8>,
    /// `h_0 .. h_N`, each of length `nh`; `h_{i+1}` produces the conditional at site `i`.
    hidden: Vec<f64>,
    reset: Vec<f64>,
    update: Vec<f64>,
    candidate: Vec<f64>,
    log_cond: Vec<[f64; 2]>,
}

impl ForwardTape {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Per-site conditional log-probabilities `[log p(0), log p(1)]`.
    pub fn log_conditionals(&self) -> &[[f64; 2]] {
        &self.log_cond
    }

    pub fn log_prob(&self) -> f64 {
        self.bits
            .iter()
            .zip(&self.log_cond)
            .fold(0.0, |acc, (&b, lc)| acc + lc[b as usize])
    }
}

pub fn forward(params: &RnnParams, sigma: &Configuration) -> ForwardTape {
    forward_bits(params, sigma.bits())
}

pub(crate) fn forward_bits(params: &RnnParams, bits: &[u8]) -> ForwardTape {
    let nh = params.nh;
    let n = bits.len();
    let mut tape = ForwardTape {
        nh,
        bits: bits.to_vec(),
        hidden: vec![0.0; (n + 1) * nh],
        reset: vec![0.0; n * nh],
        update: vec![0.0; n * nh],
        candidate: vec![0.0; n * nh],
        log_cond: Vec::with_capacity(n),
    };
    let mut buf = StepBuffers::new(nh);
    for i in 0..n {
        let (before, after) = tape.hidden.split_at_mut((i + 1) * nh);
        let h_next = &mut after[..nh];
        gru_update(
            params,
            previous_input(bits, i),
            &before[i * nh..],
            h_next,
            &mut buf,
        );
        tape.reset[i * nh..(i + 1) * nh].copy_from_slice(&buf.r);
        tape.update[i * nh..(i + 1) * nh].copy_from_slice(&buf.z);
        tape.candidate[i * nh..(i + 1) * nh].copy_from_slice(&buf.c);
        tape.log_cond.push(log_conditional(params, h_next));
    }
    tape
}

/// Exact gradient of `log p(σ)` with respect to every parameter.
pub fn backprop_logprob(
    params: &RnnParams,
    tape: &ForwardTape,
    sigma: &Configuration,
) -> Result<RnnParams> {
    if tape.bits.as_slice() != sigma.bits() {
        return Err(Error::invalid(
            "forward tape was recorded on a different configuration",
        ));
    }
    if tape.nh != params.nh {
        return Err(Error::invalid(
            "forward tape hidden size does not match parameters",
        ));
    }
    let mut grad = params.zeros_like();
    accumulate_logprob_grad(params, tape, 1.0, &mut grad);
    Ok(grad)
}

/// `grad += weight * ∇ log p(σ)`, reverse mode through the tape.
pub(crate) fn accumulate_logprob_grad(
    params: &RnnParams,
    tape: &ForwardTape,
    weight: f64,
    grad: &mut RnnParams,
) {
    let nh = params.nh;
    let n = tape.bits.len();
    let g_off = [
        Tensor::ResetInput.offset(nh),
        Tensor::UpdateInput.offset(nh),
        Tensor::CandidateInput.offset(nh),
    ];
    let block = 2 * nh + nh * nh + nh;
    let head_k = Tensor::OutputKernel.offset(nh);
    let head_b = Tensor::OutputBias.offset(nh);
    let (kernel, _) = params.head();
    let u_r = params.gate(GATE_RESET).recurrent;
    let u_z = params.gate(GATE_UPDATE).recurrent;
    let u_c = params.gate(GATE_CANDIDATE).recurrent;

    let gv = &mut grad.values;
    let mut dh_carry = vec![0.0; nh];
    let mut dh = vec![0.0; nh];
    let mut da_r = vec![0.0; nh];
    let mut da_z = vec![0.0; nh];
    let mut da_c = vec![0.0; nh];

    for i in (0..n).rev() {
        let h_prev = &tape.hidden[i * nh..(i + 1) * nh];
        let h_next = &tape.hidden[(i + 1) * nh..(i + 2) * nh];
        let r = &tape.reset[i * nh..(i + 1) * nh];
        let z = &tape.update[i * nh..(i + 1) * nh];
        let c = &tape.candidate[i * nh..(i + 1) * nh];
        let lc = tape.log_cond[i];
        let bit = tape.bits[i] as usize;

        // softmax head
        let mut d_logit = [-lc[0].exp(), -lc[1].exp()];
        d_logit[bit] += 1.0;
        d_logit[0] *= weight;
        d_logit[1] *= weight;
        gv[head_b] += d_logit[0];
        gv[head_b + 1] += d_logit[1];
        for k in 0..nh {
            gv[head_k + 2 * k] += h_next[k] * d_logit[0];
            gv[head_k + 2 * k + 1] += h_next[k] * d_logit[1];
            dh[k] = dh_carry[k] + kernel[2 * k] * d_logit[0] + kernel[2 * k + 1] * d_logit[1];
        }

        // h' = (1 - z) h + z c
        for k in 0..nh {
            let dz = dh[k] * (c[k] - h_prev[k]);
            let dc = dh[k] * z[k];
            da_z[k] = dz * z[k] * (1.0 - z[k]);
            da_c[k] = dc * (1.0 - c[k] * c[k]);
            dh_carry[k] = dh[k] * (1.0 - z[k]);
        }

        // candidate: input r ⊙ h through U_c
        let input = previous_input(&tape.bits, i);
        let cand_rec = g_off[2] + 2 * nh;
        for k in 0..nh {
            let rh = r[k] * h_prev[k];
            let row = &u_c[k * nh..(k + 1) * nh];
            let mut d_rh = 0.0;
            for j in 0..nh {
                gv[cand_rec + k * nh + j] += rh * da_c[j];
                d_rh += row[j] * da_c[j];
            }
            let dr = d_rh * h_prev[k];
            dh_carry[k] += d_rh * r[k];
            da_r[k] = dr * r[k] * (1.0 - r[k]);
        }

        for (gate, da, u) in [(0usize, &da_r, u_r), (1, &da_z, u_z), (2, &da_c, u_c)] {
            let base = gate * block;
            debug_assert_eq!(base, g_off[gate]);
            if let Some(x) = input {
                let row = base + x as usize * nh;
                for j in 0..nh {
                    gv[row + j] += da[j];
                }
            }
            let bias = base + 2 * nh + nh * nh;
            for j in 0..nh {
                gv[bias + j] += da[j];
            }
            if gate == 2 {
                continue; // recurrent part handled above
            }
            let rec = base + 2 * nh;
            for k in 0..nh {
                let row = &u[k * nh..(k + 1) * nh];
                let mut back = 0.0;
                for j in 0..nh {
                    gv[rec + k * nh + j] += h_prev[k] * da[j];
                    back += row[j] * da[j];
                }
                dh_carry[k] += back;
            }
        }
    }
}

/// Configurations drawn from the network with their log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub configs: Vec<Configuration>,
    pub log_probs: Vec<f64>,
}

/// Draws `count` configurations of `n_sites` autoregressively. Sample `k`
/// uses the random stream `(seed, k)`.
pub fn sample(params: &RnnParams, n_sites: usize, count: usize, seed: u64) -> Result<Samples> {
    if count == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    let drawn: Vec<(Configuration, f64)> = (0..count)
        .into_par_iter()
        .map(|k| sample_one(params, n_sites, &mut rng::stream(seed, k as u64)))
        .collect();
    let (configs, log_probs) = drawn.into_iter().unzip();
    Ok(Samples { configs, log_probs })
}

fn sample_one<R: Rng>(params: &RnnParams, n: usize, rng: &mut R) -> (Configuration, f64) {
    let nh = params.nh;
    let mut bits = vec![0u8; n];
    let mut h = vec![0.0; nh];
    let mut next = vec![0.0; nh];
    let mut buf = StepBuffers::new(nh);
    let mut acc = 0.0;
    for i in 0..n {
        gru_update(params, previous_input(&bits, i), &h, &mut next, &mut buf);
        let lc = log_conditional(params, &next);
        let u: f64 = rng.random();
        let bit = u8::from(u < lc[1].exp());
        bits[i] = bit;
        acc += lc[bit as usize];
        std::mem::swap(&mut h, &mut next);
    }
    (
        Configuration::new(bits).expect("sampled bits are binary"),
        acc,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn all_configs(n: usize) -> Vec<Configuration> {
        (0..1usize << n)
            .map(|i| Configuration::from_index(i, n))
            .collect()
    }

    /// Glorot weights plus random biases, so every tensor is exercised.
    fn random_params(nh: usize, seed: u64) -> RnnParams {
        let mut p = RnnParams::glorot(nh, seed).unwrap();
        let mut rng = rng::stream(seed, 99);
        for t in Tensor::ALL.into_iter().filter(|t| t.is_bias()) {
            for b in p.tensor_mut(t) {
                *b = rng.random::<f64>() - 0.5;
            }
        }
        p
    }

    #[test]
    fn layout_covers_all_parameters() {
        let nh = 5;
        let total: usize = Tensor::ALL
            .iter()
            .map(|t| {
                let (r, c) = t.shape(nh);
                r * c
            })
            .sum();
        assert_eq!(total, RnnParams::param_count(nh));
        assert_eq!(Tensor::OutputBias.offset(nh) + 2, total);
        for t in Tensor::ALL {
            assert_eq!(Tensor::from_name(t.name()), Some(t));
        }
    }

    #[test]
    fn glorot_bounds_and_determinism() {
        let p = RnnParams::glorot(8, 5).unwrap();
        let bound = (6.0f64 / 16.0).sqrt();
        assert_relative_eq!(bound, 0.61237, epsilon = 1e-5);
        for t in [
            Tensor::ResetRecurrent,
            Tensor::UpdateRecurrent,
            Tensor::CandidateRecurrent,
        ] {
            assert!(p.tensor(t).iter().all(|w| w.abs() <= bound));
        }
        let input_bound = (6.0f64 / 10.0).sqrt();
        assert!(p
            .tensor(Tensor::ResetInput)
            .iter()
            .all(|w| w.abs() <= input_bound));
        assert!(p.tensor(Tensor::OutputBias).iter().all(|&b| b == 0.0));
        assert_eq!(p, RnnParams::glorot(8, 5).unwrap());
        assert_ne!(p, RnnParams::glorot(8, 6).unwrap());
        assert!(RnnParams::glorot(0, 1).is_err());
    }

    #[test]
    fn zero_params_give_uniform_conditionals() {
        let p = RnnParams::zeros(4);
        let state = RnnState {
            hidden: vec![0.0; 4],
            last_input: Some(1),
        };
        let (h, cond) = step(&p, &state);
        assert_eq!(cond, [0.5, 0.5]);
        assert!(h.iter().all(|&x| x == 0.0));
        let sigma: Configuration = "0110101".parse().unwrap();
        assert_relative_eq!(log_prob(&p, &sigma), 7.0 * 0.5f64.ln(), epsilon = 1e-14);
        let other: Configuration = "1111111".parse().unwrap();
        assert_eq!(amplitude_ratio(&p, &sigma, &other), 1.0);
    }

    #[test]
    fn conditionals_are_normalized() {
        for seed in 0..100 {
            let p = random_params(3, seed);
            let state = RnnState {
                hidden: vec![0.3, -0.2, 0.9],
                last_input: Some((seed % 2) as u8),
            };
            let (_, cond) = step(&p, &state);
            assert!(cond[0] > 0.0 && cond[1] > 0.0);
            assert!((cond[0] + cond[1] - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn distribution_is_normalized() {
        for n in [4, 9] {
            for seed in 0..5 {
                let p = random_params(4, seed);
                let total: f64 = all_configs(n).iter().map(|s| log_prob(&p, s).exp()).sum();
                assert!((total - 1.0).abs() <= 1e-10, "n={n} total={total}");
            }
        }
    }

    #[test]
    fn conditionals_are_causal() {
        let p = random_params(5, 3);
        let sigma: Configuration = "101100111".parse().unwrap();
        let base = forward(&p, &sigma);
        for i in 0..sigma.len() {
            for j in i..sigma.len() {
                let perturbed = forward(&p, &sigma.flipped(j));
                assert_eq!(perturbed.log_conditionals()[i], base.log_conditionals()[i]);
            }
        }
    }

    #[test]
    fn amplitude_ratio_identities() {
        let p = random_params(4, 8);
        let a: Configuration = "0110".parse().unwrap();
        let b: Configuration = "1011".parse().unwrap();
        assert_eq!(amplitude_ratio(&p, &a, &a), 1.0);
        let product = amplitude_ratio(&p, &a, &b) * amplitude_ratio(&p, &b, &a);
        assert!((product - 1.0).abs() <= 1e-12);
        assert!(amplitude_ratio(&p, &a, &b) > 0.0);
    }

    #[test]
    fn flip_cache_is_bit_identical() {
        let p = random_params(6, 21);
        for index in [0usize, 1, 0b1_0100_1101, 511] {
            let sigma = Configuration::from_index(index, 9);
            let (lp, flips) = log_prob_with_flips(&p, sigma.bits());
            assert_eq!(lp.to_bits(), log_prob(&p, &sigma).to_bits());
            for (i, f) in flips.iter().enumerate() {
                assert_eq!(f.to_bits(), log_prob(&p, &sigma.flipped(i)).to_bits());
            }
        }
    }

    #[test]
    fn sample_log_probs_match_evaluation() {
        let p = random_params(4, 2);
        let s = sample(&p, 9, 200, 17).unwrap();
        for (c, lp) in s.configs.iter().zip(&s.log_probs) {
            assert!((lp - log_prob(&p, c)).abs() <= 1e-12);
            assert!((forward(&p, c).log_prob() - lp).abs() <= 1e-12);
        }
        assert_eq!(s, sample(&p, 9, 200, 17).unwrap());
        assert_ne!(s.configs, sample(&p, 9, 200, 18).unwrap().configs);
        assert!(sample(&p, 9, 0, 1).is_err());
    }

    #[test]
    fn sampler_matches_enumeration() {
        let p = random_params(4, 31);
        let count = 1_000_000;
        let s = sample(&p, 4, count, 5).unwrap();
        let mut hist = [0usize; 16];
        for c in &s.configs {
            hist[c.to_index()] += 1;
        }
        let tv: f64 = all_configs(4)
            .iter()
            .map(|c| (hist[c.to_index()] as f64 / count as f64 - log_prob(&p, c).exp()).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv <= 0.01, "tv = {tv}");
    }

    fn finite_difference(p: &RnnParams, sigma: &Configuration, k: usize, h: f64) -> f64 {
        let mut plus = p.clone();
        plus.values_mut()[k] += h;
        let mut minus = p.clone();
        minus.values_mut()[k] -= h;
        (log_prob(&plus, sigma) - log_prob(&minus, sigma)) / (2.0 * h)
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut worst = 0.0f64;
        for seed in 0..20u64 {
            let p = random_params(4, 100 + seed);
            let sigma = Configuration::from_index((seed as usize * 7) % 16, 4);
            let tape = forward(&p, &sigma);
            let grad = backprop_logprob(&p, &tape, &sigma).unwrap();
            let fd: Vec<f64> = (0..p.len())
                .map(|k| finite_difference(&p, &sigma, k, 1e-5))
                .collect();
            let diff: f64 = grad
                .values()
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale: f64 = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
            worst = worst.max(diff / scale);
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn output_bias_gradient_identity() {
        let p = random_params(3, 4);
        let sigma: Configuration = "01101".parse().unwrap();
        let tape = forward(&p, &sigma);
        let grad = backprop_logprob(&p, &tape, &sigma).unwrap();
        let mut expect = [0.0; 2];
        for (lc, &b) in tape.log_conditionals().iter().zip(sigma.bits()) {
            expect[0] += f64::from(b == 0) - lc[0].exp();
            expect[1] += f64::from(b == 1) - lc[1].exp();
        }
        let got = grad.tensor(Tensor::OutputBias);
        assert!((got[0] - expect[0]).abs() < 1e-12);
        assert!((got[1] - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn saturated_model_has_zero_gradient() {
        let mut p = random_params(3, 9);
        p.tensor_mut(Tensor::OutputKernel)
            .iter_mut()
            .for_each(|w| *w = 0.0);
        p.tensor_mut(Tensor::OutputBias)
            .copy_from_slice(&[800.0, -800.0]);
        let sigma = Configuration::zeros(6);
        let tape = forward(&p, &sigma);
        assert_eq!(tape.log_prob(), 0.0);
        let grad = backprop_logprob(&p, &tape, &sigma).unwrap();
        assert!(grad.values().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backprop_rejects_mismatched_tape() {
        let p = random_params(3, 1);
        let a: Configuration = "0101".parse().unwrap();
        let b: Configuration = "0111".parse().unwrap();
        let tape = forward(&p, &a);
        assert!(matches!(
            backprop_logprob(&p, &tape, &b),
            Err(Error::InvalidArgument(_))
        ));
        let other = RnnParams::zeros(2);
        assert!(backprop_logprob(&other, &tape, &a).is_err());
    }
}
