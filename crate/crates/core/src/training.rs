//! Data-driven, Hamiltonian-driven and hybrid optimisation of the network.
//!
//! * Data phase: minimise the mean negative log-likelihood of the dataset,
//!   i.e. the KL divergence to the data distribution up to the constant
//!   data entropy, which is not computed.
//! * VMC phase: minimise the sampled mean local energy with the centred
//!   score-function gradient `(1/N_s) Σ (H_loc - H̄) ∇ log p`.
//!
//! In the data phase one iteration is one epoch over the shuffled dataset
//! (one Adam update per batch); in the VMC phase one iteration is one Adam
//! update. The trace records both the iteration and the running update count.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{self, shifted_mean};
use crate::error::{Error, Result};
use crate::lattice::{Configuration, HamiltonianSpec};
use crate::metrics::{EnergyTrace, Phase, TraceRow, DEFAULT_THRESHOLD, DEFAULT_WINDOW};
use crate::oracle::Dataset;
use crate::rng::{self, REDUCTION_CHUNK};
use crate::wavefunction::{self, RnnParams};

const TAG_SHUFFLE: u64 = 1;
/// Draws from the parameters reached after `k` iterations use this tag and `k`,
/// so the trace evaluation at `k` and the VMC update `k + 1` share samples.
const TAG_DRAW: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Data,
    Vmc,
    Hybrid,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Data => "data",
            Mode::Vmc => "vmc",
            Mode::Hybrid => "hybrid",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "data" => Ok(Mode::Data),
            "vmc" => Ok(Mode::Vmc),
            "hybrid" => Ok(Mode::Hybrid),
            other => Err(Error::invalid(format!("unknown training mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Stop once the smoothed energy density is within `threshold` of the
/// reference energy passed to the trainer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub threshold: f64,
    pub window: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            window: DEFAULT_WINDOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub t_trans: u64,
    pub total_iterations: u64,
    pub eta_data: f64,
    pub eta_vmc: f64,
    pub batch_size: usize,
    pub n_samples: usize,
    pub eval_samples: usize,
    /// Evaluate and record the energy every this many iterations (and at the last one).
    pub eval_every: u64,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Keep the Adam moments when switching from the data to the VMC phase.
    pub carry_adam_state: bool,
    /// Rescale gradients whose global norm exceeds this value.
    pub grad_clip: Option<f64>,
    /// L2 penalty coefficient added to the gradient.
    pub weight_decay: f64,
    /// Learning rate multiplier applied per iteration: `η_t = η · decay^(t-1)`.
    pub lr_decay: f64,
    pub early_stop: Option<EarlyStop>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Hybrid,
            t_trans: 0,
            total_iterations: 1000,
            eta_data: 1e-3,
            eta_vmc: 1e-3,
            batch_size: 100,
            n_samples: energy::DEFAULT_ENERGY_SAMPLES,
            eval_samples: energy::DEFAULT_ENERGY_SAMPLES,
            eval_every: 1,
            seed: 0,
            adam: AdamConfig::default(),
            carry_adam_state: false,
            grad_clip: None,
            weight_decay: 0.0,
            lr_decay: 1.0,
            early_stop: None,
        }
    }
}

impl TrainConfig {
    /// Number of data-phase iterations implied by the mode.
    pub fn data_iterations(&self) -> u64 {
        match self.mode {
            Mode::Data => self.total_iterations,
            Mode::Vmc => 0,
            Mode::Hybrid => self.t_trans,
        }
    }

    pub fn phase_of(&self, iteration: u64) -> Phase {
        if iteration <= self.data_iterations() {
            Phase::Data
        } else {
            Phase::Vmc
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::invalid(format!("{what} must be positive")))
            }
        };
        if self.mode == Mode::Hybrid && self.t_trans > self.total_iterations {
            return Err(Error::invalid(format!(
                "t_trans ({}) exceeds total iterations ({})",
                self.t_trans, self.total_iterations
            )));
        }
        positive(self.eta_data > 0.0, "eta_data")?;
        positive(self.eta_vmc > 0.0, "eta_vmc")?;
        positive(self.batch_size > 0, "batch size")?;
        positive(self.eval_samples > 0, "eval samples")?;
        positive(self.eval_every > 0, "eval interval")?;
        positive(self.lr_decay > 0.0, "lr decay")?;
        if self.n_samples < 2 {
            return Err(Error::invalid("VMC needs at least 2 samples per update"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight decay must be nonnegative"));
        }
        if let Some(c) = self.grad_clip {
            positive(c > 0.0, "gradient clip")?;
        }
        Ok(())
    }
}

/// Adam first and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: RnnParams,
    pub second_moment: RnnParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(nh: usize) -> Self {
        Self {
            first_moment: RnnParams::zeros(nh),
            second_moment: RnnParams::zeros(nh),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut RnnParams,
    state: &mut AdamState,
    grad: &RnnParams,
    eta: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if !params.same_shape(grad)
        || !params.same_shape(&state.first_moment)
        || !params.same_shape(&state.second_moment)
    {
        return Err(Error::invalid(
            "Adam: parameter, gradient and moment shapes differ",
        ));
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - cfg.beta1.powf(t);
    let c2 = 1.0 - cfg.beta2.powf(t);
    let m = state.first_moment.values_mut();
    let v = state.second_moment.values_mut();
    for (k, (w, &g)) in params
        .values_mut()
        .iter_mut()
        .zip(grad.values())
        .enumerate()
    {
        m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
        v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[k] / c1;
        let v_hat = v[k] / c2;
        *w -= eta * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub value: f64,
    /// Data entropy `S_D`, when supplied; the optimised objective omits it.
    pub entropy_offset: Option<f64>,
}

/// `Σ_k weights[k] ∇ log p(configs[k])`, reduced over fixed-size chunks.
fn weighted_score_sum(params: &RnnParams, configs: &[Configuration], weights: &[f64]) -> RnnParams {
    let partial: Vec<RnnParams> = configs
        .par_chunks(REDUCTION_CHUNK)
        .zip(weights.par_chunks(REDUCTION_CHUNK))
        .map(|(cs, ws)| {
            let mut g = params.zeros_like();
            for (c, &w) in cs.iter().zip(ws) {
                if w != 0.0 {
                    let tape = wavefunction::forward_bits(params, c.bits());
                    wavefunction::accumulate_logprob_grad(params, &tape, w, &mut g);
                }
            }
            g
        })
        .collect();
    let mut total = params.zeros_like();
    for g in &partial {
        total.add_scaled(1.0, g);
    }
    total
}

/// Mean negative log-likelihood of `batch` and its gradient.
pub fn nll_loss_and_grad(
    params: &RnnParams,
    batch: &[Configuration],
) -> Result<(LossReport, RnnParams)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let b = batch.len() as f64;
    let log_probs: Vec<f64> = batch
        .par_iter()
        .map(|c| wavefunction::log_prob(params, c))
        .collect();
    let value = -log_probs.iter().sum::<f64>() / b;
    let weights = vec![-1.0 / b; batch.len()];
    let grad = weighted_score_sum(params, batch, &weights);
    Ok((
        LossReport {
            value,
            entropy_offset: None,
        },
        grad,
    ))
}

/// Empirical entropy `-Σ p̂ log p̂` of a set of configurations.
pub fn empirical_entropy(batch: &[Configuration]) -> f64 {
    let mut sorted: Vec<&Configuration> = batch.iter().collect();
    sorted.sort();
    let n = batch.len() as f64;
    let mut entropy = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let p = (j - i) as f64 / n;
        entropy -= p * p.ln();
        i = j;
    }
    entropy
}

/// Centred score-function estimate `(1/N) Σ (E_k - Ē) ∇ log p(σ_k)` from
/// given samples and their local energies.
pub fn vmc_gradient_from_samples(
    params: &RnnParams,
    configs: &[Configuration],
    local_energies: &[f64],
) -> Result<RnnParams> {
    if configs.len() != local_energies.len() || configs.len() < 2 {
        return Err(Error::invalid(
            "need at least two samples with matching local energies",
        ));
    }
    let mean = shifted_mean(local_energies);
    let n = configs.len() as f64;
    let weights: Vec<f64> = local_energies.iter().map(|e| (e - mean) / n).collect();
    Ok(weighted_score_sum(params, configs, &weights))
}

/// Mean local energy over `n_samples` fresh draws and its centred
/// score-function gradient.
pub fn vmc_loss_and_grad(
    spec: &HamiltonianSpec,
    params: &RnnParams,
    n_samples: usize,
    seed: u64,
) -> Result<(LossReport, RnnParams)> {
    if n_samples < 2 {
        return Err(Error::invalid("VMC gradient needs at least two samples"));
    }
    let samples = wavefunction::sample(params, spec.n_atoms(), n_samples, seed)?;
    let local = energy::local_energies(spec, params, &samples.configs)?;
    let value = shifted_mean(&local);
    let grad = vmc_gradient_from_samples(params, &samples.configs, &local)?;
    Ok((
        LossReport {
            value,
            entropy_offset: None,
        },
        grad,
    ))
}

/// Everything needed to continue a run bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub params: RnnParams,
    pub adam: AdamState,
    pub iteration: u64,
    pub updates_so_far: u64,
    pub trace: EnergyTrace,
}

/// Iteration-by-iteration driver of the hybrid schedule.
pub struct Trainer<'a> {
    spec: &'a HamiltonianSpec,
    dataset: Option<&'a Dataset>,
    config: TrainConfig,
    reference_energy: Option<f64>,
    state: TrainerState,
    converged_at: Option<u64>,
    draws: Option<Draws>,
}

/// Samples and local energies drawn from the current parameters.
struct Draws {
    after: u64,
    configs: Vec<Configuration>,
    local: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        spec: &'a HamiltonianSpec,
        params: RnnParams,
        dataset: Option<&'a Dataset>,
        config: TrainConfig,
    ) -> Result<Self> {
        let nh = params.nh();
        Self::resume(
            spec,
            dataset,
            config,
            TrainerState {
                params,
                adam: AdamState::new(nh),
                iteration: 0,
                updates_so_far: 0,
                trace: EnergyTrace::new(),
            },
        )
    }

    pub fn resume(
        spec: &'a HamiltonianSpec,
        dataset: Option<&'a Dataset>,
        config: TrainConfig,
        state: TrainerState,
    ) -> Result<Self> {
        config.validate()?;
        if config.data_iterations() > 0 {
            let data =
                dataset.ok_or_else(|| Error::invalid("data-driven training requires a dataset"))?;
            if data.is_empty() {
                return Err(Error::invalid("dataset is empty"));
            }
            if data.n_sites() != Some(spec.n_atoms()) {
                return Err(Error::invalid(format!(
                    "dataset configurations have {} sites, lattice has {}",
                    data.n_sites().unwrap_or(0),
                    spec.n_atoms()
                )));
            }
        }
        if !state.params.is_finite() {
            return Err(Error::invalid("initial parameters are not finite"));
        }
        Ok(Self {
            spec,
            dataset,
            config,
            reference_energy: None,
            state,
            converged_at: None,
            draws: None,
        })
    }

    /// Reference energy for early stopping and progress messages.
    pub fn with_reference(mut self, energy: Option<f64>) -> Self {
        self.reference_energy = energy;
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &RnnParams {
        &self.state.params
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn into_state(self) -> TrainerState {
        self.state
    }

    pub fn iteration(&self) -> u64 {
        self.state.iteration
    }

    pub fn trace(&self) -> &EnergyTrace {
        &self.state.trace
    }

    /// Iteration at which the early-stop criterion fired.
    pub fn converged_at(&self) -> Option<u64> {
        self.converged_at
    }

    pub fn is_finished(&self) -> bool {
        self.state.iteration >= self.config.total_iterations
            || (self.config.early_stop.is_some() && self.converged_at.is_some())
    }

    /// Runs one iteration; returns the trace row if the energy was evaluated.
    pub fn step(&mut self) -> Result<Option<TraceRow>> {
        if self.state.iteration >= self.config.total_iterations {
            return Err(Error::invalid("training already finished"));
        }
        let t = self.state.iteration + 1;
        let phase = self.config.phase_of(t);
        let decay = self.config.lr_decay.powf((t - 1) as f64);

        let loss = match phase {
            Phase::Data => self.data_epoch(t, self.config.eta_data * decay)?,
            Phase::Vmc => {
                if t == self.config.data_iterations() + 1 && t > 1 && !self.config.carry_adam_state
                {
                    self.state.adam = AdamState::new(self.state.params.nh());
                }
                let n = self.config.n_samples;
                self.draw(t - 1, n)?;
                let draws = self.draws.take().expect("draw cache filled above");
                let value = shifted_mean(&draws.local[..n]);
                let grad = vmc_gradient_from_samples(
                    &self.state.params,
                    &draws.configs[..n],
                    &draws.local[..n],
                )?;
                if value.is_finite() {
                    self.apply_update(grad, self.config.eta_vmc * decay)?;
                }
                value
            }
        };
        self.state.iteration = t;

        if !loss.is_finite() || !self.state.params.is_finite() {
            let row = TraceRow {
                iteration: t,
                phase,
                updates_so_far: self.state.updates_so_far,
                loss,
                energy_mean: f64::NAN,
                energy_std: f64::NAN,
            };
            self.state.trace.push(row)?;
            return Err(Error::Numerical(format!(
                "non-finite loss or parameters at iteration {t} ({} phase)",
                phase.as_str()
            )));
        }

        if !t.is_multiple_of(self.config.eval_every) && t != self.config.total_iterations {
            return Ok(None);
        }
        // draw enough for the next VMC update as well, which samples the same parameters
        let next_is_vmc =
            t < self.config.total_iterations && self.config.phase_of(t + 1) == Phase::Vmc;
        let count = if next_is_vmc {
            self.config.eval_samples.max(self.config.n_samples)
        } else {
            self.config.eval_samples
        };
        let m = self.config.eval_samples;
        let draws = self.draw(t, count)?;
        let est = energy::EnergyEstimate::from_local_energies(&draws.local[..m])?;
        let row = TraceRow {
            iteration: t,
            phase,
            updates_so_far: self.state.updates_so_far,
            loss,
            energy_mean: est.mean,
            energy_std: est.std_error,
        };
        self.state.trace.push(row)?;
        self.check_convergence();
        Ok(Some(row))
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.is_finished() {
            if let Some(row) = self.step()? {
                progress(self.spec, &row, self.reference_energy);
            }
        }
        Ok(())
    }

    /// Fills the draw cache with at least `count` samples from the parameters
    /// after `after` iterations. Sample `k` depends only on the seed, `after`
    /// and `k`, so a prefix of a larger draw equals a fresh smaller one.
    fn draw(&mut self, after: u64, count: usize) -> Result<&Draws> {
        let reusable = self
            .draws
            .as_ref()
            .is_some_and(|d| d.after == after && d.configs.len() >= count);
        if !reusable {
            let seed = rng::derive_seed(self.config.seed, TAG_DRAW, after);
            let samples =
                wavefunction::sample(&self.state.params, self.spec.n_atoms(), count, seed)?;
            let local = energy::local_energies(self.spec, &self.state.params, &samples.configs)?;
            self.draws = Some(Draws {
                after,
                configs: samples.configs,
                local,
            });
        }
        Ok(self.draws.as_ref().expect("draw cache filled above"))
    }

    fn data_epoch(&mut self, t: u64, eta: f64) -> Result<f64> {
        let data = self
            .dataset
            .ok_or_else(|| Error::invalid("data-driven training requires a dataset"))?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(
            rng::derive_seed(self.config.seed, TAG_SHUFFLE, t),
            0,
        ));

        let mut batch = Vec::with_capacity(self.config.batch_size);
        let mut weighted_loss = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&k| data.samples[k].clone()));
            let (report, grad) = nll_loss_and_grad(&self.state.params, &batch)?;
            if !report.value.is_finite() {
                return Ok(report.value);
            }
            weighted_loss += report.value * chunk.len() as f64;
            self.apply_update(grad, eta)?;
        }
        Ok(weighted_loss / data.len() as f64)
    }

    fn apply_update(&mut self, mut grad: RnnParams, eta: f64) -> Result<()> {
        if self.config.weight_decay > 0.0 {
            grad.add_scaled(self.config.weight_decay, &self.state.params);
        }
        if let Some(limit) = self.config.grad_clip {
            let norm = grad.norm();
            if norm > limit {
                grad.scale(limit / norm);
            }
        }
        adam_step(
            &mut self.state.params,
            &mut self.state.adam,
            &grad,
            eta,
            &self.config.adam,
        )?;
        self.state.updates_so_far += 1;
        Ok(())
    }

    fn check_convergence(&mut self) {
        let (Some(stop), Some(reference)) = (self.config.early_stop, self.reference_energy) else {
            return;
        };
        if self.converged_at.is_some() {
            return;
        }
        let rows = self.state.trace.rows();
        if rows.len() < stop.window || stop.window == 0 || stop.window % 2 != 0 {
            return;
        }
        let tail = &rows[rows.len() - stop.window..];
        let mean = tail.iter().map(|r| r.energy_mean).sum::<f64>() / stop.window as f64;
        if (mean - reference) / self.spec.n_atoms() as f64 <= stop.threshold {
            self.converged_at = Some(tail[stop.window / 2 - 1].iteration);
        }
    }
}

/// Runs the full schedule from fresh optimizer state.
pub fn train(
    spec: &HamiltonianSpec,
    params: RnnParams,
    dataset: Option<&Dataset>,
    config: TrainConfig,
    reference_energy: Option<f64>,
) -> Result<(RnnParams, EnergyTrace)> {
    let mut trainer = Trainer::new(spec, params, dataset, config)?.with_reference(reference_energy);
    trainer.run()?;
    let state = trainer.into_state();
    Ok((state.params, state.trace))
}

/// Progress line on stderr when `RYDBERG_PROGRESS` is set.
fn progress(spec: &HamiltonianSpec, row: &TraceRow, reference: Option<f64>) {
    if std::env::var_os("RYDBERG_PROGRESS").is_none() {
        return;
    }
    let n = spec.n_atoms() as f64;
    let diff = reference
        .map(|r| format!(" Δ/N={:+.5}", (row.energy_mean - r) / n))
        .unwrap_or_default();
    eprintln!(
        "iter {:>6} [{}] loss={:.6} E/N={:.6}±{:.6}{diff}",
        row.iteration,
        row.phase.as_str(),
        row.loss,
        row.energy_mean / n,
        row.energy_std / n
    );
}
