//! Local energy and the sampled energy estimator.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::{Configuration, HamiltonianSpec};
use crate::wavefunction::{self, LogProb, RnnParams};

/// Samples drawn per energy estimate unless configured otherwise.
pub const DEFAULT_ENERGY_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyEstimate {
    pub mean: f64,
    /// Standard deviation of the sample mean.
    pub std_error: f64,
    pub n_samples: usize,
}

impl EnergyEstimate {
    pub fn from_local_energies(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n == 0 {
            return Err(Error::invalid("no local energies to average"));
        }
        let mean = shifted_mean(values);
        let std_error = if n > 1 {
            let var = values.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Ok(Self {
            mean,
            std_error,
            n_samples: n,
        })
    }
}

/// Mean computed relative to the first element; exact for constant input.
pub(crate) fn shifted_mean(values: &[f64]) -> f64 {
    let first = values[0];
    let offset = values.iter().map(|v| v - first).sum::<f64>() / values.len() as f64;
    first + offset
}

fn assemble(spec: &HamiltonianSpec, bits: &[u8], log_p: f64, flipped: &[f64]) -> f64 {
    let off_diagonal: f64 = flipped.iter().map(|lf| (0.5 * (lf - log_p)).exp()).sum();
    spec.diagonal_energy_bits(bits) - 0.5 * spec.omega() * off_diagonal
}

/// `H_loc(σ) = E_diag(σ) - (Ω/2) Σ_i ψ(σ^i)/ψ(σ)` for the network wavefunction.
pub fn local_energy(
    spec: &HamiltonianSpec,
    params: &RnnParams,
    sigma: &Configuration,
) -> Result<f64> {
    spec.check_len(sigma)?;
    Ok(local_energy_bits(spec, params, sigma.bits()))
}

pub(crate) fn local_energy_bits(spec: &HamiltonianSpec, params: &RnnParams, bits: &[u8]) -> f64 {
    let (log_p, flipped) = wavefunction::log_prob_with_flips(params, bits);
    assemble(spec, bits, log_p, &flipped)
}

/// Reference evaluation with `N + 1` independent forward passes.
pub fn local_energy_naive(
    spec: &HamiltonianSpec,
    params: &RnnParams,
    sigma: &Configuration,
) -> Result<f64> {
    local_energy_with(spec, params, sigma)
}

/// Local energy for any wavefunction given by its log-probability.
pub fn local_energy_with<W: LogProb + ?Sized>(
    spec: &HamiltonianSpec,
    psi: &W,
    sigma: &Configuration,
) -> Result<f64> {
    spec.check_len(sigma)?;
    let bits = sigma.bits();
    let log_p = psi.log_prob_bits(bits);
    let mut scratch = bits.to_vec();
    let flipped: Vec<f64> = (0..bits.len())
        .map(|i| {
            scratch[i] ^= 1;
            let lp = psi.log_prob_bits(&scratch);
            scratch[i] ^= 1;
            lp
        })
        .collect();
    Ok(assemble(spec, bits, log_p, &flipped))
}

/// Local energies of a batch, evaluated in parallel.
pub fn local_energies(
    spec: &HamiltonianSpec,
    params: &RnnParams,
    batch: &[Configuration],
) -> Result<Vec<f64>> {
    if let Some(bad) = batch.iter().find(|s| s.len() != spec.n_atoms()) {
        spec.check_len(bad)?;
    }
    Ok(batch
        .par_iter()
        .map(|s| local_energy_bits(spec, params, s.bits()))
        .collect())
}

/// Mean and standard error of `H_loc` over `n_samples` fresh draws.
pub fn energy_estimate(
    spec: &HamiltonianSpec,
    params: &RnnParams,
    n_samples: usize,
    seed: u64,
) -> Result<EnergyEstimate> {
    let samples = wavefunction::sample(params, spec.n_atoms(), n_samples, seed)?;
    let values = local_energies(spec, params, &samples.configs)?;
    EnergyEstimate::from_local_energies(&values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::wavefunction::LogProb;
    use approx::assert_relative_eq;

    fn single_atom() -> HamiltonianSpec {
        HamiltonianSpec::new(1, 1.0, 1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn single_atom_uniform_wavefunction() {
        let spec = single_atom();
        let p = RnnParams::zeros(3);
        let zero = local_energy(&spec, &p, &"0".parse().unwrap()).unwrap();
        let one = local_energy(&spec, &p, &"1".parse().unwrap()).unwrap();
        assert_relative_eq!(zero, -0.5, epsilon = 1e-15);
        assert_relative_eq!(one, -1.5, epsilon = 1e-15);
        assert_relative_eq!(0.5 * zero + 0.5 * one, -1.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_drive_reduces_to_diagonal() {
        let spec = HamiltonianSpec::new(2, 1.0, 0.0, 1.0, 1.2).unwrap();
        let p = RnnParams::glorot(4, 1).unwrap();
        for index in 0..16 {
            let s = Configuration::from_index(index, 4);
            assert_eq!(
                local_energy(&spec, &p, &s).unwrap(),
                spec.diagonal_energy(&s).unwrap()
            );
        }
    }

    #[test]
    fn cached_and_naive_are_bit_identical() {
        let spec = HamiltonianSpec::standard(3).unwrap();
        let p = RnnParams::glorot(5, 12).unwrap();
        for index in (0..512).step_by(37) {
            let s = Configuration::from_index(index, 9);
            let a = local_energy(&spec, &p, &s).unwrap();
            let b = local_energy_naive(&spec, &p, &s).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_wrong_length() {
        let spec = HamiltonianSpec::standard(2).unwrap();
        let p = RnnParams::zeros(2);
        assert!(local_energy(&spec, &p, &"010".parse().unwrap()).is_err());
    }

    #[test]
    fn exact_amplitudes_give_zero_variance() {
        let spec = HamiltonianSpec::standard(2).unwrap();
        let gs = oracle::ground_state(&spec).unwrap();
        let data = oracle::sample_dataset(&gs, 200, 4).unwrap();
        let values: Vec<f64> = data
            .samples
            .iter()
            .map(|s| local_energy_with(&spec, &gs, s).unwrap())
            .collect();
        let est = EnergyEstimate::from_local_energies(&values).unwrap();
        assert!(est.std_error <= 1e-6);
        assert!((est.mean - gs.energy()).abs() <= 1e-6);
    }

    #[test]
    fn estimate_is_seeded_and_close_to_enumeration() {
        let spec = HamiltonianSpec::standard(2).unwrap();
        let p = RnnParams::glorot(4, 3).unwrap();
        let a = energy_estimate(&spec, &p, 10_000, 1).unwrap();
        assert_eq!(a, energy_estimate(&spec, &p, 10_000, 1).unwrap());
        let exact = oracle::enumerated_energy(&spec, |s| p.log_prob(s)).unwrap();
        assert!(
            (a.mean - exact).abs() <= 5.0 * a.std_error,
            "{} vs {exact}",
            a.mean
        );
        assert_eq!(a.n_samples, 10_000);
    }

    #[test]
    fn shifted_mean_is_exact_for_constants() {
        let v = vec![0.1; 1000];
        assert_eq!(shifted_mean(&v), 0.1);
    }

    #[test]
    fn estimator_is_unbiased_over_seeds() {
        let spec = HamiltonianSpec::standard(2).unwrap();
        let p = RnnParams::glorot(4, 17).unwrap();
        let exact = oracle::enumerated_energy(&spec, |s| p.log_prob(s)).unwrap();
        let runs: Vec<EnergyEstimate> = (0..100)
            .map(|seed| energy_estimate(&spec, &p, 1000, seed).unwrap())
            .collect();
        let mean = runs.iter().map(|r| r.mean).sum::<f64>() / 100.0;
        let se = runs.iter().map(|r| r.std_error.powi(2)).sum::<f64>().sqrt() / 100.0;
        assert!(
            (mean - exact).abs() <= 3.0 * se,
            "{mean} vs {exact} (se {se})"
        );
    }
}
