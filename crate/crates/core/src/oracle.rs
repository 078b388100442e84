//! Exact-diagonalization reference: ground state, exact projective
//! measurements, and exhaustive energy expectation values.
//!
//! The ground-state vector is indexed by configuration, with bit `i` of the
//! index holding the occupation of site `i`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::{Configuration, HamiltonianSpec};
use crate::rng::{self, REDUCTION_CHUNK};
use crate::wavefunction::LogProb;

/// Largest system whose state vector we are willing to hold.
pub const MAX_ED_ATOMS: usize = 20;
/// Largest system for exhaustive enumeration of expectation values.
pub const MAX_ENUMERATION_ATOMS: usize = 16;
/// Up to this size `EigenSolver::Auto` builds the dense matrix.
pub const DENSE_LIMIT: usize = 10;

const RESIDUAL_TARGET: f64 = 1e-10;
const RESIDUAL_LIMIT: f64 = 1e-8;
const KRYLOV_DIM: usize = 40;
const MAX_RESTARTS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EigenSolver {
    #[default]
    Auto,
    Dense,
    Lanczos,
}

#[derive(Debug, Clone)]
pub struct ExactGroundState {
    energy: f64,
    residual: f64,
    n_atoms: usize,
    amplitudes: Vec<f64>,
}

impl ExactGroundState {
    pub fn energy(&self) -> f64 {
        self.energy
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    /// `‖Hψ - E₀ψ‖` of the returned vector.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    pub fn amplitude(&self, sigma: &Configuration) -> f64 {
        self.amplitudes[sigma.to_index()]
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a * a).collect()
    }

    /// Probability of finding each site in the Rydberg state.
    pub fn site_marginals(&self) -> Vec<f64> {
        let mut marginals = vec![0.0; self.n_atoms];
        for (index, a) in self.amplitudes.iter().enumerate() {
            let p = a * a;
            for (site, m) in marginals.iter_mut().enumerate() {
                if (index >> site) & 1 == 1 {
                    *m += p;
                }
            }
        }
        marginals
    }
}

impl LogProb for ExactGroundState {
    fn log_prob_bits(&self, bits: &[u8]) -> f64 {
        let index = bits
            .iter()
            .enumerate()
            .fold(0usize, |acc, (i, &b)| acc | ((b as usize) << i));
        let a = self.amplitudes[index];
        2.0 * a.ln()
    }
}

pub fn ground_state(spec: &HamiltonianSpec) -> Result<ExactGroundState> {
    ground_state_with(spec, EigenSolver::Auto)
}

pub fn ground_state_with(spec: &HamiltonianSpec, solver: EigenSolver) -> Result<ExactGroundState> {
    let n = spec.n_atoms();
    if n > MAX_ED_ATOMS {
        return Err(Error::Capacity {
            what: "exact diagonalization",
            atoms: n,
            limit: MAX_ED_ATOMS,
        });
    }
    let op = RydbergOperator::new(spec);

    if spec.omega() == 0.0 {
        return Ok(classical_ground_state(&op, n));
    }

    let (energy, mut vector) = match solver {
        EigenSolver::Dense => dense_lowest(&op),
        EigenSolver::Auto if n <= DENSE_LIMIT => dense_lowest(&op),
        _ => lanczos_lowest(&op)?,
    };

    fix_sign(&mut vector);
    let hv = op.apply(&vector);
    let residual = residual_norm(&hv, &vector, energy);
    if residual > RESIDUAL_LIMIT {
        return Err(Error::Convergence {
            iterations: 0,
            residual,
        });
    }

    Ok(ExactGroundState {
        energy,
        residual,
        n_atoms: n,
        amplitudes: vector,
    })
}

/// With `Ω = 0` the Hamiltonian is diagonal; pick the lowest-index minimum.
fn classical_ground_state(op: &RydbergOperator, n: usize) -> ExactGroundState {
    let (best, energy) =
        op.diagonal
            .iter()
            .copied()
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |acc, (i, e)| if e < acc.1 { (i, e) } else { acc },
            );
    let mut amplitudes = vec![0.0; op.dim()];
    amplitudes[best] = 1.0;
    ExactGroundState {
        energy,
        residual: 0.0,
        n_atoms: n,
        amplitudes,
    }
}

/// Matrix-free action of the Hamiltonian on the `2^N` basis.
struct RydbergOperator {
    n: usize,
    half_omega: f64,
    diagonal: Vec<f64>,
}

impl RydbergOperator {
    fn new(spec: &HamiltonianSpec) -> Self {
        let n = spec.n_atoms();
        let diagonal = (0..1usize << n)
            .into_par_iter()
            .map(|index| spec.diagonal_energy_index(index))
            .collect();
        Self {
            n,
            half_omega: 0.5 * spec.omega(),
            diagonal,
        }
    }

    fn dim(&self) -> usize {
        self.diagonal.len()
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        self.apply_into(v, &mut out);
        out
    }

    fn apply_into(&self, v: &[f64], out: &mut [f64]) {
        out.par_iter_mut().enumerate().for_each(|(s, o)| {
            let mut flips = 0.0;
            for i in 0..self.n {
                flips += v[s ^ (1 << i)];
            }
            *o = self.diagonal[s] * v[s] - self.half_omega * flips;
        });
    }

    fn dense(&self) -> DMatrix<f64> {
        let dim = self.dim();
        let mut m = DMatrix::zeros(dim, dim);
        for s in 0..dim {
            m[(s, s)] = self.diagonal[s];
            for i in 0..self.n {
                m[(s, s ^ (1 << i))] = -self.half_omega;
            }
        }
        m
    }
}

fn dense_lowest(op: &RydbergOperator) -> (f64, Vec<f64>) {
    let eig = SymmetricEigen::new(op.dense());
    let k = eig.eigenvalues.imin();
    let vector: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
    (eig.eigenvalues[k], vector)
}

/// Explicitly restarted Lanczos with full reorthogonalisation. Each cycle
/// builds a Krylov space from the current Ritz vector; the start vector is
/// uniform, which overlaps the (nonnegative) ground state.
fn lanczos_lowest(op: &RydbergOperator) -> Result<(f64, Vec<f64>)> {
    let dim = op.dim();
    let m = KRYLOV_DIM.min(dim);
    let mut start = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut w = vec![0.0; dim];
    let mut residual = f64::INFINITY;
    let mut matvecs = 0;

    for _ in 0..MAX_RESTARTS {
        let mut basis: Vec<Vec<f64>> = vec![start.clone()];
        let mut alpha = Vec::with_capacity(m);
        let mut beta: Vec<f64> = Vec::with_capacity(m);

        for j in 0..m {
            op.apply_into(&basis[j], &mut w);
            matvecs += 1;
            let a = dot(&basis[j], &w);
            alpha.push(a);
            // Two Gram-Schmidt passes against the whole basis.
            for _ in 0..2 {
                for q in &basis {
                    let overlap = dot(q, &w);
                    axpy(-overlap, q, &mut w);
                }
            }
            let b = norm(&w);
            if j + 1 == m || b < 1e-13 * a.abs().max(1.0) {
                break;
            }
            beta.push(b);
            basis.push(w.iter().map(|x| x / b).collect());
        }

        let k = alpha.len();
        let mut t = DMatrix::zeros(k, k);
        for i in 0..k {
            t[(i, i)] = alpha[i];
            if i + 1 < k {
                t[(i, i + 1)] = beta[i];
                t[(i + 1, i)] = beta[i];
            }
        }
        let eig = SymmetricEigen::new(t);
        let lowest = eig.eigenvalues.imin();
        let coeffs = eig.eigenvectors.column(lowest);

        let mut ritz = vec![0.0; dim];
        for (c, q) in coeffs.iter().zip(&basis) {
            axpy(*c, q, &mut ritz);
        }
        let scale = norm(&ritz);
        ritz.iter_mut().for_each(|x| *x /= scale);

        op.apply_into(&ritz, &mut w);
        matvecs += 1;
        let energy = dot(&ritz, &w);
        residual = residual_norm(&w, &ritz, energy);
        if residual <= RESIDUAL_TARGET {
            return Ok((energy, ritz));
        }
        start = ritz;
    }

    Err(Error::Convergence {
        iterations: matvecs,
        residual,
    })
}

/// Make the largest-magnitude entry positive, then clear round-off negatives.
fn fix_sign(v: &mut [f64]) {
    let largest = v
        .iter()
        .copied()
        .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
    if largest < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    for x in v.iter_mut() {
        if *x < 0.0 && *x >= -1e-12 {
            *x = 0.0;
        }
    }
}

fn residual_norm(hv: &[f64], v: &[f64], energy: f64) -> f64 {
    let sq: Vec<f64> = hv
        .par_chunks(4096)
        .zip(v.par_chunks(4096))
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - energy * y).powi(2))
                .sum::<f64>()
        })
        .collect();
    sq.iter().sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let partial: Vec<f64> = a
        .par_chunks(4096)
        .zip(b.par_chunks(4096))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .collect();
    partial.iter().sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.par_chunks_mut(4096)
        .zip(x.par_chunks(4096))
        .for_each(|(ys, xs)| ys.iter_mut().zip(xs).for_each(|(yi, xi)| *yi += alpha * xi));
}

/// Where a dataset came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Oracle,
    File,
}

impl DataSource {
    pub fn tag(self) -> &'static str {
        match self {
            DataSource::Oracle => "oracle",
            DataSource::File => "file",
        }
    }
}

impl std::str::FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(DataSource::Oracle),
            "file" => Ok(DataSource::File),
            other => Err(Error::invalid(format!("unknown data source {other:?}"))),
        }
    }
}

/// A set of projective measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Configuration>,
    pub seed: Option<u64>,
    pub source: DataSource,
}

impl Dataset {
    pub fn new(samples: Vec<Configuration>, seed: Option<u64>, source: DataSource) -> Result<Self> {
        if let Some(first) = samples.first() {
            if samples.iter().any(|s| s.len() != first.len()) {
                return Err(Error::invalid("dataset samples have differing lengths"));
            }
        }
        Ok(Self {
            samples,
            seed,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_sites(&self) -> Option<usize> {
        self.samples.first().map(Configuration::len)
    }

    /// First `count` samples, keeping provenance.
    pub fn truncated(&self, count: usize) -> Self {
        Self {
            samples: self.samples.iter().take(count).cloned().collect(),
            seed: self.seed,
            source: self.source,
        }
    }
}

/// `count` independent draws from `|ψ(σ)|²` by inverse CDF; sample `k` uses
/// the random stream `(seed, k)`.
pub fn sample_dataset(gs: &ExactGroundState, count: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    let mut cdf = Vec::with_capacity(gs.amplitudes.len());
    let mut acc = 0.0;
    for a in &gs.amplitudes {
        acc += a * a;
        cdf.push(acc);
    }
    let total = acc;
    let last = cdf.len() - 1;
    let n = gs.n_atoms;

    let samples = (0..count)
        .into_par_iter()
        .map(|k| {
            let u: f64 = rng::stream(seed, k as u64).random::<f64>() * total;
            let index = cdf.partition_point(|&c| c <= u).min(last);
            Configuration::from_index(index, n)
        })
        .collect();
    Dataset::new(samples, Some(seed), DataSource::Oracle)
}

/// `Σ_σ p(σ) H_loc(σ)` by exhaustive enumeration, with
/// `p = exp(logprob)` and `H_loc(σ) = E_diag(σ) - (Ω/2) Σ_i exp(½(logprob(σ^i) - logprob(σ)))`.
pub fn enumerated_energy<F>(spec: &HamiltonianSpec, logprob: F) -> Result<f64>
where
    F: Fn(&Configuration) -> f64 + Sync,
{
    let n = spec.n_atoms();
    if n > MAX_ENUMERATION_ATOMS {
        return Err(Error::Capacity {
            what: "exhaustive enumeration",
            atoms: n,
            limit: MAX_ENUMERATION_ATOMS,
        });
    }
    let table: Vec<f64> = (0..1usize << n)
        .into_par_iter()
        .map(|index| logprob(&Configuration::from_index(index, n)))
        .collect();
    Ok(enumerated_energy_from_table(spec, &table))
}

/// Same as [`enumerated_energy`] with the log-probabilities precomputed,
/// indexed by configuration.
pub fn enumerated_energy_from_table(spec: &HamiltonianSpec, log_probs: &[f64]) -> f64 {
    let n = spec.n_atoms();
    let half_omega = 0.5 * spec.omega();
    let partial: Vec<f64> = (0..log_probs.len())
        .collect::<Vec<_>>()
        .par_chunks(REDUCTION_CHUNK * 64)
        .map(|chunk| {
            let mut acc = 0.0;
            for &s in chunk {
                let lp = log_probs[s];
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let mut flips = 0.0;
                for i in 0..n {
                    flips += (0.5 * (log_probs[s ^ (1 << i)] - lp)).exp();
                }
                let local = spec.diagonal_energy_index(s) - half_omega * flips;
                acc += lp.exp() * local;
            }
            acc
        })
        .collect();
    partial.iter().sum()
}

/// Header fields of the dataset text format.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub side: usize,
    pub delta: f64,
    pub omega: f64,
    pub rb: f64,
    pub seed: Option<u64>,
    pub source: DataSource,
}

impl DatasetHeader {
    pub fn for_spec(spec: &HamiltonianSpec, dataset: &Dataset) -> Self {
        Self {
            side: spec.side(),
            delta: spec.delta(),
            omega: spec.omega(),
            rb: spec.blockade_radius(),
            seed: dataset.seed,
            source: dataset.source,
        }
    }

    fn render(&self) -> String {
        let seed = self
            .seed
            .map_or_else(|| "none".to_string(), |s| s.to_string());
        format!(
            "# L={} delta={} omega={} rb={} seed={} source={}",
            self.side,
            self.delta,
            self.omega,
            self.rb,
            seed,
            self.source.tag()
        )
    }

    fn parse(line: &str) -> std::result::Result<Self, String> {
        let body = line
            .strip_prefix('#')
            .ok_or_else(|| "header must start with '#'".to_string())?;
        let mut side = None;
        let mut delta = None;
        let mut omega = None;
        let mut rb = None;
        let mut seed = None;
        let mut source = None;
        for field in body.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| format!("malformed header field {field:?}"))?;
            let bad = |e: &dyn std::fmt::Display| format!("header field {key}: {e}");
            match key {
                "L" => side = Some(value.parse::<usize>().map_err(|e| bad(&e))?),
                "delta" => delta = Some(value.parse::<f64>().map_err(|e| bad(&e))?),
                "omega" => omega = Some(value.parse::<f64>().map_err(|e| bad(&e))?),
                "rb" => rb = Some(value.parse::<f64>().map_err(|e| bad(&e))?),
                "seed" => {
                    seed = Some(if value == "none" {
                        None
                    } else {
                        Some(value.parse::<u64>().map_err(|e| bad(&e))?)
                    })
                }
                "source" => source = Some(value.parse::<DataSource>().map_err(|e| bad(&e))?),
                _ => return Err(format!("unknown header field {key:?}")),
            }
        }
        let missing = |k: &str| format!("header lacks {k}");
        Ok(Self {
            side: side.ok_or_else(|| missing("L"))?,
            delta: delta.ok_or_else(|| missing("delta"))?,
            omega: omega.ok_or_else(|| missing("omega"))?,
            rb: rb.ok_or_else(|| missing("rb"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            source: source.ok_or_else(|| missing("source"))?,
        })
    }
}

/// Writes the header line followed by one `0/1` line per sample.
pub fn write_dataset(path: &Path, header: &DatasetHeader, dataset: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "{}", header.render()).map_err(io)?;
    for sample in &dataset.samples {
        writeln!(out, "{sample}").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Dataset)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty dataset file".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header = DatasetHeader::parse(&header_line).map_err(|m| parse_err(1, m))?;
    let n = header.side * header.side;

    let mut samples = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let sample: Configuration = line
            .parse()
            .map_err(|e: Error| parse_err(k + 2, e.to_string()))?;
        if sample.len() != n {
            return Err(parse_err(
                k + 2,
                format!("expected {n} sites, found {}", sample.len()),
            ));
        }
        samples.push(sample);
    }
    let dataset = Dataset::new(samples, header.seed, header.source)?;
    Ok((header, dataset))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn single_atom_closed_form() {
        let spec = HamiltonianSpec::new(1, 1.0, 1.0, 1.0, 1.0).unwrap();
        let gs = ground_state(&spec).unwrap();
        assert_relative_eq!(gs.energy(), (-1.0 - 2f64.sqrt()) / 2.0, epsilon = 1e-12);
        assert!(gs.amplitudes().iter().all(|&a| a > 0.0));
    }

    #[test]
    fn classical_limit_matches_enumeration() {
        let min_diagonal = |spec: &HamiltonianSpec| {
            (0..16)
                .map(|i| {
                    spec.diagonal_energy(&Configuration::from_index(i, 4))
                        .unwrap()
                })
                .fold(f64::INFINITY, f64::min)
        };
        // couplings scale with the drive, so at zero drive only the detuning remains
        let spec = HamiltonianSpec::new(2, 1.0, 0.0, 1.0, default_rb()).unwrap();
        let brute = min_diagonal(&spec);
        assert_eq!(brute, -4.0);
        let gs = ground_state(&spec).unwrap();
        assert_relative_eq!(gs.energy(), brute, epsilon = 1e-12);
        assert_eq!(gs.amplitudes()[15], 1.0);

        // with the standard couplings the classical optimum is the diagonal pair
        let standard = HamiltonianSpec::standard(2).unwrap();
        assert_relative_eq!(min_diagonal(&standard), -1.125, epsilon = 1e-12);
    }

    fn default_rb() -> f64 {
        crate::lattice::default_blockade_radius()
    }

    #[test]
    fn lanczos_agrees_with_dense() {
        let spec = HamiltonianSpec::standard(3).unwrap();
        let dense = ground_state_with(&spec, EigenSolver::Dense).unwrap();
        let lanczos = ground_state_with(&spec, EigenSolver::Lanczos).unwrap();
        assert_relative_eq!(dense.energy(), lanczos.energy(), epsilon = 1e-10);
        for (a, b) in dense.amplitudes().iter().zip(lanczos.amplitudes()) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(lanczos.residual() <= 1e-8);
    }

    #[test]
    fn ground_state_is_normalized_and_nonnegative() {
        for side in [2, 3] {
            let gs = ground_state(&HamiltonianSpec::standard(side).unwrap()).unwrap();
            let norm: f64 = gs.amplitudes().iter().map(|a| a * a).sum();
            assert!((norm - 1.0).abs() < 1e-10);
            assert!(gs.amplitudes().iter().all(|&a| a >= 0.0));
        }
    }

    #[test]
    fn refuses_oversized_systems() {
        let spec = HamiltonianSpec::standard(5).unwrap();
        assert!(matches!(ground_state(&spec), Err(Error::Capacity { .. })));
        assert!(matches!(
            enumerated_energy(&spec, |_| 0.0),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn eigenstate_local_energy_is_flat() {
        let spec = HamiltonianSpec::standard(3).unwrap();
        let gs = ground_state(&spec).unwrap();
        let n = spec.n_atoms();
        for index in 0..1usize << n {
            let p = gs.amplitudes()[index].powi(2);
            if p <= 1e-12 {
                continue;
            }
            let sigma = Configuration::from_index(index, n);
            let local = crate::energy::local_energy_with(&spec, &gs, &sigma).unwrap();
            assert!((local - gs.energy()).abs() <= 1e-6, "{sigma}: {local}");
        }
    }

    #[test]
    fn enumerated_energy_of_exact_state_is_ground_energy() {
        let spec = HamiltonianSpec::standard(3).unwrap();
        let gs = ground_state(&spec).unwrap();
        let e = enumerated_energy(&spec, |s| gs.log_prob(s)).unwrap();
        assert_relative_eq!(e, gs.energy(), epsilon = 1e-9);
    }

    #[test]
    fn enumerated_energy_uniform_single_atom() {
        let spec = HamiltonianSpec::new(1, 1.0, 1.0, 1.0, 1.0).unwrap();
        let e = enumerated_energy(&spec, |_| 0.5f64.ln()).unwrap();
        assert_relative_eq!(e, -1.0, epsilon = 1e-14);
    }

    #[test]
    fn delta_distribution_samples_one_config() {
        let mut amplitudes = vec![0.0; 16];
        amplitudes[0b0110] = 1.0;
        let gs = ExactGroundState {
            energy: 0.0,
            residual: 0.0,
            n_atoms: 4,
            amplitudes,
        };
        let data = sample_dataset(&gs, 500, 3).unwrap();
        let expect = Configuration::from_index(0b0110, 4);
        assert!(data.samples.iter().all(|s| *s == expect));
    }

    #[test]
    fn sampling_is_seeded() {
        let gs = ground_state(&HamiltonianSpec::standard(2).unwrap()).unwrap();
        let a = sample_dataset(&gs, 1000, 42).unwrap();
        let b = sample_dataset(&gs, 1000, 42).unwrap();
        let c = sample_dataset(&gs, 1000, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.samples, c.samples);
        assert!(sample_dataset(&gs, 0, 1).is_err());
    }

    #[test]
    fn sampler_total_variation_small() {
        let gs = ground_state(&HamiltonianSpec::standard(2).unwrap()).unwrap();
        let count = 1_000_000;
        let data = sample_dataset(&gs, count, 7).unwrap();
        let mut hist = [0usize; 16];
        for s in &data.samples {
            hist[s.to_index()] += 1;
        }
        let tv: f64 = hist
            .iter()
            .zip(gs.probabilities())
            .map(|(&h, p)| (h as f64 / count as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv <= 0.01, "tv = {tv}");
    }

    #[test]
    fn dataset_file_round_trip() {
        let spec = HamiltonianSpec::standard(2).unwrap();
        let gs = ground_state(&spec).unwrap();
        let data = sample_dataset(&gs, 50, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.txt");
        let header = DatasetHeader::for_spec(&spec, &data);
        write_dataset(&path, &header, &data).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            format!(
                "# L=2 delta=1 omega=1 rb={} seed=11 source=oracle",
                default_rb()
            )
        );
        assert!(lines.all(|l| l.len() == 4 && l.bytes().all(|b| b == b'0' || b == b'1')));
        assert!(text.ends_with('\n'));

        let (h2, d2) = read_dataset(&path).unwrap();
        assert_eq!(h2, header);
        assert_eq!(d2, data);
    }

    #[test]
    fn dataset_reader_reports_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(
            &path,
            "# L=2 delta=1 omega=1 rb=1 seed=none source=file\n0101\n011\n",
        )
        .unwrap();
        match read_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&path, "L=2\n").unwrap();
        assert!(matches!(
            read_dataset(&path),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn sampled_marginals_match_exact_marginals() {
        let gs = ground_state(&HamiltonianSpec::standard(4).unwrap()).unwrap();
        let count = 100_000;
        let data = sample_dataset(&gs, count, 11).unwrap();
        for (site, &exact) in gs.site_marginals().iter().enumerate() {
            let hits = data.samples.iter().filter(|s| s.bits()[site] == 1).count();
            let freq = hits as f64 / count as f64;
            let se = (exact * (1.0 - exact) / count as f64).sqrt();
            assert!(
                (freq - exact).abs() <= 4.0 * se,
                "site {site}: {freq} vs {exact}"
            );
        }
    }

    fn random_params(nh: usize, seed: u64, scale: f64) -> crate::wavefunction::RnnParams {
        use rand::Rng;
        let mut p = crate::wavefunction::RnnParams::glorot(nh, seed).unwrap();
        p.scale(scale);
        let mut r = crate::rng::stream(seed, 1);
        for t in crate::wavefunction::Tensor::ALL
            .into_iter()
            .filter(|t| t.is_bias())
        {
            for b in p.tensor_mut(t) {
                *b = scale * (2.0 * r.random::<f64>() - 1.0);
            }
        }
        p
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(50))]
        #[test]
        fn network_energy_respects_variational_bound(seed in 0u64..u64::MAX, scale in 0.1f64..4.0) {
            for side in [2usize, 3] {
                let spec = HamiltonianSpec::standard(side).unwrap();
                let e0 = ground_state(&spec).unwrap().energy();
                let p = random_params(2 * side, seed, scale);
                let e = enumerated_energy(&spec, |s| p.log_prob(s)).unwrap();
                proptest::prop_assert!(e >= e0 - 1e-9, "{} < {}", e, e0);
            }
        }
    }
}
