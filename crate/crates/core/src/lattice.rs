//! Rydberg Hamiltonian on an `L x L` open-boundary square lattice.
//!
//! ```text
//! H = -(Ω/2) Σ_i σˣ_i - δ Σ_i n_i + Σ_{i<j} V_ij n_i n_j,   V_ij = Ω R_b⁶ / |r_i - r_j|⁶
//! ```
//!
//! Sites are numbered in row-major raster order, `site = row * L + col`, and
//! every module of the crate shares that order. Interactions are kept at all
//! distances and each unordered pair contributes once.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Blockade radius `7^(1/6)`, which makes the nearest-neighbour coupling
/// exactly `7 Ω`.
pub fn default_blockade_radius() -> f64 {
    7f64.powf(1.0 / 6.0)
}

/// Immutable description of the lattice and its drive parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianSpec {
    side: usize,
    spacing: f64,
    omega: f64,
    delta: f64,
    rb: f64,
    positions: Vec<[f64; 2]>,
    /// Row-major `N x N`, zero diagonal.
    couplings: Vec<f64>,
}

impl HamiltonianSpec {
    pub fn new(side: usize, spacing: f64, omega: f64, delta: f64, rb: f64) -> Result<Self> {
        if side == 0 {
            return Err(Error::invalid("lattice side L must be positive"));
        }
        if !spacing.is_finite() || spacing <= 0.0 {
            return Err(Error::invalid(format!(
                "lattice spacing must be positive, got {spacing}"
            )));
        }
        if !rb.is_finite() || rb <= 0.0 {
            return Err(Error::invalid(format!(
                "blockade radius must be positive, got {rb}"
            )));
        }
        if !omega.is_finite() || !delta.is_finite() {
            return Err(Error::invalid("Rabi frequency and detuning must be finite"));
        }

        let n = side * side;
        let positions: Vec<[f64; 2]> = (0..n)
            .map(|site| {
                [
                    (site / side) as f64 * spacing,
                    (site % side) as f64 * spacing,
                ]
            })
            .collect();

        let rb6 = rb.powi(6);
        let mut couplings = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = positions[i][0] - positions[j][0];
                let dy = positions[i][1] - positions[j][1];
                let r2 = dx * dx + dy * dy;
                let v = omega * rb6 / (r2 * r2 * r2);
                couplings[i * n + j] = v;
                couplings[j * n + i] = v;
            }
        }

        Ok(Self {
            side,
            spacing,
            omega,
            delta,
            rb,
            positions,
            couplings,
        })
    }

    /// `δ = Ω = 1`, `a = 1`, `R_b = 7^(1/6)`.
    pub fn standard(side: usize) -> Result<Self> {
        Self::new(side, 1.0, 1.0, 1.0, default_blockade_radius())
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn n_atoms(&self) -> usize {
        self.side * self.side
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn blockade_radius(&self) -> f64 {
        self.rb
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn coupling(&self, i: usize, j: usize) -> f64 {
        self.couplings[i * self.n_atoms() + j]
    }

    /// Full `N x N` coupling matrix, row-major.
    pub fn couplings(&self) -> &[f64] {
        &self.couplings
    }

    /// `-δ Σ n_i + Σ_{i<j} V_ij n_i n_j`.
    pub fn diagonal_energy(&self, sigma: &Configuration) -> Result<f64> {
        self.check_len(sigma)?;
        Ok(self.diagonal_energy_bits(sigma.bits()))
    }

    /// Unchecked variant of [`diagonal_energy`](Self::diagonal_energy) for hot loops.
    pub(crate) fn diagonal_energy_bits(&self, bits: &[u8]) -> f64 {
        let n = self.n_atoms();
        debug_assert_eq!(bits.len(), n);
        let mut occupied = 0usize;
        let mut interaction = 0.0;
        for i in 0..n {
            if bits[i] == 0 {
                continue;
            }
            occupied += 1;
            let row = &self.couplings[i * n..(i + 1) * n];
            for j in (i + 1)..n {
                if bits[j] != 0 {
                    interaction += row[j];
                }
            }
        }
        interaction - self.delta * occupied as f64
    }

    /// Diagonal energy of the configuration whose site `i` is bit `i` of `index`.
    pub(crate) fn diagonal_energy_index(&self, index: usize) -> f64 {
        let n = self.n_atoms();
        let mut occupied = 0usize;
        let mut interaction = 0.0;
        let mut rest = index;
        while rest != 0 {
            let i = rest.trailing_zeros() as usize;
            rest &= rest - 1;
            occupied += 1;
            let row = &self.couplings[i * n..(i + 1) * n];
            let mut higher = rest;
            while higher != 0 {
                let j = higher.trailing_zeros() as usize;
                higher &= higher - 1;
                interaction += row[j];
            }
        }
        interaction - self.delta * occupied as f64
    }

    pub(crate) fn check_len(&self, sigma: &Configuration) -> Result<()> {
        if sigma.len() != self.n_atoms() {
            return Err(Error::invalid(format!(
                "configuration has {} sites, lattice has {}",
                sigma.len(),
                self.n_atoms()
            )));
        }
        Ok(())
    }
}

/// One occupation bitstring: `1` is the Rydberg state, `0` the ground state.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Configuration(Vec<u8>);

impl Configuration {
    /// Fails unless every entry is 0 or 1.
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(bad) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::invalid(format!(
                "occupation must be 0 or 1, got {bad}"
            )));
        }
        Ok(Self(bits))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0; n])
    }

    /// Site `i` takes bit `i` of `index`.
    pub fn from_index(index: usize, n: usize) -> Self {
        Self((0..n).map(|i| ((index >> i) & 1) as u8).collect())
    }

    pub fn to_index(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .fold(0, |acc, (i, &b)| acc | ((b as usize) << i))
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn occupation(&self) -> usize {
        self.0.iter().filter(|&&b| b == 1).count()
    }

    pub fn flipped(&self, site: usize) -> Self {
        let mut bits = self.0.clone();
        bits[site] ^= 1;
        Self(bits)
    }

    pub fn into_bits(self) -> Vec<u8> {
        self.0
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b == 1 { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for Configuration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.bytes()
            .map(|c| match c {
                b'0' => Ok(0),
                b'1' => Ok(1),
                other => Err(Error::invalid(format!(
                    "unexpected character {:?} in configuration",
                    other as char
                ))),
            })
            .collect::<Result<Vec<u8>>>()
            .map(Self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn config(s: &str) -> Configuration {
        s.parse().unwrap()
    }

    #[test]
    fn blockade_radius_value() {
        assert_relative_eq!(default_blockade_radius(), 1.3830875, epsilon = 1e-7);
        assert_relative_eq!(default_blockade_radius().powi(6), 7.0, epsilon = 1e-12);
    }

    #[test]
    fn two_by_two_couplings() {
        let spec = HamiltonianSpec::standard(2).unwrap();
        // sites 0=(0,0) 1=(0,1) 2=(1,0) 3=(1,1)
        assert_relative_eq!(spec.coupling(0, 1), 7.0, max_relative = 1e-12);
        assert_relative_eq!(spec.coupling(0, 2), 7.0, max_relative = 1e-12);
        assert_relative_eq!(spec.coupling(0, 3), 0.875, max_relative = 1e-12);
        assert_relative_eq!(spec.coupling(1, 2), 0.875, max_relative = 1e-12);
        assert_eq!(spec.coupling(2, 2), 0.0);
    }

    #[test]
    fn sixteen_by_sixteen_has_256_atoms() {
        let spec = HamiltonianSpec::standard(16).unwrap();
        assert_eq!(spec.n_atoms(), 256);
        assert_eq!(spec.positions().len(), 256);
    }

    #[test]
    fn positions_are_row_major_grid() {
        let spec = HamiltonianSpec::new(3, 0.5, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(spec.positions()[0], [0.0, 0.0]);
        assert_eq!(spec.positions()[1], [0.0, 0.5]);
        assert_eq!(spec.positions()[3], [0.5, 0.0]);
        assert_eq!(spec.positions()[8], [1.0, 1.0]);
    }

    #[test]
    fn couplings_match_formula_at_every_pair() {
        let spec = HamiltonianSpec::new(3, 1.3, 0.7, 1.1, 1.9).unwrap();
        let n = spec.n_atoms();
        for i in 0..n {
            for j in 0..n {
                let v = spec.coupling(i, j);
                if i == j {
                    assert_eq!(v, 0.0);
                    continue;
                }
                let (ri, rj) = (spec.positions()[i], spec.positions()[j]);
                let dist = ((ri[0] - rj[0]).powi(2) + (ri[1] - rj[1]).powi(2)).sqrt();
                let expect = 0.7 * 1.9f64.powi(6) / dist.powi(6);
                assert!(((v - expect) / expect).abs() <= 1e-12, "pair ({i},{j})");
                assert_eq!(v, spec.coupling(j, i));
                assert!(v > 0.0);
            }
        }
    }

    #[test]
    fn couplings_decrease_with_distance() {
        let spec = HamiltonianSpec::standard(4).unwrap();
        let n = spec.n_atoms();
        let mut pairs: Vec<(f64, f64)> = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let (ri, rj) = (spec.positions()[i], spec.positions()[j]);
                let d2 = (ri[0] - rj[0]).powi(2) + (ri[1] - rj[1]).powi(2);
                pairs.push((d2, spec.coupling(i, j)));
            }
        }
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in pairs.windows(2) {
            if w[1].0 > w[0].0 {
                assert!(w[1].1 < w[0].1);
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(HamiltonianSpec::new(0, 1.0, 1.0, 1.0, 1.0).is_err());
        assert!(HamiltonianSpec::new(2, 0.0, 1.0, 1.0, 1.0).is_err());
        assert!(HamiltonianSpec::new(2, 1.0, 1.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn diagonal_energy_examples() {
        let spec = HamiltonianSpec::standard(2).unwrap();
        assert_eq!(spec.diagonal_energy(&config("0000")).unwrap(), 0.0);
        assert_eq!(spec.diagonal_energy(&config("0100")).unwrap(), -1.0);
        assert_relative_eq!(
            spec.diagonal_energy(&config("1001")).unwrap(),
            -1.125,
            epsilon = 1e-12
        );
        // every pair once: 4 edges and 2 diagonals
        assert_relative_eq!(
            spec.diagonal_energy(&config("1111")).unwrap(),
            -4.0 + 4.0 * 7.0 + 2.0 * 0.875,
            epsilon = 1e-12
        );
    }

    #[test]
    fn diagonal_energy_rejects_length_mismatch() {
        let spec = HamiltonianSpec::standard(2).unwrap();
        assert!(matches!(
            spec.diagonal_energy(&config("010")),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn configuration_round_trips() {
        let c = Configuration::from_index(0b1011, 5);
        assert_eq!(c.to_string(), "11010");
        assert_eq!(c.to_index(), 0b1011);
        assert_eq!(config("11010"), c);
        assert!("0120".parse::<Configuration>().is_err());
        assert!(Configuration::new(vec![0, 2]).is_err());
    }

    fn rotate(bits: &[u8], side: usize) -> Vec<u8> {
        let mut out = vec![0; bits.len()];
        for r in 0..side {
            for c in 0..side {
                out[c * side + (side - 1 - r)] = bits[r * side + c];
            }
        }
        out
    }

    fn reflect(bits: &[u8], side: usize) -> Vec<u8> {
        let mut out = vec![0; bits.len()];
        for r in 0..side {
            for c in 0..side {
                out[r * side + (side - 1 - c)] = bits[r * side + c];
            }
        }
        out
    }

    proptest! {
        #[test]
        fn diagonal_energy_respects_lattice_symmetry(index in 0usize..(1 << 16)) {
            let spec = HamiltonianSpec::standard(4).unwrap();
            let sigma = Configuration::from_index(index, 16);
            let e = spec.diagonal_energy(&sigma).unwrap();
            let rotated = Configuration::new(rotate(sigma.bits(), 4)).unwrap();
            let reflected = Configuration::new(reflect(sigma.bits(), 4)).unwrap();
            prop_assert!((spec.diagonal_energy(&rotated).unwrap() - e).abs() < 1e-10);
            prop_assert!((spec.diagonal_energy(&reflected).unwrap() - e).abs() < 1e-10);
        }

        #[test]
        fn index_and_bit_paths_agree(index in 0usize..(1 << 9)) {
            let spec = HamiltonianSpec::standard(3).unwrap();
            let sigma = Configuration::from_index(index, 9);
            let a = spec.diagonal_energy_bits(sigma.bits());
            let b = spec.diagonal_energy_index(index);
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
