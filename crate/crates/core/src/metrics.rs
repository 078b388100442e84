//! Energy traces and the convergence metrics computed from them.
//!
//! A trace is written as CSV with the header
//! `iteration,phase,updates_so_far,loss,energy_mean,energy_std`, where
//! `energy_std` is the standard error of the sampled energy mean.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_WINDOW: usize = 50;
pub const DEFAULT_THRESHOLD: f64 = 0.015;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Data,
    Vmc,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Data => "data",
            Phase::Vmc => "vmc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: u64,
    pub phase: Phase,
    pub updates_so_far: u64,
    pub loss: f64,
    pub energy_mean: f64,
    pub energy_std: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnergyTrace {
    rows: Vec<TraceRow>,
}

impl EnergyTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<TraceRow>) -> Result<Self> {
        let mut trace = Self::new();
        for row in rows {
            trace.push(row)?;
        }
        Ok(trace)
    }

    /// Appends a row; iterations must increase and a data row may not follow a vmc row.
    pub fn push(&mut self, row: TraceRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.iteration <= last.iteration {
                return Err(Error::invalid(format!(
                    "trace iteration {} does not follow {}",
                    row.iteration, last.iteration
                )));
            }
            if last.phase == Phase::Vmc && row.phase == Phase::Data {
                return Err(Error::invalid("data-phase row after vmc-phase row"));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// Drops rows past `iteration`.
    pub fn truncate_after(&mut self, iteration: u64) {
        self.rows.retain(|r| r.iteration <= iteration);
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(BufWriter::new(file));
        for row in &self.rows {
            writer.serialize(row)?;
        }
        if self.rows.is_empty() {
            writer.write_record([
                "iteration",
                "phase",
                "updates_so_far",
                "loss",
                "energy_mean",
                "energy_std",
            ])?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let rows = reader
            .deserialize()
            .collect::<std::result::Result<Vec<TraceRow>, _>>()?;
        Self::from_rows(rows)
    }
}

/// Centered moving average of `energy_mean` with offsets
/// `-window/2 + 1 ..= window/2`; boundary rows without a full window are
/// omitted. The result has `len - window + 1` entries labelled by iteration.
pub fn running_average(trace: &EnergyTrace, window: usize) -> Result<Vec<(u64, f64)>> {
    if window == 0 || !window.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "window must be a positive even number, got {window}"
        )));
    }
    let rows = trace.rows();
    if rows.len() < window {
        return Err(Error::invalid(format!(
            "trace has {} rows, shorter than window {window}",
            rows.len()
        )));
    }
    let back = window / 2 - 1;
    Ok(rows
        .windows(window)
        .map(|w| {
            let sum: f64 = w.iter().map(|r| r.energy_mean).sum();
            (w[back].iteration, sum / window as f64)
        })
        .collect())
}

/// First iteration whose smoothed energy density lies within `threshold`
/// of the reference, with the default 50-row window.
pub fn convergence_time(
    trace: &EnergyTrace,
    reference: f64,
    n_atoms: usize,
    threshold: f64,
) -> Option<u64> {
    convergence_time_with_window(trace, reference, n_atoms, threshold, DEFAULT_WINDOW)
}

/// `None` when the threshold is never reached or the trace is shorter than the window.
pub fn convergence_time_with_window(
    trace: &EnergyTrace,
    reference: f64,
    n_atoms: usize,
    threshold: f64,
    window: usize,
) -> Option<u64> {
    let smoothed = running_average(trace, window).ok()?;
    first_crossing(&smoothed, reference, n_atoms, threshold)
}

pub(crate) fn first_crossing(
    series: &[(u64, f64)],
    reference: f64,
    n_atoms: usize,
    threshold: f64,
) -> Option<u64> {
    series
        .iter()
        .find(|(_, e)| (e - reference) / n_atoms as f64 <= threshold)
        .map(|&(t, _)| t)
}

/// Convergence metrics of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub t_trans: Option<u64>,
    pub seed: Option<u64>,
    pub n_atoms: usize,
    pub reference_energy: f64,
    pub threshold: f64,
    pub window: usize,
    pub t_conv: Option<u64>,
    /// Last smoothed energy divided by the number of atoms.
    pub final_energy_density: Option<f64>,
    pub final_density_difference: Option<f64>,
}

impl RunSummary {
    pub fn compute(
        label: impl Into<String>,
        trace: &EnergyTrace,
        reference: f64,
        n_atoms: usize,
        threshold: f64,
        window: usize,
    ) -> Self {
        let smoothed = running_average(trace, window).ok();
        let final_density = smoothed
            .as_ref()
            .and_then(|s| s.last())
            .map(|&(_, e)| e / n_atoms as f64);
        Self {
            label: label.into(),
            t_trans: None,
            seed: None,
            n_atoms,
            reference_energy: reference,
            threshold,
            window,
            t_conv: smoothed
                .as_deref()
                .and_then(|s| first_crossing(s, reference, n_atoms, threshold)),
            final_energy_density: final_density,
            final_density_difference: final_density.map(|d| d - reference / n_atoms as f64),
        }
    }
}
