//! Parameter checkpoints.
//!
//! A checkpoint is a JSON document:
//!
//! ```text
//! {
//!   "format": "rydberg-rnn-checkpoint",
//!   "version": 1,
//!   "nh": 8,
//!   "init_seed": 1,          // seed of the Glorot initialisation
//!   "train_seed": 7,         // seed of the training run
//!   "iteration": 120,
//!   "updates_so_far": 1200,
//!   "params": [ {"name": "reset.input", "shape": [2, 8], "data": [...]}, ... ],
//!   "adam": { "step": 1200, "first_moment": [...], "second_moment": [...] }
//! }
//! ```
//!
//! Tensors appear in storage order with row-major payloads. Floats are
//! written in shortest round-trip form, so a load reproduces the exact bits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::{AdamState, TrainerState};
use crate::wavefunction::{RnnParams, Tensor};

pub const FORMAT: &str = "rydberg-rnn-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamRecord {
    pub step: u64,
    pub first_moment: Vec<TensorRecord>,
    pub second_moment: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub nh: usize,
    pub init_seed: u64,
    pub train_seed: u64,
    pub iteration: u64,
    pub updates_so_far: u64,
    pub params: Vec<TensorRecord>,
    pub adam: Option<AdamRecord>,
}

fn records(params: &RnnParams) -> Vec<TensorRecord> {
    Tensor::ALL
        .iter()
        .map(|&t| {
            let (r, c) = t.shape(params.nh());
            TensorRecord {
                name: t.name().to_string(),
                shape: [r, c],
                data: params.tensor(t).to_vec(),
            }
        })
        .collect()
}

fn from_records(nh: usize, records: &[TensorRecord]) -> Result<RnnParams> {
    let mut params = RnnParams::zeros(nh);
    let mut seen = [false; Tensor::ALL.len()];
    for rec in records {
        let t = Tensor::from_name(&rec.name).ok_or_else(|| {
            Error::invalid(format!("unknown tensor {:?} in checkpoint", rec.name))
        })?;
        let (r, c) = t.shape(nh);
        if rec.shape != [r, c] || rec.data.len() != r * c {
            return Err(Error::invalid(format!(
                "tensor {} has shape {:?} ({} values), expected [{r}, {c}]",
                rec.name,
                rec.shape,
                rec.data.len()
            )));
        }
        params.tensor_mut(t).copy_from_slice(&rec.data);
        seen[Tensor::ALL.iter().position(|&x| x == t).unwrap()] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::invalid(format!(
            "checkpoint lacks tensor {}",
            Tensor::ALL[missing].name()
        )));
    }
    if !params.is_finite() {
        return Err(Error::invalid("checkpoint contains non-finite values"));
    }
    Ok(params)
}

impl Checkpoint {
    pub fn from_params(params: &RnnParams, init_seed: u64) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            nh: params.nh(),
            init_seed,
            train_seed: 0,
            iteration: 0,
            updates_so_far: 0,
            params: records(params),
            adam: None,
        }
    }

    pub fn from_trainer(state: &TrainerState, init_seed: u64, train_seed: u64) -> Self {
        Self {
            train_seed,
            iteration: state.iteration,
            updates_so_far: state.updates_so_far,
            adam: Some(AdamRecord {
                step: state.adam.step,
                first_moment: records(&state.adam.first_moment),
                second_moment: records(&state.adam.second_moment),
            }),
            ..Self::from_params(&state.params, init_seed)
        }
    }

    pub fn params(&self) -> Result<RnnParams> {
        from_records(self.nh, &self.params)
    }

    /// Optimizer state, or fresh moments if the checkpoint has none.
    pub fn adam_state(&self) -> Result<AdamState> {
        match &self.adam {
            None => Ok(AdamState::new(self.nh)),
            Some(rec) => Ok(AdamState {
                first_moment: from_records(self.nh, &rec.first_moment)?,
                second_moment: from_records(self.nh, &rec.second_moment)?,
                step: rec.step,
            }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut out, self)?;
        writeln!(out).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        if ckpt.format != FORMAT {
            return Err(Error::invalid(format!(
                "{}: not a checkpoint file",
                path.display()
            )));
        }
        if ckpt.version != VERSION {
            return Err(Error::invalid(format!(
                "{}: unsupported checkpoint version {}",
                path.display(),
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}
