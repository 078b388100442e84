//! Command-line front end.
//!
//! ```text
//! rydberg-rnn gen-data --L 4 --count 100000 --seed 1 --out d.txt
//! rydberg-rnn train --mode hybrid --t-trans 800 --L 4 --data d.txt --out-dir run/
//! rydberg-rnn train --resume run/
//! rydberg-rnn report --run run/ [--run other/] [--out summary.json]
//! rydberg-rnn replay --manifest run/manifest.json --out-dir again/
//! ```
//!
//! A training run directory holds `trace.csv`, `checkpoint.json` and
//! `manifest.json`; `gen-data` writes its manifest next to the dataset as
//! `<dataset>.manifest.json`. The manifest records every resolved setting, so
//! `replay` can re-execute a run from it alone.
//!
//! `--config FILE` reads `key = value` lines (keys are flag names without the
//! leading dashes) as defaults; flags given on the command line win.
//! `RYDBERG_THREADS` sets the default worker count for `--threads`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::lattice::{default_blockade_radius, HamiltonianSpec};
use crate::metrics::{EnergyTrace, RunSummary, DEFAULT_THRESHOLD, DEFAULT_WINDOW};
use crate::oracle::{self, Dataset, DatasetHeader};
use crate::training::{AdamConfig, EarlyStop, Mode, TrainConfig, Trainer, TrainerState};
use crate::wavefunction::RnnParams;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CAPACITY: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub const TRACE_FILE: &str = "trace.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const THREADS_ENV: &str = "RYDBERG_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "rydberg-rnn",
    version,
    about = "Recurrent-network ground states of Rydberg atom arrays"
)]
#[command(args_override_self = true)]
pub struct Cli {
    /// Worker threads (default: $RYDBERG_THREADS, else all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Solve the lattice exactly and draw projective measurements from the ground state
    GenData(GenDataArgs),
    /// Train the recurrent wavefunction
    Train(TrainArgs),
    /// Convergence metrics of finished runs
    Report(ReportArgs),
    /// Re-execute a run from its manifest
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct LatticeArgs {
    /// Atoms per lattice edge
    #[arg(long = "L", alias = "side", default_value_t = 4)]
    pub side: usize,
    #[arg(long, default_value_t = 1.0)]
    pub spacing: f64,
    /// Rabi frequency
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub omega: f64,
    /// Detuning
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub delta: f64,
    /// Blockade radius (default 7^(1/6))
    #[arg(long)]
    pub rb: Option<f64>,
}

impl LatticeArgs {
    pub fn spec(&self) -> Result<HamiltonianSpec> {
        HamiltonianSpec::new(
            self.side,
            self.spacing,
            self.omega,
            self.delta,
            self.rb.unwrap_or_else(default_blockade_radius),
        )
    }

    fn resolved(&self) -> Self {
        Self {
            rb: Some(self.rb.unwrap_or_else(default_blockade_radius)),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub lattice: LatticeArgs,
    /// Number of measurements
    #[arg(long, default_value_t = 100_000)]
    pub count: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Dataset file to write
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest path (default: <out>.manifest.json)
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub lattice: LatticeArgs,
    /// Hidden units per cell (default 2L)
    #[arg(long)]
    pub nh: Option<usize>,
    /// Seed of the Glorot initialisation
    #[arg(long, default_value_t = 1)]
    pub init_seed: u64,
    #[arg(long, value_enum, default_value_t = Mode::Hybrid)]
    pub mode: Mode,
    /// Data-phase iterations before switching to VMC
    #[arg(long, default_value_t = 0)]
    pub t_trans: u64,
    #[arg(long, default_value_t = 1000)]
    pub iterations: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub eta_data: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub eta_vmc: f64,
    #[arg(long, default_value_t = 100)]
    pub batch_size: usize,
    /// Samples per VMC update
    #[arg(long, default_value_t = 1000)]
    pub n_samples: usize,
    /// Samples per trace energy evaluation
    #[arg(long, default_value_t = 1000)]
    pub eval_samples: usize,
    /// Record the energy every k iterations
    #[arg(long, default_value_t = 1)]
    pub eval_every: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_epsilon: f64,
    /// Keep Adam moments across the data-to-VMC switch
    #[arg(long)]
    pub carry_adam_state: bool,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lr_decay: f64,
    /// Stop once the smoothed energy density reaches the threshold
    #[arg(long)]
    pub stop_at_convergence: bool,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    /// Dataset file for the data phase
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Use only the first N measurements of the dataset
    #[arg(long)]
    pub data_count: Option<usize>,
    /// Reference ground-state energy (default: exact diagonalization when feasible)
    #[arg(long, allow_negative_numbers = true)]
    pub reference_energy: Option<f64>,
    #[arg(long, default_value = "run")]
    pub out_dir: PathBuf,
    /// Write checkpoint and trace every k iterations (0: only at the end)
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: u64,
    /// Continue the run stored in this directory
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many iterations in this invocation
    #[arg(long)]
    pub halt_after: Option<u64>,
    #[arg(long, hide = true)]
    pub config: Option<PathBuf>,
}

impl TrainArgs {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            t_trans: self.t_trans,
            total_iterations: self.iterations,
            eta_data: self.eta_data,
            eta_vmc: self.eta_vmc,
            batch_size: self.batch_size,
            n_samples: self.n_samples,
            eval_samples: self.eval_samples,
            eval_every: self.eval_every,
            seed: self.seed,
            adam: AdamConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.adam_epsilon,
            },
            carry_adam_state: self.carry_adam_state,
            grad_clip: self.grad_clip,
            weight_decay: self.weight_decay,
            lr_decay: self.lr_decay,
            early_stop: self.stop_at_convergence.then_some(EarlyStop {
                threshold: self.threshold,
                window: self.window,
            }),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Run directory containing trace.csv and manifest.json
    #[arg(long = "run")]
    pub runs: Vec<PathBuf>,
    /// Bare trace file; needs --reference-energy and --atoms
    #[arg(long = "trace")]
    pub traces: Vec<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    pub reference_energy: Option<f64>,
    #[arg(long)]
    pub atoms: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    /// Write the JSON summary here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory (train) or dataset path (gen-data); defaults to the recorded one
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Recorded output of `gen-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundStateRecord {
    pub energy: f64,
    pub energy_density: f64,
    pub residual: f64,
    pub count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WavefunctionRecord {
    pub nh: usize,
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunFiles {
    pub manifest: PathBuf,
    pub data_in: Option<PathBuf>,
    pub data_count: Option<usize>,
    pub dataset_out: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Fully resolved description of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub lattice: LatticeArgs,
    pub ground_state: Option<GroundStateRecord>,
    pub wavefunction: Option<WavefunctionRecord>,
    pub training: Option<TrainConfig>,
    pub reference_energy: Option<f64>,
    pub checkpoint_every: Option<u64>,
    pub completed_iterations: Option<u64>,
    pub threads: usize,
    pub files: RunFiles,
}

impl RunManifest {
    fn new(command: &str, lattice: &LatticeArgs, manifest: PathBuf) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            started_unix: unix_now(),
            finished_unix: None,
            lattice: lattice.resolved(),
            ground_state: None,
            wavefunction: None,
            training: None,
            reference_energy: None,
            checkpoint_every: None,
            completed_iterations: None,
            threads: rayon::current_num_threads(),
            files: RunFiles {
                manifest,
                ..RunFiles::default()
            },
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Parses `argv`, runs the command and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(e) = configure_threads(cli.threads) {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::Parse { .. } => EXIT_USAGE,
        Error::Capacity { .. } => EXIT_CAPACITY,
        Error::Convergence { .. } | Error::Numerical(_) => EXIT_NUMERICAL,
        Error::Io { .. } | Error::Csv(_) | Error::Json(_) => EXIT_FAILURE,
    }
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let from_env = std::env::var(THREADS_ENV)
        .ok()
        .map(|v| {
            v.parse::<usize>().map_err(|_| {
                Error::invalid(format!(
                    "{THREADS_ENV} must be a positive integer, got {v:?}"
                ))
            })
        })
        .transpose()?;
    if let Some(n) = flag.or(from_env) {
        if n == 0 {
            return Err(Error::invalid("thread count must be positive"));
        }
        // Ignore the error when a pool already exists (repeated in-process calls).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

const SUBCOMMANDS: [&str; 4] = ["gen-data", "train", "report", "replay"];

/// Splices `--config FILE` entries in front of the explicit flags.
fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(pos) = argv.iter().position(|a| a == "--config") else {
        return Ok(argv);
    };
    let path = argv
        .get(pos + 1)
        .ok_or_else(|| Error::invalid("--config needs a file argument"))?;
    let path = PathBuf::from(path);
    let defaults = read_config_file(&path)?;

    let mut rest = argv.clone();
    rest.drain(pos..pos + 2);
    let insert_at = rest
        .iter()
        .position(|a| SUBCOMMANDS.iter().any(|s| a == s))
        .map(|i| i + 1)
        .ok_or_else(|| Error::invalid("--config must accompany a subcommand"))?;
    let tail = rest.split_off(insert_at);
    rest.extend(defaults);
    rest.extend(tail);
    Ok(rest)
}

fn read_config_file(path: &Path) -> Result<Vec<OsString>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: k + 1,
            message: format!("expected `key = value`, got {raw:?}"),
        })?;
        let key = key.trim().trim_start_matches('-');
        let flag = if key == "L" {
            "--L".to_string()
        } else {
            format!("--{}", key.replace('_', "-"))
        };
        match value.trim() {
            "true" => out.push(flag.into()),
            "false" => {}
            v => {
                out.push(flag.into());
                out.push(v.into());
            }
        }
    }
    Ok(out)
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(args) => cmd_gen_data(&args).map(|_| ()),
        Command::Train(args) => cmd_train(&args).map(|_| ()),
        Command::Report(args) => cmd_report(&args).map(|_| ()),
        Command::Replay(args) => cmd_replay(&args),
    }
}

fn default_manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// Exact ground state, `count` measurements, dataset file and manifest.
pub fn cmd_gen_data(args: &GenDataArgs) -> Result<RunManifest> {
    let spec = args.lattice.spec()?;
    let manifest_path = args
        .manifest
        .clone()
        .unwrap_or_else(|| default_manifest_path(&args.out));
    let mut manifest = RunManifest::new("gen-data", &args.lattice, manifest_path.clone());

    let gs = oracle::ground_state(&spec)?;
    let dataset = oracle::sample_dataset(&gs, args.count, args.seed)?;
    let header = DatasetHeader::for_spec(&spec, &dataset);
    oracle::write_dataset(&args.out, &header, &dataset)?;

    let n = spec.n_atoms() as f64;
    manifest.ground_state = Some(GroundStateRecord {
        energy: gs.energy(),
        energy_density: gs.energy() / n,
        residual: gs.residual(),
        count: args.count,
        seed: args.seed,
    });
    manifest.reference_energy = Some(gs.energy());
    manifest.files.dataset_out = Some(args.out.clone());
    manifest.finished_unix = Some(unix_now());
    manifest.save(&manifest_path)?;
    eprintln!(
        "E0 = {:.10} (E0/N = {:.6}), wrote {} samples to {}",
        gs.energy(),
        gs.energy() / n,
        args.count,
        args.out.display()
    );
    Ok(manifest)
}

fn load_dataset(path: &Path, spec: &HamiltonianSpec, count: Option<usize>) -> Result<Dataset> {
    let (header, dataset) = oracle::read_dataset(path)?;
    if header.side != spec.side() {
        return Err(Error::invalid(format!(
            "{}: dataset is for L={}, run uses L={}",
            path.display(),
            header.side,
            spec.side()
        )));
    }
    Ok(match count {
        Some(c) if c > dataset.len() => {
            return Err(Error::invalid(format!(
                "requested {c} measurements, dataset has {}",
                dataset.len()
            )))
        }
        Some(c) => dataset.truncated(c),
        None => dataset,
    })
}

fn reference_energy(flag: Option<f64>, spec: &HamiltonianSpec) -> Result<Option<f64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    if spec.n_atoms() <= oracle::MAX_ENUMERATION_ATOMS {
        return Ok(Some(oracle::ground_state(spec)?.energy()));
    }
    Ok(None)
}

struct TrainPlan {
    spec: HamiltonianSpec,
    config: TrainConfig,
    dataset: Option<Dataset>,
    state: TrainerState,
    init_seed: u64,
    manifest: RunManifest,
    out_dir: PathBuf,
    checkpoint_every: u64,
}

fn fresh_plan(args: &TrainArgs) -> Result<TrainPlan> {
    let spec = args.lattice.spec()?;
    let config = args.train_config();
    config.validate()?;
    let nh = args.nh.unwrap_or(2 * spec.side());
    let dataset = match &args.data {
        Some(path) if config.data_iterations() > 0 => {
            Some(load_dataset(path, &spec, args.data_count)?)
        }
        _ if config.data_iterations() > 0 => {
            return Err(Error::invalid(
                "--data is required when the schedule has a data phase",
            ))
        }
        _ => None,
    };
    let params = RnnParams::glorot(nh, args.init_seed)?;

    let out_dir = args.out_dir.clone();
    let mut manifest = RunManifest::new("train", &args.lattice, out_dir.join(MANIFEST_FILE));
    manifest.wavefunction = Some(WavefunctionRecord {
        nh,
        init_seed: args.init_seed,
    });
    manifest.training = Some(config.clone());
    manifest.reference_energy = reference_energy(args.reference_energy, &spec)?;
    manifest.checkpoint_every = Some(args.checkpoint_every);
    manifest.files.data_in = args.data.clone().filter(|_| dataset.is_some());
    manifest.files.data_count = args.data_count.filter(|_| dataset.is_some());
    manifest.files.trace = Some(out_dir.join(TRACE_FILE));
    manifest.files.checkpoint = Some(out_dir.join(CHECKPOINT_FILE));

    Ok(TrainPlan {
        spec,
        config,
        dataset,
        state: TrainerState {
            adam: crate::training::AdamState::new(nh),
            params,
            iteration: 0,
            updates_so_far: 0,
            trace: EnergyTrace::new(),
        },
        init_seed: args.init_seed,
        manifest,
        out_dir,
        checkpoint_every: args.checkpoint_every,
    })
}

/// Rebuilds the plan of a recorded run; `state` starts from scratch unless resumed.
fn plan_from_manifest(manifest: RunManifest, out_dir: PathBuf) -> Result<TrainPlan> {
    let spec = manifest.lattice.spec()?;
    let config = manifest
        .training
        .clone()
        .ok_or_else(|| Error::invalid("manifest has no training section"))?;
    let wf = manifest
        .wavefunction
        .clone()
        .ok_or_else(|| Error::invalid("manifest has no wavefunction section"))?;
    let dataset = match &manifest.files.data_in {
        Some(path) => Some(load_dataset(path, &spec, manifest.files.data_count)?),
        None => None,
    };
    let mut manifest = manifest;
    manifest.started_unix = unix_now();
    manifest.finished_unix = None;
    manifest.threads = rayon::current_num_threads();
    manifest.files.manifest = out_dir.join(MANIFEST_FILE);
    manifest.files.trace = Some(out_dir.join(TRACE_FILE));
    manifest.files.checkpoint = Some(out_dir.join(CHECKPOINT_FILE));
    Ok(TrainPlan {
        spec,
        dataset,
        state: TrainerState {
            params: RnnParams::glorot(wf.nh, wf.init_seed)?,
            adam: crate::training::AdamState::new(wf.nh),
            iteration: 0,
            updates_so_far: 0,
            trace: EnergyTrace::new(),
        },
        init_seed: wf.init_seed,
        checkpoint_every: manifest.checkpoint_every.unwrap_or(0),
        config,
        manifest,
        out_dir,
    })
}

fn resume_plan(dir: &Path) -> Result<TrainPlan> {
    let manifest = RunManifest::load(&dir.join(MANIFEST_FILE))?;
    let mut plan = plan_from_manifest(manifest, dir.to_path_buf())?;
    let ckpt = Checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
    let mut trace = EnergyTrace::read_csv(&dir.join(TRACE_FILE))?;
    trace.truncate_after(ckpt.iteration);
    plan.state = TrainerState {
        params: ckpt.params()?,
        adam: ckpt.adam_state()?,
        iteration: ckpt.iteration,
        updates_so_far: ckpt.updates_so_far,
        trace,
    };
    Ok(plan)
}

fn save_progress(plan: &TrainPlan, state: &TrainerState) -> Result<()> {
    state.trace.write_csv(&plan.out_dir.join(TRACE_FILE))?;
    Checkpoint::from_trainer(state, plan.init_seed, plan.config.seed)
        .save(&plan.out_dir.join(CHECKPOINT_FILE))
}

fn execute_plan(mut plan: TrainPlan, halt_after: Option<u64>) -> Result<RunManifest> {
    fs::create_dir_all(&plan.out_dir).map_err(|e| Error::io(&plan.out_dir, e))?;
    plan.manifest.save(&plan.out_dir.join(MANIFEST_FILE))?;

    let state = std::mem::replace(
        &mut plan.state,
        TrainerState {
            params: RnnParams::zeros(1),
            adam: crate::training::AdamState::new(1),
            iteration: 0,
            updates_so_far: 0,
            trace: EnergyTrace::new(),
        },
    );
    let mut trainer = Trainer::resume(
        &plan.spec,
        plan.dataset.as_ref(),
        plan.config.clone(),
        state,
    )?
    .with_reference(plan.manifest.reference_energy);

    let start = trainer.iteration();
    let mut failure = None;
    while !trainer.is_finished() {
        if halt_after.is_some_and(|h| trainer.iteration() - start >= h) {
            break;
        }
        match trainer.step() {
            Ok(Some(row)) if std::env::var_os("RYDBERG_PROGRESS").is_some() => {
                eprintln!(
                    "iter {:>6} [{}] loss={:.6} E={:.6}±{:.6}",
                    row.iteration,
                    row.phase.as_str(),
                    row.loss,
                    row.energy_mean,
                    row.energy_std
                );
            }
            Ok(_) => {}
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
        let t = trainer.iteration();
        if failure.is_none() && plan.checkpoint_every > 0 && t % plan.checkpoint_every == 0 {
            save_progress(&plan, trainer.state())?;
        }
    }

    let state = trainer.into_state();
    if let Some(err) = failure {
        // keep the diagnostic row, but not parameters that produced it
        state.trace.write_csv(&plan.out_dir.join(TRACE_FILE))?;
        return Err(err);
    }
    save_progress(&plan, &state)?;
    plan.manifest.completed_iterations = Some(state.iteration);
    plan.manifest.finished_unix = Some(unix_now());
    plan.manifest.save(&plan.out_dir.join(MANIFEST_FILE))?;
    Ok(plan.manifest)
}

/// Runs (or resumes) training and writes trace, checkpoint and manifest.
pub fn cmd_train(args: &TrainArgs) -> Result<RunManifest> {
    let plan = match &args.resume {
        Some(dir) => resume_plan(dir)?,
        None => fresh_plan(args)?,
    };
    execute_plan(plan, args.halt_after)
}

/// Per-run summaries plus t_conv aggregated by transition point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub threshold: f64,
    pub window: usize,
    pub runs: Vec<RunSummary>,
    pub by_t_trans: Vec<TransitionRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRow {
    pub t_trans: u64,
    pub runs: usize,
    pub converged: usize,
    pub mean_t_conv: Option<f64>,
    pub t_conv: Vec<Option<u64>>,
}

pub fn cmd_report(args: &ReportArgs) -> Result<Report> {
    if args.runs.is_empty() && args.traces.is_empty() {
        return Err(Error::invalid("report needs at least one --run or --trace"));
    }
    let mut runs = Vec::new();
    for dir in &args.runs {
        let manifest = RunManifest::load(&dir.join(MANIFEST_FILE))?;
        let trace = EnergyTrace::read_csv(&dir.join(TRACE_FILE))?;
        let reference = args
            .reference_energy
            .or(manifest.reference_energy)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "{}: no reference energy in manifest; pass --reference-energy",
                    dir.display()
                ))
            })?;
        let n = manifest.lattice.side * manifest.lattice.side;
        let mut summary = RunSummary::compute(
            dir.display().to_string(),
            &trace,
            reference,
            n,
            args.threshold,
            args.window,
        );
        if let Some(cfg) = &manifest.training {
            summary.t_trans = Some(cfg.data_iterations().min(cfg.total_iterations));
            summary.seed = Some(cfg.seed);
        }
        runs.push(summary);
    }
    for path in &args.traces {
        let reference = args
            .reference_energy
            .ok_or_else(|| Error::invalid("--trace needs --reference-energy"))?;
        let n = args
            .atoms
            .ok_or_else(|| Error::invalid("--trace needs --atoms"))?;
        let trace = EnergyTrace::read_csv(path)?;
        runs.push(RunSummary::compute(
            path.display().to_string(),
            &trace,
            reference,
            n,
            args.threshold,
            args.window,
        ));
    }

    let mut keys: Vec<u64> = runs.iter().filter_map(|r| r.t_trans).collect();
    keys.sort_unstable();
    keys.dedup();
    let by_t_trans = keys
        .into_iter()
        .map(|t| {
            let t_conv: Vec<Option<u64>> = runs
                .iter()
                .filter(|r| r.t_trans == Some(t))
                .map(|r| r.t_conv)
                .collect();
            let done: Vec<u64> = t_conv.iter().flatten().copied().collect();
            TransitionRow {
                t_trans: t,
                runs: t_conv.len(),
                converged: done.len(),
                mean_t_conv: (!done.is_empty())
                    .then(|| done.iter().sum::<u64>() as f64 / done.len() as f64),
                t_conv,
            }
        })
        .collect();

    let report = Report {
        threshold: args.threshold,
        window: args.window,
        runs,
        by_t_trans,
    };
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match &args.out {
        Some(path) => fs::write(path, &text).map_err(|e| Error::io(path, e))?,
        None => print!("{text}"),
    }
    for row in &report.by_t_trans {
        let mean = row
            .mean_t_conv
            .map_or_else(|| "-".to_string(), |m| format!("{m:.1}"));
        eprintln!(
            "t_trans={:>6}  runs={}  converged={}  mean t_conv={mean}",
            row.t_trans, row.runs, row.converged
        );
    }
    Ok(report)
}

pub fn cmd_replay(args: &ReplayArgs) -> Result<()> {
    let manifest = RunManifest::load(&args.manifest)?;
    match manifest.command.as_str() {
        "gen-data" => {
            let gs = manifest
                .ground_state
                .as_ref()
                .ok_or_else(|| Error::invalid("gen-data manifest lacks its ground-state record"))?;
            let out = match &args.out_dir {
                Some(p) => p.clone(),
                None => manifest
                    .files
                    .dataset_out
                    .clone()
                    .ok_or_else(|| Error::invalid("manifest lacks the dataset path"))?,
            };
            cmd_gen_data(&GenDataArgs {
                lattice: manifest.lattice.clone(),
                count: gs.count,
                seed: gs.seed,
                manifest: Some(default_manifest_path(&out)),
                out,
                config: None,
            })?;
            Ok(())
        }
        "train" => {
            let out_dir = match &args.out_dir {
                Some(p) => p.clone(),
                None => manifest
                    .files
                    .manifest
                    .parent()
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| PathBuf::from(".")),
            };
            let plan = plan_from_manifest(manifest, out_dir)?;
            execute_plan(plan, None).map(|_| ())
        }
        other => Err(Error::invalid(format!("cannot replay command {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        let argv: Vec<OsString> = std::iter::once("rydberg-rnn")
            .chain(args.iter().copied())
            .map(OsString::from)
            .collect();
        Cli::try_parse_from(expand_config(argv).unwrap()).unwrap()
    }

    #[test]
    fn train_flags_mirror_config() {
        let cli = parse(&[
            "train",
            "--mode",
            "hybrid",
            "--t-trans",
            "800",
            "--L",
            "4",
            "--iterations",
            "2000",
            "--eta-data",
            "1e-4",
            "--n-samples",
            "1000",
            "--carry-adam-state",
        ]);
        let Command::Train(args) = cli.command else {
            panic!()
        };
        let cfg = args.train_config();
        assert_eq!(cfg.mode, Mode::Hybrid);
        assert_eq!(cfg.t_trans, 800);
        assert_eq!(cfg.total_iterations, 2000);
        assert_eq!(cfg.eta_data, 1e-4);
        assert_eq!(cfg.eta_vmc, 1e-3);
        assert_eq!(cfg.batch_size, 100);
        assert_eq!(cfg.n_samples, 1000);
        assert!(cfg.carry_adam_state);
        assert_eq!(args.lattice.side, 4);
    }

    #[test]
    fn config_file_supplies_defaults_and_flags_win() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(
            &cfg,
            "# defaults\nL = 3\nt_trans = 5\neta-vmc = 0.01\ncarry-adam-state = true\nseed = 9\n",
        )
        .unwrap();
        let cli = parse(&["train", "--config", cfg.to_str().unwrap(), "--seed", "2"]);
        let Command::Train(args) = cli.command else {
            panic!()
        };
        assert_eq!(args.lattice.side, 3);
        assert_eq!(args.t_trans, 5);
        assert_eq!(args.eta_vmc, 0.01);
        assert!(args.carry_adam_state);
        assert_eq!(args.seed, 2);
    }

    #[test]
    fn manifest_round_trips() {
        let lattice = LatticeArgs {
            side: 3,
            spacing: 1.0,
            omega: 1.0,
            delta: 0.7,
            rb: None,
        };
        let mut m = RunManifest::new("train", &lattice, PathBuf::from("x/manifest.json"));
        m.training = Some(TrainConfig {
            grad_clip: Some(0.3),
            early_stop: Some(EarlyStop::default()),
            ..TrainConfig::default()
        });
        m.reference_energy = Some(-0.1 - 0.2);
        m.wavefunction = Some(WavefunctionRecord {
            nh: 6,
            init_seed: 4,
        });
        let text = serde_json::to_string(&m).unwrap();
        let back: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.lattice.rb, Some(default_blockade_radius()));
    }

    #[test]
    fn error_exit_codes_are_distinct() {
        let codes = [
            exit_code(&Error::invalid("x")),
            exit_code(&Error::Capacity {
                what: "x",
                atoms: 1,
                limit: 0,
            }),
            exit_code(&Error::Numerical("x".into())),
            exit_code(&Error::io("p", std::io::Error::other("x"))),
        ];
        assert_eq!(
            codes,
            [EXIT_USAGE, EXIT_CAPACITY, EXIT_NUMERICAL, EXIT_FAILURE]
        );
    }
}
