//! Batch command-line front end.
//!
//! One process runs one command: generate data, pretrain, finetune,
//! evaluate, infer, or verify gradients. All output is line-oriented with
//! a stable field order so runs can be diffed; every failure prints a
//! single machine-parseable line to stderr,
//! `error category=<c> exit=<n> message=<text>`, and the process exits with
//!
//! * 0 — success,
//! * 2 — configuration problem (bad flags, bad config file, incompatible
//!   checkpoint),
//! * 3 — data problem (unreadable or malformed files, empty datasets),
//! * 4 — numeric failure (a training loss became non-finite),
//! * 5 — gradient-check failure.
//!
//! The `MOTIONLIFT_SEED` environment variable overrides the seeds in the
//! config file for both training phases, so sweeps can reuse one config.
//! `--threads` defaults to 1; the current implementation computes on one
//! thread regardless of the value, which keeps every run bit-reproducible.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::Axis;

use crate::checkpoint::{load_backbone, load_checkpoint, restore_model, save_checkpoint};
use crate::config::{load_run_config, RunConfig};
use crate::data::{
    batch_inputs, chain_topology, default_h36m_topology, generate_synthetic_dataset, read_dataset,
    write_dataset, JointTopology, PoseKind, PoseSequence, SamplePair,
};
use crate::error::{
    CheckpointError, ConfigError, DataError, MetricError, NetworkError, TrainError,
};
use crate::finetune::{finetune_loop, TaskKind};
use crate::gradcheck::{run_gradcheck, DEFAULT_ROUNDS, DEFAULT_TOLERANCE};
use crate::metrics::{evaluate, Protocol};
use crate::network::{ForwardMode, Model, NetworkConfig, RunMode};
use crate::pretrain::{pretrain_loop, TeacherState};

/// Environment variable that overrides the config seeds.
pub const SEED_ENV: &str = "MOTIONLIFT_SEED";

/// Process exit codes, one per failure class.
pub mod exit_code {
    pub const SUCCESS: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const NUMERIC: i32 = 4;
    pub const GRADCHECK: i32 = 5;
}

// ---------------------------------------------------------------------------
// Argument grammar
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "motionlift",
    version,
    about = "2D-to-3D pose lifting: synthetic data, pretraining, finetuning, evaluation"
)]
struct Cli {
    /// Worker-thread budget. The current implementation computes on one
    /// thread regardless, which keeps runs bit-reproducible; the flag is
    /// accepted for forward compatibility.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic 2D/3D pose dataset file.
    GenData {
        /// Output dataset path (one JSON record per line).
        #[arg(long)]
        out: PathBuf,
        /// Number of sequences to generate.
        #[arg(long, default_value_t = 8)]
        sequences: usize,
        /// Frames per sequence.
        #[arg(long, default_value_t = 243)]
        frames: usize,
        /// Joints per frame (17 uses the standard skeleton, anything else a chain).
        #[arg(long, default_value_t = 17)]
        joints: usize,
        /// Standard deviation of the 2D observation noise.
        #[arg(long, default_value_t = 0.01)]
        noise_std: f64,
        /// Generator seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },

    /// Masked self-distillation pretraining; writes a checkpoint holding
    /// both the student and the momentum teacher.
    Pretrain {
        /// Run configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Training dataset.
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Optional loss-curve file: one "step loss" line per step.
        #[arg(long)]
        curve: Option<PathBuf>,
    },

    /// Supervised finetuning; writes a checkpoint and a metric log
    /// (the checkpoint path plus ".log").
    Finetune {
        /// Run configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Training dataset.
        #[arg(long)]
        data: PathBuf,
        /// Optional pretraining checkpoint to initialize the backbone from;
        /// overrides `finetune.init_checkpoint` in the config.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Optional curve file: one "epoch train_loss val_metric" line per epoch.
        #[arg(long)]
        curve: Option<PathBuf>,
    },

    /// Evaluate a checkpoint on a dataset and print the report.
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long)]
        ckpt: PathBuf,
        /// Evaluation dataset.
        #[arg(long)]
        data: PathBuf,
        /// Protocol: p1 (MPJPE), p2 (Procrustes-aligned MPJPE), pck, auc,
        /// or action (Top-1 accuracy).
        #[arg(long, default_value = "p1")]
        protocol: String,
    },

    /// Predict 3D poses for a dataset and write them in the dataset format.
    Infer {
        /// Checkpoint to run.
        #[arg(long)]
        ckpt: PathBuf,
        /// Input dataset (2D observations are read, 3D targets ignored).
        #[arg(long)]
        input: PathBuf,
        /// Output dataset path holding the predictions.
        #[arg(long)]
        output: PathBuf,
    },

    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        /// Base seed for the random restarts.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of random restarts.
        #[arg(long, default_value_t = DEFAULT_ROUNDS)]
        rounds: usize,
    },
}

// ---------------------------------------------------------------------------
// Failure classification
// ---------------------------------------------------------------------------

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Data(#[from] DataError),
    #[error("{0}")]
    Train(#[from] TrainError),
    #[error("{0}")]
    Metric(#[from] MetricError),
    #[error("{0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Network(#[from] NetworkError),
    #[error("{0}")]
    Usage(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("gradient check failed")]
    GradcheckFailed,
}

impl CliError {
    fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) | CliError::Usage(_) | CliError::Network(_) => "config",
            CliError::Data(_) | CliError::Io { .. } => "data",
            CliError::Checkpoint(e) => match e {
                CheckpointError::Io { .. } => "data",
                _ => "checkpoint",
            },
            CliError::Train(e) => match e {
                TrainError::NonFiniteLoss { .. } => "numeric",
                TrainError::Data(_) | TrainError::MissingLabel => "data",
                _ => "config",
            },
            CliError::Metric(e) => match e {
                MetricError::EmptyDataset => "data",
                _ => "config",
            },
            CliError::GradcheckFailed => "gradcheck",
        }
    }

    fn exit_code(&self) -> i32 {
        match self.category() {
            "data" => exit_code::DATA,
            "numeric" => exit_code::NUMERIC,
            "gradcheck" => exit_code::GRADCHECK,
            _ => exit_code::CONFIG,
        }
    }
}

/// Flattens a message onto one line so the failure line stays parseable.
fn one_line(text: &str) -> String {
    text.split(['\n', '\r'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("; ")
}

fn report_failure(err: &CliError) -> i32 {
    let code = err.exit_code();
    eprintln!(
        "error category={} exit={} message={}",
        err.category(),
        code,
        one_line(&err.to_string())
    );
    code
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

/// Parses the process arguments, runs one command, and returns the exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return exit_code::SUCCESS;
            }
            eprintln!(
                "error category=config exit={} message={}",
                exit_code::CONFIG,
                one_line(&e.to_string())
            );
            return exit_code::CONFIG;
        }
    };
    match execute(cli) {
        Ok(()) => exit_code::SUCCESS,
        Err(err) => report_failure(&err),
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be >= 1".into()));
    }
    match cli.command {
        Command::GenData {
            out,
            sequences,
            frames,
            joints,
            noise_std,
            seed,
        } => cmd_gen_data(&out, sequences, frames, joints, noise_std, seed),
        Command::Pretrain {
            config,
            data,
            out,
            curve,
        } => cmd_pretrain(&config, &data, &out, curve.as_deref()),
        Command::Finetune {
            config,
            data,
            init,
            out,
            curve,
        } => cmd_finetune(&config, &data, init.as_deref(), &out, curve.as_deref()),
        Command::Eval {
            ckpt,
            data,
            protocol,
        } => cmd_eval(&ckpt, &data, &protocol),
        Command::Infer {
            ckpt,
            input,
            output,
        } => cmd_infer(&ckpt, &input, &output),
        Command::Gradcheck { seed, rounds } => cmd_gradcheck(seed, rounds),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn parse_seed_text(text: &str) -> Result<u64, CliError> {
    text.trim().parse::<u64>().map_err(|_| {
        CliError::Usage(format!(
            "{SEED_ENV} must be an unsigned 64-bit integer, got {text:?}"
        ))
    })
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(text) => parse_seed_text(&text).map(Some),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(std::env::VarError::NotUnicode(_)) => Err(CliError::Usage(format!(
            "{SEED_ENV} must be valid unicode"
        ))),
    }
}

/// Loads a run configuration and applies the environment seed override.
fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let mut config = load_run_config(path)?;
    if let Some(seed) = env_seed()? {
        config.override_seed(seed);
    }
    Ok(config)
}

/// The skeleton for a joint count: the standard 17-joint body, or a chain
/// for any other size (matching the synthetic generator).
fn topology_for(joints: usize) -> JointTopology {
    if joints == 17 {
        default_h36m_topology()
    } else {
        chain_topology(joints)
    }
}

/// Rejects data whose geometry disagrees with the configured architecture
/// before any compute starts.
fn check_geometry(network: &NetworkConfig, pairs: &[SamplePair]) -> Result<(), CliError> {
    for (i, (input, _)) in pairs.iter().enumerate() {
        if input.frames != network.frames || input.joints != network.joints {
            return Err(CliError::Usage(format!(
                "sequence {} holds {} frames x {} joints but the config expects {} x {}",
                i, input.frames, input.joints, network.frames, network.joints
            )));
        }
    }
    Ok(())
}

fn write_lines<I: IntoIterator<Item = String>>(path: &Path, lines: I) -> Result<(), CliError> {
    let mut text = String::new();
    for line in lines {
        text.push_str(&line);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// The metric log sits next to the checkpoint: `<out>.log`.
fn metric_log_path(out: &Path) -> PathBuf {
    PathBuf::from(format!("{}.log", out.display()))
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_gen_data(
    out: &Path,
    sequences: usize,
    frames: usize,
    joints: usize,
    noise_std: f64,
    seed: u64,
) -> Result<(), CliError> {
    if sequences == 0 || frames == 0 || joints == 0 {
        return Err(CliError::Usage(
            "--sequences, --frames, and --joints must be >= 1".into(),
        ));
    }
    if !noise_std.is_finite() || noise_std < 0.0 {
        return Err(CliError::Usage(format!(
            "--noise-std must be finite and >= 0, got {noise_std}"
        )));
    }
    let topology = topology_for(joints);
    let pairs = generate_synthetic_dataset(sequences, frames, &topology, noise_std, seed)?;
    write_dataset(out, &pairs)?;
    println!(
        "gen-data sequences {} frames {} joints {} noise_std {} seed {} out {}",
        sequences,
        frames,
        joints,
        noise_std,
        seed,
        out.display()
    );
    Ok(())
}

fn cmd_pretrain(
    config_path: &Path,
    data_path: &Path,
    out: &Path,
    curve: Option<&Path>,
) -> Result<(), CliError> {
    let config = load_config(config_path)?;
    let pairs = read_dataset(data_path)?;
    check_geometry(&config.network, &pairs)?;
    let inputs: Vec<PoseSequence> = pairs.into_iter().map(|(input, _)| input).collect();

    let topology = topology_for(config.network.joints);
    let mut student = Model::new(config.network.clone(), &topology, config.pretrain.seed)?;
    let mut teacher = TeacherState::new(&student, &config.pretrain);
    let mut opt = crate::pretrain::make_optimizer(&student, &config.pretrain);
    let report = pretrain_loop(
        &mut student,
        &mut teacher,
        &inputs,
        &config.pretrain,
        &mut opt,
    )?;

    for (i, loss) in report.losses.iter().enumerate() {
        println!("pretrain step {} loss {:.16e}", i + 1, loss);
    }
    if let Some(curve_path) = curve {
        write_lines(
            curve_path,
            report
                .losses
                .iter()
                .enumerate()
                .map(|(i, loss)| format!("{} {:.16e}", i + 1, loss)),
        )?;
    }
    save_checkpoint(out, &student, report.losses.len(), Some(&teacher))?;

    let first = report.losses.first().copied().unwrap_or(f64::NAN);
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "pretrain steps {} teacher_forwards {} first_loss {:.16e} last_loss {:.16e} out {}",
        report.losses.len(),
        report.teacher_forwards,
        first,
        last,
        out.display()
    );
    Ok(())
}

fn cmd_finetune(
    config_path: &Path,
    data_path: &Path,
    init: Option<&Path>,
    out: &Path,
    curve: Option<&Path>,
) -> Result<(), CliError> {
    let config = load_config(config_path)?;
    if config.finetune.task == TaskKind::Action && config.network.action_classes.is_none() {
        return Err(CliError::Usage(
            "finetune.task \"action\" requires network.action_classes".into(),
        ));
    }
    let pairs = read_dataset(data_path)?;
    check_geometry(&config.network, &pairs)?;

    let topology = topology_for(config.network.joints);
    let mut model = Model::new(config.network.clone(), &topology, config.finetune.seed)?;

    let config_init = config.finetune.init_checkpoint.clone().map(PathBuf::from);
    let init_path = init.map(Path::to_path_buf).or(config_init);
    if let Some(p) = &init_path {
        let ckpt = load_checkpoint(p)?;
        let copied = load_backbone(&mut model, &ckpt)?;
        println!("finetune init {} backbone_tensors {}", p.display(), copied);
    }

    let mut opt = crate::finetune::make_optimizer(&model, &config.finetune, &pairs);
    let logs = finetune_loop(&mut model, &pairs, &config.finetune, &mut opt)?;

    let metric_name = match config.finetune.task {
        TaskKind::Pose3d => "val_mpjpe",
        TaskKind::Action => "val_top1",
    };
    for log in &logs {
        println!("finetune {}", log.render(config.finetune.task));
    }
    // The metric log repeats the epoch rows without wall-clock time, so two
    // runs with the same seed produce byte-identical files.
    let log_path = metric_log_path(out);
    write_lines(
        &log_path,
        logs.iter().map(|l| {
            format!(
                "epoch {} train_loss {:.16e} {} {:.16e}",
                l.epoch, l.train_loss, metric_name, l.val_metric
            )
        }),
    )?;
    if let Some(curve_path) = curve {
        write_lines(
            curve_path,
            logs.iter()
                .map(|l| format!("{} {:.16e} {:.16e}", l.epoch, l.train_loss, l.val_metric)),
        )?;
    }
    save_checkpoint(out, &model, opt.steps_taken(), None)?;

    let final_metric = logs.last().map(|l| l.val_metric).unwrap_or(f64::NAN);
    println!(
        "finetune epochs {} final_{} {:.16e} out {} log {}",
        logs.len(),
        metric_name,
        final_metric,
        out.display(),
        log_path.display()
    );
    Ok(())
}

fn cmd_eval(ckpt_path: &Path, data_path: &Path, protocol: &str) -> Result<(), CliError> {
    let protocol: Protocol = protocol.parse().map_err(CliError::Usage)?;
    let ckpt = load_checkpoint(ckpt_path)?;
    let model = restore_model(&ckpt)?;
    let pairs = read_dataset(data_path)?;
    check_geometry(&model.config, &pairs)?;
    let report = evaluate(&model, &pairs, protocol)?;
    println!("{report}");
    Ok(())
}

fn cmd_infer(ckpt_path: &Path, input_path: &Path, output_path: &Path) -> Result<(), CliError> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let model = restore_model(&ckpt)?;
    let pairs = read_dataset(input_path)?;
    check_geometry(&model.config, &pairs)?;

    let mut predictions = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let batch = batch_inputs(&[pair]);
        let pass = model.forward(&batch, ForwardMode::Pose, RunMode::Eval)?;
        let pred = pass
            .tape
            .value(pass.output)
            .index_axis(Axis(0), 0)
            .to_owned();
        let target = PoseSequence::new(
            PoseKind::Target3d,
            pred,
            pair.0.action_label,
            &format!("prediction {i}"),
        )?;
        predictions.push((pair.0.clone(), target));
    }
    write_dataset(output_path, &predictions)?;
    println!(
        "infer sequences {} out {}",
        predictions.len(),
        output_path.display()
    );
    Ok(())
}

fn cmd_gradcheck(seed: u64, rounds: usize) -> Result<(), CliError> {
    if rounds == 0 {
        return Err(CliError::Usage("--rounds must be >= 1".into()));
    }
    let report = run_gradcheck(seed, rounds, DEFAULT_TOLERANCE)?;
    println!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed)
    }
}
