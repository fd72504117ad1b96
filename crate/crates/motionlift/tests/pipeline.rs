//! End-to-end checks of the compiled binary. Every subcommand is driven
//! through `std::process::Command` exactly as a user would run it, and the
//! tests pin down stdout/stderr formats, the files each command writes,
//! run-to-run determinism, the seed environment override, and the exit-code
//! contract for the documented failure classes.

use std::fs;
use std::path::Path;
use std::process::Command;

use motionlift::checkpoint::{load_checkpoint, restore_model};
use motionlift::cli::{exit_code, SEED_ENV};
use motionlift::data::read_dataset;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_motionlift");

// ---------------------------------------------------------------------------
// Harness
// ---------------------------------------------------------------------------

/// Captured result of one binary invocation.
struct Finished {
    args: Vec<String>,
    code: i32,
    stdout: String,
    stderr: String,
}

impl Finished {
    fn expect_code(self, expected: i32) -> Self {
        assert_eq!(
            self.code, expected,
            "`motionlift {}` exited {} (expected {})\n--- stdout ---\n{}--- stderr ---\n{}",
            self.args.join(" "),
            self.code,
            expected,
            self.stdout,
            self.stderr
        );
        self
    }

    fn expect_success(self) -> Self {
        self.expect_code(exit_code::SUCCESS)
    }

    fn stdout_lines(&self) -> Vec<&str> {
        self.stdout.lines().collect()
    }

    /// The first stdout line starting with `prefix`; panics with the full
    /// output when no line matches.
    fn line_starting(&self, prefix: &str) -> &str {
        self.stdout
            .lines()
            .find(|l| l.starts_with(prefix))
            .unwrap_or_else(|| {
                panic!(
                    "no stdout line starts with {prefix:?}\n--- stdout ---\n{}",
                    self.stdout
                )
            })
    }

    /// Asserts stderr is exactly one line of the documented failure format
    /// and returns it.
    fn failure_line(&self, category: &str, exit: i32) -> &str {
        let lines: Vec<&str> = self.stderr.lines().collect();
        assert_eq!(
            lines.len(),
            1,
            "expected a single stderr line, got:\n{}",
            self.stderr
        );
        let line = lines[0];
        let prefix = format!("error category={category} exit={exit} message=");
        assert!(
            line.starts_with(&prefix),
            "stderr line {line:?} does not start with {prefix:?}"
        );
        assert!(
            line.len() > prefix.len(),
            "failure line carries no message: {line:?}"
        );
        line
    }
}

/// Runs the binary with extra environment variables; the seed override is
/// always scrubbed first so an ambient value cannot skew determinism checks.
fn run_env(args: &[&str], envs: &[(&str, &str)]) -> Finished {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove(SEED_ENV);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("binary spawns");
    Finished {
        args: args.iter().map(|s| s.to_string()).collect(),
        code: out.status.code().expect("binary exits with a code"),
        stdout: String::from_utf8(out.stdout).expect("stdout is utf-8"),
        stderr: String::from_utf8(out.stderr).expect("stderr is utf-8"),
    }
}

fn run(args: &[&str]) -> Finished {
    run_env(args, &[])
}

fn path_str(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).display().to_string()
}

/// Writes a dataset of `sequences` chain-skeleton clips (8 frames, 5 joints)
/// and returns its path.
fn gen_data(dir: &TempDir, name: &str, sequences: usize, noise_std: f64, seed: u64) -> String {
    let out = path_str(dir, name);
    run(&[
        "gen-data",
        "--out",
        &out,
        "--sequences",
        &sequences.to_string(),
        "--frames",
        "8",
        "--joints",
        "5",
        "--noise-std",
        &noise_std.to_string(),
        "--seed",
        &seed.to_string(),
    ])
    .expect_success();
    out
}

/// Writes a run configuration for the 8-frame, 5-joint micro network and
/// returns its path. Only the seeds vary between tests; everything else is
/// small enough that each phase finishes in well under a second.
fn write_config(
    dir: &TempDir,
    name: &str,
    steps: usize,
    epochs: usize,
    pre_seed: u64,
    ft_seed: u64,
) -> String {
    let text = format!(
        r#"{{
  "network": {{"layers": 2, "dim": 8, "heads": 2, "mlp_ratio": 2, "frames": 8, "joints": 5}},
  "pretrain": {{"mask_prob": 0.6, "replicas": 2, "target_layers": 2, "steps": {steps},
                "batch_size": 2, "lr": 1e-3, "seed": {pre_seed}}},
  "finetune": {{"epochs": {epochs}, "batch_size": 2, "lr": 1e-3, "seed": {ft_seed}}}
}}
"#
    );
    let path = dir.path().join(name);
    fs::write(&path, text).expect("config written");
    path.display().to_string()
}

fn read_bytes(path: &str) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("reading {path}: {e}"))
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[test]
fn gen_data_is_deterministic_and_noise_free_at_zero_std() {
    let dir = TempDir::new().unwrap();

    let a = path_str(&dir, "a.jsonl");
    let finished = run(&[
        "gen-data", "--out", &a, "--sequences", "3", "--frames", "8", "--joints", "5",
        "--noise-std", "0.0", "--seed", "7",
    ])
    .expect_success();
    let line = finished.line_starting("gen-data ");
    assert!(
        line.contains("sequences 3") && line.contains("frames 8") && line.contains("joints 5"),
        "summary line missing fields: {line}"
    );

    // Same seed, same bytes; different seed, different bytes.
    let b = path_str(&dir, "b.jsonl");
    run(&[
        "gen-data", "--out", &b, "--sequences", "3", "--frames", "8", "--joints", "5",
        "--noise-std", "0.0", "--seed", "7",
    ])
    .expect_success();
    assert_eq!(read_bytes(&a), read_bytes(&b), "repeat run changed the file");

    let c = path_str(&dir, "c.jsonl");
    run(&[
        "gen-data", "--out", &c, "--sequences", "3", "--frames", "8", "--joints", "5",
        "--noise-std", "0.0", "--seed", "8",
    ])
    .expect_success();
    assert_ne!(read_bytes(&a), read_bytes(&c), "seed had no effect");

    // The file is a dataset this crate can read back, and without noise the
    // confidence channel saturates at 1.
    let pairs = read_dataset(Path::new(&a)).expect("generated file parses");
    assert_eq!(pairs.len(), 3);
    for (input, target) in &pairs {
        assert_eq!((input.frames, input.joints), (8, 5));
        assert_eq!((target.frames, target.joints), (8, 5));
        for t in 0..input.frames {
            for j in 0..input.joints {
                assert_eq!(input.data[[t, j, 2]], 1.0, "confidence with zero noise");
            }
        }
    }
}

// ---------------------------------------------------------------------------
// pretrain -> finetune -> eval -> infer
// ---------------------------------------------------------------------------

#[test]
fn pipeline_chains_pretrain_finetune_eval_and_infer() {
    let dir = TempDir::new().unwrap();
    let data = gen_data(&dir, "data.jsonl", 6, 0.01, 11);
    let config = write_config(&dir, "run.json", 5, 2, 21, 22);

    // Pretrain: one loss line per step, a summary line, a curve file that
    // mirrors stdout, and a checkpoint this crate can restore.
    let pre_ckpt = path_str(&dir, "pre.ckpt");
    let pre_curve = path_str(&dir, "pre.curve");
    let pre = run(&[
        "pretrain", "--config", &config, "--data", &data, "--out", &pre_ckpt,
        "--curve", &pre_curve,
    ])
    .expect_success();

    let mut step_losses = Vec::new();
    for (i, line) in pre
        .stdout_lines()
        .iter()
        .filter(|l| l.starts_with("pretrain step "))
        .enumerate()
    {
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields[2], (i + 1).to_string(), "steps are 1-based: {line}");
        assert_eq!(fields[3], "loss", "unexpected step line: {line}");
        let loss: f64 = fields[4].parse().expect("loss parses");
        assert!(loss.is_finite() && loss >= 0.0, "bad loss in {line}");
        step_losses.push(loss);
    }
    assert_eq!(step_losses.len(), 5, "one loss line per step");

    let summary = pre.line_starting("pretrain steps ");
    assert!(
        summary.contains("steps 5") && summary.contains("teacher_forwards 5"),
        "one teacher pass per step: {summary}"
    );

    let curve = fs::read_to_string(&pre_curve).expect("curve file written");
    let curve_lines: Vec<&str> = curve.lines().collect();
    assert_eq!(curve_lines.len(), 5);
    for (i, line) in curve_lines.iter().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields.len(), 2, "curve rows are `step loss`: {line}");
        assert_eq!(fields[0], (i + 1).to_string());
        let loss: f64 = fields[1].parse().expect("curve loss parses");
        assert_eq!(loss, step_losses[i], "curve disagrees with stdout");
    }

    let ckpt = load_checkpoint(Path::new(&pre_ckpt)).expect("checkpoint loads");
    let model = restore_model(&ckpt).expect("checkpoint restores");
    assert_eq!(model.config.layers, 2);
    assert_eq!((model.config.frames, model.config.joints), (8, 5));

    // Finetune from the pretrained backbone.
    let ft_ckpt = path_str(&dir, "ft.ckpt");
    let ft_curve = path_str(&dir, "ft.curve");
    let ft = run(&[
        "finetune", "--config", &config, "--data", &data, "--init", &pre_ckpt,
        "--out", &ft_ckpt, "--curve", &ft_curve,
    ])
    .expect_success();

    let init = ft.line_starting("finetune init ");
    let copied: usize = init
        .rsplit(' ')
        .next()
        .and_then(|n| n.parse().ok())
        .unwrap_or_else(|| panic!("no tensor count in {init:?}"));
    assert!(copied > 0, "init copied no backbone tensors: {init}");
    assert!(init.contains(&pre_ckpt), "init line names the checkpoint");

    let epoch_lines: Vec<&str> = ft
        .stdout_lines()
        .iter()
        .copied()
        .filter(|l| l.starts_with("finetune epoch "))
        .collect();
    assert_eq!(epoch_lines.len(), 2, "one line per epoch");
    for line in &epoch_lines {
        for field in ["train_loss", "val_mpjpe", "wall_seconds"] {
            assert!(line.contains(field), "epoch line missing {field}: {line}");
        }
    }
    let done = ft.line_starting("finetune epochs ");
    assert!(done.contains("epochs 2") && done.contains("final_val_mpjpe"));

    // The metric log sits next to the checkpoint and repeats the epoch rows
    // without wall-clock time.
    let log_path = format!("{ft_ckpt}.log");
    let log = fs::read_to_string(&log_path).expect("metric log written");
    let log_lines: Vec<&str> = log.lines().collect();
    assert_eq!(log_lines.len(), 2);
    for (i, line) in log_lines.iter().enumerate() {
        assert!(line.starts_with(&format!("epoch {i} train_loss ")), "{line}");
        assert!(line.contains("val_mpjpe"), "{line}");
        assert!(!line.contains("wall_seconds"), "log must be time-free: {line}");
    }
    let ft_curve_text = fs::read_to_string(&ft_curve).expect("curve written");
    for line in ft_curve_text.lines() {
        assert_eq!(line.split_whitespace().count(), 3, "curve rows: {line}");
    }

    // Evaluate under two protocols.
    let eval = run(&["eval", "--ckpt", &ft_ckpt, "--data", &data, "--protocol", "p1"])
        .expect_success();
    assert_eq!(eval.line_starting("protocol "), "protocol p1");
    let overall = eval.line_starting("overall mpjpe ");
    let value: f64 = overall
        .split_whitespace()
        .nth(2)
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("no value in {overall:?}"));
    assert!(value.is_finite() && value >= 0.0);
    assert_eq!(eval.line_starting("sequences "), "sequences 6");

    let eval_p2 = run(&["eval", "--ckpt", &ft_ckpt, "--data", &data, "--protocol", "p2"])
        .expect_success();
    eval_p2.line_starting("overall pmpjpe ");

    // Inference writes a dataset whose targets are the predictions.
    let preds = path_str(&dir, "preds.jsonl");
    let infer = run(&["infer", "--ckpt", &ft_ckpt, "--input", &data, "--output", &preds])
        .expect_success();
    assert!(infer.line_starting("infer ").contains("sequences 6"));
    let predicted = read_dataset(Path::new(&preds)).expect("predictions parse");
    assert_eq!(predicted.len(), 6);
    for (input, target) in &predicted {
        assert_eq!((input.frames, input.joints), (8, 5));
        assert_eq!(target.data.shape(), &[8, 5, 3]);
    }
}

// ---------------------------------------------------------------------------
// Determinism and the seed override
// ---------------------------------------------------------------------------

#[test]
fn repeated_runs_are_byte_identical_and_env_seed_overrides_config() {
    let dir = TempDir::new().unwrap();
    let data = gen_data(&dir, "data.jsonl", 4, 0.01, 31);
    // Two configs identical except for their seeds.
    let config_a = write_config(&dir, "a.json", 4, 2, 41, 42);
    let config_b = write_config(&dir, "b.json", 4, 2, 77, 78);

    let pretrain = |config: &str, out: &str, curve: &str, envs: &[(&str, &str)]| {
        run_env(
            &["pretrain", "--config", config, "--data", &data, "--out", out, "--curve", curve],
            envs,
        )
        .expect_success();
    };

    // Same config twice: checkpoints and curves match byte for byte.
    let (p1, c1) = (path_str(&dir, "p1.ckpt"), path_str(&dir, "p1.curve"));
    let (p2, c2) = (path_str(&dir, "p2.ckpt"), path_str(&dir, "p2.curve"));
    pretrain(&config_a, &p1, &c1, &[]);
    pretrain(&config_a, &p2, &c2, &[]);
    assert_eq!(read_bytes(&p1), read_bytes(&p2), "pretrain is not deterministic");
    assert_eq!(read_bytes(&c1), read_bytes(&c2), "loss curve is not deterministic");

    // A different config seed changes the result...
    let (p3, c3) = (path_str(&dir, "p3.ckpt"), path_str(&dir, "p3.curve"));
    pretrain(&config_b, &p3, &c3, &[]);
    assert_ne!(read_bytes(&p1), read_bytes(&p3), "pretrain seed had no effect");

    // ...and the environment override replaces it: config B run under
    // config A's seed reproduces config A's checkpoint exactly.
    let (p4, c4) = (path_str(&dir, "p4.ckpt"), path_str(&dir, "p4.curve"));
    pretrain(&config_b, &p4, &c4, &[(SEED_ENV, "41")]);
    assert_eq!(read_bytes(&p1), read_bytes(&p4), "env seed did not override pretrain");
    assert_eq!(read_bytes(&c1), read_bytes(&c4));

    // The override reaches the finetune phase too: config B under config A's
    // finetune seed writes config A's metric log and checkpoint.
    let finetune = |config: &str, out: &str, envs: &[(&str, &str)]| {
        run_env(
            &["finetune", "--config", config, "--data", &data, "--out", out],
            envs,
        )
        .expect_success();
    };
    let f1 = path_str(&dir, "f1.ckpt");
    let f2 = path_str(&dir, "f2.ckpt");
    finetune(&config_a, &f1, &[]);
    finetune(&config_b, &f2, &[(SEED_ENV, "42")]);
    assert_eq!(
        read_bytes(&format!("{f1}.log")),
        read_bytes(&format!("{f2}.log")),
        "env seed did not override finetune"
    );
    assert_eq!(read_bytes(&f1), read_bytes(&f2));
}

// ---------------------------------------------------------------------------
// Failure classes
// ---------------------------------------------------------------------------

#[test]
fn failures_exit_with_stable_codes_and_one_line_reports() {
    let dir = TempDir::new().unwrap();
    let data = gen_data(&dir, "data.jsonl", 2, 0.01, 51);
    let config = write_config(&dir, "run.json", 2, 1, 61, 62);

    // Unknown configuration key: rejected by name before any compute.
    let bad_config = dir.path().join("bad.json");
    fs::write(
        &bad_config,
        r#"{"network": {"layers": 2, "dim": 8, "heads": 2, "mlp_ratio": 2,
            "frames": 8, "joints": 5},
           "pretrain": {"target_layers": 2, "masck_prob": 0.6}}"#,
    )
    .unwrap();
    let out = path_str(&dir, "x.ckpt");
    let bad_config = bad_config.display().to_string();
    let r = run(&["pretrain", "--config", &bad_config, "--data", &data, "--out", &out])
        .expect_code(exit_code::CONFIG);
    let line = r.failure_line("config", exit_code::CONFIG);
    assert!(line.contains("masck_prob"), "message names the bad key: {line}");

    // Missing data file.
    let missing = path_str(&dir, "missing.jsonl");
    let r = run(&["pretrain", "--config", &config, "--data", &missing, "--out", &out])
        .expect_code(exit_code::DATA);
    r.failure_line("data", exit_code::DATA);

    // Data whose geometry disagrees with the configured architecture.
    let wide = gen_data(&dir, "wide.jsonl", 2, 0.01, 52);
    let mismatched = write_config(&dir, "mismatch.json", 2, 1, 61, 62);
    let text = fs::read_to_string(&mismatched)
        .unwrap()
        .replace("\"frames\": 8", "\"frames\": 16");
    fs::write(&mismatched, text).unwrap();
    let r = run(&["pretrain", "--config", &mismatched, "--data", &wide, "--out", &out])
        .expect_code(exit_code::CONFIG);
    let line = r.failure_line("config", exit_code::CONFIG);
    assert!(line.contains("expects"), "geometry message: {line}");

    // Evaluating a checkpoint that does not exist.
    let no_ckpt = path_str(&dir, "none.ckpt");
    let r = run(&["eval", "--ckpt", &no_ckpt, "--data", &data, "--protocol", "p1"])
        .expect_code(exit_code::DATA);
    r.failure_line("data", exit_code::DATA);

    // A corrupted checkpoint is a checkpoint error, not a data error.
    let garbage = path_str(&dir, "garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let r = run(&["eval", "--ckpt", &garbage, "--data", &data, "--protocol", "p1"])
        .expect_code(exit_code::CONFIG);
    r.failure_line("checkpoint", exit_code::CONFIG);

    // Degenerate command-line values.
    let empty = path_str(&dir, "empty.jsonl");
    let r = run(&["gen-data", "--out", &empty, "--sequences", "0"]).expect_code(exit_code::CONFIG);
    r.failure_line("config", exit_code::CONFIG);
    let r = run(&["gradcheck", "--rounds", "0"]).expect_code(exit_code::CONFIG);
    r.failure_line("config", exit_code::CONFIG);

    // Flags the grammar does not know go through the same failure line.
    let r = run(&["pretrain", "--nonsense"]).expect_code(exit_code::CONFIG);
    let lines: Vec<&str> = r.stderr.lines().collect();
    assert_eq!(lines.len(), 1, "clap errors are flattened to one line:\n{}", r.stderr);
    assert!(
        lines[0].starts_with(&format!("error category=config exit={} message=", exit_code::CONFIG)),
        "unexpected parse failure line: {}",
        lines[0]
    );
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[test]
fn gradcheck_command_prints_block_table() {
    let r = run(&["gradcheck", "--seed", "3", "--rounds", "1"]).expect_success();
    let lines = r.stdout_lines();
    let blocks: Vec<&&str> = lines.iter().filter(|l| l.starts_with("gradcheck block ")).collect();
    assert!(blocks.len() >= 11, "expected a row per block, got {}", blocks.len());
    for line in &blocks {
        assert!(line.ends_with(" ok"), "block failed under default tolerance: {line}");
        assert!(line.contains("max_rel_err"), "{line}");
    }
    let overall = r.line_starting("gradcheck overall ");
    assert!(overall.contains("rounds 1") && overall.ends_with(" ok"), "{overall}");
}
