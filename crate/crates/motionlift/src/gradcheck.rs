//! Central finite-difference verification of every analytic gradient path.
//!
//! The suite builds a micro-scale model, runs the three real training
//! objectives on random fixtures — the pose objective (position + velocity
//! + scale-normalized terms), the masked-feature objective, and the action
//! objective — and compares analytic parameter gradients against central
//! differences at sampled coordinates. Parameters are grouped into blocks
//! (embedding, attention, graph mixing, fusion, normalization, heads) so a
//! failure names the part of the network whose backward pass is wrong.
//! Each loss is additionally differentiated with respect to its prediction
//! input, so the loss implementations are checked in isolation as well.
//!
//! Relative error uses a guarded denominator,
//! `|a − fd| / max(|a|, |fd|, 1e-3)`, which keeps near-zero gradients from
//! inflating the ratio with finite-difference roundoff noise.
//!
//! A probe whose interval straddles a ReLU kink retries with smaller steps
//! (see [`FD_FALLBACK_DIVISORS`]): central differences are simply not a
//! derivative estimate across a kink, while a real backward-pass defect
//! disagrees at every step size and still fails.

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::TrainError;
use crate::finetune::{loss_action, loss_finetune, loss_mpjpe, loss_nmpjpe, loss_velocity, NmpjpeForm};
use crate::graph::{Tape, Tensor, Var};
use crate::network::{ForwardMode, Model, NetworkConfig, RunMode};
use crate::pretrain::{
    make_mask_plan, mask_geometry, pretrain_loss, replicate_for_multimask, LossSupport, MaskPlan,
    PretrainConfig,
};
use crate::rng::{derive_seed, stream, stream_rng};

/// Central-difference step.
pub const FD_EPSILON: f64 = 1e-5;

/// Largest acceptable guarded relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Random restarts the command-line suite runs by default.
pub const DEFAULT_ROUNDS: usize = 10;

/// Coordinates sampled per block per round.
const CHECKS_PER_BLOCK: usize = 12;

/// Parameter blocks and loss cases, in report order.
const BLOCK_NAMES: [&str; 11] = [
    "embedding",
    "attention",
    "gcn",
    "fusion",
    "norm",
    "heads",
    "loss_mpjpe",
    "loss_nmpjpe",
    "loss_velocity",
    "loss_action",
    "loss_pretrain",
];

/// Worst guarded relative error seen for one block, over all rounds.
#[derive(Debug, Clone)]
pub struct BlockReport {
    pub name: &'static str,
    pub checks: usize,
    pub max_rel_err: f64,
}

/// Outcome of the whole suite.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub rounds: usize,
    pub blocks: Vec<BlockReport>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    /// True when every block was exercised and stayed under tolerance.
    pub fn passed(&self) -> bool {
        !self.blocks.is_empty()
            && self
                .blocks
                .iter()
                .all(|b| b.checks > 0 && b.max_rel_err < self.tolerance)
    }

    /// One line per block plus a summary line, in fixed field order.
    pub fn render(&self) -> String {
        let mut lines = Vec::with_capacity(self.blocks.len() + 1);
        for b in &self.blocks {
            let status = if b.checks > 0 && b.max_rel_err < self.tolerance {
                "ok"
            } else {
                "FAIL"
            };
            lines.push(format!(
                "gradcheck block {} checks {} max_rel_err {:.3e} {}",
                b.name, b.checks, b.max_rel_err, status
            ));
        }
        lines.push(format!(
            "gradcheck overall rounds {} max_rel_err {:.3e} tolerance {:.1e} {}",
            self.rounds,
            self.max_rel_err(),
            self.tolerance,
            if self.passed() { "ok" } else { "FAIL" }
        ));
        lines.join("\n")
    }
}

/// Guarded relative error between an analytic and a finite-difference value.
fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-3)
}

fn micro_config() -> NetworkConfig {
    NetworkConfig {
        layers: 2,
        dim: 4,
        heads: 2,
        mlp_ratio: 2,
        frames: 3,
        joints: 4,
        action_classes: Some(3),
    }
}

/// Which parameter block a tensor belongs to. Matching order matters:
/// normalization tensors live inside the attention and graph sub-blocks.
fn block_of(name: &str) -> &'static str {
    if name.starts_with("embed.") || name == "spatial_pos" {
        return "embedding";
    }
    if name.starts_with("head.") {
        return "heads";
    }
    if name.contains(".ln1.") || name.contains(".ln2.") || name.contains(".bn.") {
        return "norm";
    }
    if name.contains(".fuse.") {
        return "fusion";
    }
    if name.contains(".tr.") {
        return "attention";
    }
    if name.contains(".gcn.") {
        return "gcn";
    }
    "other"
}

/// The three objectives the parameter-side checks differentiate through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Objective {
    Pose,
    Masked,
    Action,
}

/// Which objective verifies a parameter: heads under the objective that
/// reaches them, everything else under the pose objective (the masked
/// objective re-checks the embedding, whose output the mask multiplies).
fn objectives_for(name: &str) -> &'static [Objective] {
    if name.starts_with("head.pretrain.") {
        return &[Objective::Masked];
    }
    if name.starts_with("head.action.") {
        return &[Objective::Action];
    }
    if name.starts_with("embed.") || name == "spatial_pos" {
        return &[Objective::Pose, Objective::Masked];
    }
    &[Objective::Pose]
}

/// Random fixtures one round linearizes around.
struct Fixtures {
    input: Tensor,
    pose_target: Tensor,
    labels: Vec<usize>,
    masked_target: Tensor,
    plan: MaskPlan,
    replicas: usize,
    support: LossSupport,
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_shape_fn(IxDyn(shape), |_| rng.sample::<f64, _>(StandardNormal))
}

fn make_fixtures(model: &Model, round_seed: u64) -> Result<Fixtures, TrainError> {
    let mut rng = stream_rng(round_seed, stream::GRADCHECK);
    let cfg = &model.config;
    let (t, j, d) = (cfg.frames, cfg.joints, cfg.dim);
    let classes = cfg.action_classes.expect("micro config has a class head");

    let input = random_tensor(&[1, t, j, 3], &mut rng);
    let pose_target = random_tensor(&[1, t, j, 3], &mut rng);
    let labels = vec![rng.gen_range(0..classes)];
    let masked_target = random_tensor(&[1, t, j, d], &mut rng);

    let pcfg = PretrainConfig {
        mask_prob: 0.5,
        replicas: 2,
        ..PretrainConfig::default()
    };
    let (length, slot_width) = mask_geometry(model, pcfg.mask_axis);
    let plan = make_mask_plan(1, length, slot_width, &pcfg, derive_seed(round_seed, 1))?;
    Ok(Fixtures {
        input,
        pose_target,
        labels,
        masked_target,
        plan,
        replicas: pcfg.replicas,
        support: pcfg.loss_support,
    })
}

/// Builds one objective's tape end to end and returns it with the bound
/// parameter vars (in parameter order) and the scalar loss var.
fn objective_pass(
    model: &Model,
    objective: Objective,
    fx: &Fixtures,
) -> Result<(Tape, Vec<Var>, Var), TrainError> {
    match objective {
        Objective::Pose => {
            let mut pass = model.forward(&fx.input, ForwardMode::Pose, RunMode::Train)?;
            let gt = pass.tape.constant(fx.pose_target.clone());
            let loss = loss_finetune(
                &mut pass.tape,
                pass.output,
                gt,
                0.5,
                20.0,
                NmpjpeForm::Standard,
            )?;
            Ok((pass.tape, pass.vars, loss))
        }
        Objective::Action => {
            let mut pass = model.forward(&fx.input, ForwardMode::Action, RunMode::Train)?;
            let loss = loss_action(&mut pass.tape, pass.output, &fx.labels)?;
            Ok((pass.tape, pass.vars, loss))
        }
        Objective::Masked => {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, RunMode::Train);
            let x = tape.constant(replicate_for_multimask(&fx.input, fx.replicas));
            let f0 = model.embed_input(&mut tape, &vars, x);
            let (keep, fill) = fx.plan.materialize(tape.shape(f0))?;
            let kept = tape.mul_const(f0, keep);
            let masked = tape.add_const(kept, fill);
            let (acts, _bn) = model.backbone(&mut tape, &vars, masked, RunMode::Train)?;
            let last = *acts.fused.last().expect("at least one layer");
            let out = model.pretrain_head(&mut tape, &vars, last);
            let loss = pretrain_loss(&mut tape, out, &fx.masked_target, &fx.plan, fx.support)?;
            Ok((tape, vars, loss))
        }
    }
}

fn objective_value(model: &Model, objective: Objective, fx: &Fixtures) -> Result<f64, TrainError> {
    let (tape, _, loss) = objective_pass(model, objective, fx)?;
    Ok(tape.value(loss)[[0]])
}

/// Central difference of one objective with respect to one parameter
/// coordinate; the model is restored before returning.
fn fd_param(
    model: &mut Model,
    objective: Objective,
    fx: &Fixtures,
    param_idx: usize,
    flat: usize,
    eps: f64,
) -> Result<f64, TrainError> {
    let original = model.params.value(param_idx).clone();
    let mut nudged = original.clone();
    let slice = nudged.as_slice_mut().expect("parameters are contiguous");
    slice[flat] += eps;
    model.params.set_value(param_idx, nudged.clone());
    let plus = objective_value(model, objective, fx)?;
    let slice = nudged.as_slice_mut().expect("parameters are contiguous");
    slice[flat] -= 2.0 * eps;
    model.params.set_value(param_idx, nudged);
    let minus = objective_value(model, objective, fx)?;
    model.params.set_value(param_idx, original);
    Ok((plus - minus) / (2.0 * eps))
}

/// Step sizes a disagreeing probe falls back to. The graph stream ends in a
/// ReLU, so a probe interval that happens to straddle one of its kinks makes
/// the central difference itself wrong — the estimate averages two linear
/// pieces. Shrinking the step moves the interval off the kink and the
/// disagreement vanishes; a genuinely wrong analytic gradient disagrees at
/// every step size, so the fallback cannot hide real defects.
const FD_FALLBACK_DIVISORS: [f64; 2] = [8.0, 64.0];

/// A loss differentiated with respect to its prediction input.
struct LossCase {
    name: &'static str,
    point: Tensor,
    build: Box<dyn Fn(&mut Tape, Var) -> Result<Var, TrainError>>,
}

fn loss_cases(model: &Model, fx: &Fixtures, round_seed: u64) -> Vec<LossCase> {
    let mut rng = stream_rng(round_seed, stream::GRADCHECK + 100);
    let cfg = &model.config;
    let (t, j, d) = (cfg.frames, cfg.joints, cfg.dim);
    let classes = cfg.action_classes.expect("micro config has a class head");

    let pose_point = random_tensor(&[2, t, j, 3], &mut rng);
    let pose_gt = random_tensor(&[2, t, j, 3], &mut rng);
    let logits_point = random_tensor(&[3, classes], &mut rng);
    let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..classes)).collect();
    let masked_point = random_tensor(&[fx.replicas, t, j, d], &mut rng);

    let gt1 = pose_gt.clone();
    let gt2 = pose_gt.clone();
    let gt3 = pose_gt;
    let masked_target = fx.masked_target.clone();
    let plan = fx.plan.clone();
    let support = fx.support;

    vec![
        LossCase {
            name: "loss_mpjpe",
            point: pose_point.clone(),
            build: Box::new(move |t, pred| {
                let gt = t.constant(gt1.clone());
                loss_mpjpe(t, pred, gt)
            }),
        },
        LossCase {
            name: "loss_nmpjpe",
            point: pose_point.clone(),
            build: Box::new(move |t, pred| {
                let gt = t.constant(gt2.clone());
                loss_nmpjpe(t, pred, gt, NmpjpeForm::Standard)
            }),
        },
        LossCase {
            name: "loss_velocity",
            point: pose_point,
            build: Box::new(move |t, pred| {
                let gt = t.constant(gt3.clone());
                loss_velocity(t, pred, gt)
            }),
        },
        LossCase {
            name: "loss_action",
            point: logits_point,
            build: Box::new(move |t, logits| loss_action(t, logits, &labels)),
        },
        LossCase {
            name: "loss_pretrain",
            point: masked_point,
            build: Box::new(move |t, out| pretrain_loss(t, out, &masked_target, &plan, support)),
        },
    ]
}

fn eval_loss_case(case: &LossCase, point: &Tensor) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let v = tape.param(point.clone());
    let loss = (case.build)(&mut tape, v)?;
    Ok(tape.value(loss)[[0]])
}

/// Accumulates worst errors per block name.
struct Accumulator {
    rows: Vec<BlockReport>,
}

impl Accumulator {
    fn new() -> Self {
        Accumulator {
            rows: BLOCK_NAMES
                .iter()
                .map(|&name| BlockReport {
                    name,
                    checks: 0,
                    max_rel_err: 0.0,
                })
                .collect(),
        }
    }

    fn record(&mut self, block: &'static str, err: f64) {
        let row = self
            .rows
            .iter_mut()
            .find(|r| r.name == block)
            .expect("every check maps to a known block");
        row.checks += 1;
        row.max_rel_err = row.max_rel_err.max(err);
    }
}

/// Runs the whole suite: `rounds` independent random restarts, each with a
/// fresh micro model and fresh fixtures. Deterministic in `seed`.
pub fn run_gradcheck(seed: u64, rounds: usize, tolerance: f64) -> Result<GradcheckReport, TrainError> {
    let config = micro_config();
    let topology = crate::data::chain_topology(config.joints);
    let mut acc = Accumulator::new();

    for round in 0..rounds {
        let round_seed = derive_seed(seed, round as u64);
        let mut model = Model::new(config.clone(), &topology, round_seed)
            .map_err(TrainError::Network)?;
        let fx = make_fixtures(&model, round_seed)?;
        let mut coord_rng = stream_rng(round_seed, stream::GRADCHECK + 200);

        // Parameter-side checks, one analytic pass per objective.
        for objective in [Objective::Pose, Objective::Masked, Objective::Action] {
            let (tape, vars, loss) = objective_pass(&model, objective, &fx)?;
            let grads = tape.backward(loss);

            // Indices of trainable tensors this objective is responsible for.
            let targets: Vec<usize> = (0..model.params.len())
                .filter(|&i| {
                    let entry = model.params.entry(i);
                    entry.trainable && objectives_for(&entry.name).contains(&objective)
                })
                .collect();

            // Spread a fixed sampling budget over each block in the set.
            let mut per_block: Vec<(&'static str, Vec<usize>)> = Vec::new();
            for &i in &targets {
                let block = block_of(&model.params.entry(i).name);
                match per_block.iter_mut().find(|(b, _)| *b == block) {
                    Some((_, list)) => list.push(i),
                    None => per_block.push((block, vec![i])),
                }
            }
            for (block, indices) in per_block {
                for _ in 0..CHECKS_PER_BLOCK {
                    let idx = indices[coord_rng.gen_range(0..indices.len())];
                    let len = model.params.value(idx).len();
                    let flat = coord_rng.gen_range(0..len);
                    let analytic = grads
                        .get(vars[idx])
                        .map_or(0.0, |g| g.as_slice().expect("contiguous")[flat]);
                    let fd = fd_param(&mut model, objective, &fx, idx, flat, FD_EPSILON)?;
                    let mut err = rel_err(analytic, fd);
                    for divisor in FD_FALLBACK_DIVISORS {
                        if err < tolerance {
                            break;
                        }
                        let fd = fd_param(&mut model, objective, &fx, idx, flat, FD_EPSILON / divisor)?;
                        err = rel_err(analytic, fd);
                    }
                    acc.record(block, err);
                }
            }
            drop(tape);
        }

        // Loss-side checks, differentiating each loss by its prediction.
        for case in loss_cases(&model, &fx, round_seed) {
            let mut tape = Tape::new();
            let v = tape.param(case.point.clone());
            let loss = (case.build)(&mut tape, v)?;
            let grads = tape.backward(loss);
            let g = grads.get_or_zeros(v, case.point.shape());
            let g = g.as_slice().expect("contiguous");
            for _ in 0..CHECKS_PER_BLOCK {
                let flat = coord_rng.gen_range(0..case.point.len());
                let fd_at = |eps: f64| -> Result<f64, TrainError> {
                    let mut nudged = case.point.clone();
                    let slice = nudged.as_slice_mut().expect("contiguous");
                    slice[flat] += eps;
                    let plus = eval_loss_case(&case, &nudged)?;
                    let slice = nudged.as_slice_mut().expect("contiguous");
                    slice[flat] -= 2.0 * eps;
                    let minus = eval_loss_case(&case, &nudged)?;
                    Ok((plus - minus) / (2.0 * eps))
                };
                let mut err = rel_err(g[flat], fd_at(FD_EPSILON)?);
                for divisor in FD_FALLBACK_DIVISORS {
                    if err < tolerance {
                        break;
                    }
                    err = rel_err(g[flat], fd_at(FD_EPSILON / divisor)?);
                }
                acc.record(case.name, err);
            }
        }
    }

    Ok(GradcheckReport {
        tolerance,
        rounds,
        blocks: acc.rows,
    })
}
