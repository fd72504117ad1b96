//! Self-distilled pre-training: exact-count random masking with Gaussian
//! fill, multi-mask replication of the student input, an EMA teacher, the
//! Top-K layer-normalized regression target, the masked regression loss, and
//! the step/loop drivers.
//!
//! The teacher sees each sample once per step, unmasked and in eval mode; the
//! student sees M independently masked replicas in train mode and regresses
//! the teacher's target at (by default) the masked positions only.

use ndarray::{concatenate, Array2, Axis, IxDyn};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::PoseSequence;
use crate::error::TrainError;
use crate::graph::{Tape, Tensor, Var, NORM_EPS};
use crate::network::{Activations, Model, RunMode};
use crate::optim::{AdamW, OptimConfig};
use crate::params::ParamSet;
use crate::rng::{derive_seed, stream};

/// What one mask slot covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskAxis {
    /// A slot is a whole frame: all J·d entries of one time step (L = T).
    Frames,
    /// A slot is one joint token: d entries (L = T·J).
    Tokens,
}

/// Which positions the regression loss covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossSupport {
    /// Only positions the mask replaced (the default).
    Masked,
    /// Every position.
    All,
}

/// Pre-training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Fraction of slots masked per row; each row masks exactly
    /// round(mask_prob · L) slots.
    pub mask_prob: f64,
    /// Number of independently masked student replicas (M).
    pub replicas: usize,
    /// How many of the deepest fused layer outputs feed the target (K).
    pub target_layers: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub mask_axis: MaskAxis,
    pub loss_support: LossSupport,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            mask_prob: 0.8,
            replicas: 3,
            target_layers: 8,
            tau_start: 0.999,
            tau_end: 0.9999,
            steps: 200,
            batch_size: 4,
            lr: 5e-4,
            weight_decay: 0.01,
            mask_axis: MaskAxis::Frames,
            loss_support: LossSupport::Masked,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(TrainError::BadConfig(format!(
                "mask_prob must lie in (0, 1), got {}",
                self.mask_prob
            )));
        }
        if self.replicas == 0 {
            return Err(TrainError::BadConfig("replicas must be >= 1".into()));
        }
        if self.target_layers == 0 {
            return Err(TrainError::BadConfig("target_layers must be >= 1".into()));
        }
        for (name, tau) in [("tau_start", self.tau_start), ("tau_end", self.tau_end)] {
            if !(0.0..=1.0).contains(&tau) {
                return Err(TrainError::BadConfig(format!(
                    "{name} must lie in [0, 1], got {tau}"
                )));
            }
        }
        if self.steps == 0 {
            return Err(TrainError::BadConfig("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::BadConfig(format!(
                "lr must be finite and > 0, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(TrainError::BadConfig(format!(
                "weight_decay must be finite and >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Mask plan
// ---------------------------------------------------------------------------

/// A fully materialized masking decision for one step.
///
/// Row r of `mask` applies to row r of the replicated student batch, so rows
/// b and m·B+b hold independently drawn masks for the same sample. Noise is
/// drawn only for masked slots: the k-th masked slot of row r (in increasing
/// position order) is filled from `fill_noise[r, k, ..]`.
#[derive(Debug, Clone)]
pub struct MaskPlan {
    pub batch: usize,
    pub replicas: usize,
    /// Number of maskable slots per row (T for frame slots, T·J for tokens).
    pub length: usize,
    /// Entries each masked slot replaces (J·d for frame slots, d for tokens).
    pub slot_width: usize,
    pub per_row_count: usize,
    /// `[batch·replicas, length]` slot mask.
    pub mask: Array2<bool>,
    /// `[batch·replicas, per_row_count, slot_width]` standard normal draws.
    pub fill_noise: Tensor,
}

/// Draws a mask plan: every row masks exactly round(mask_prob · length)
/// slots, uniformly without replacement, with N(0, 1) fill values.
/// Deterministic in `seed` (which the training loop derives per step).
pub fn make_mask_plan(
    batch: usize,
    length: usize,
    slot_width: usize,
    config: &PretrainConfig,
    seed: u64,
) -> Result<MaskPlan, TrainError> {
    config.validate()?;
    if batch == 0 || length == 0 || slot_width == 0 {
        return Err(TrainError::BadConfig(format!(
            "mask plan needs positive batch/length/slot_width, got {batch}/{length}/{slot_width}"
        )));
    }
    let per_row_count = (config.mask_prob * length as f64).round() as usize;
    if per_row_count == 0 || per_row_count >= length {
        return Err(TrainError::DegenerateMask {
            prob: config.mask_prob,
            length,
            count: per_row_count,
            what: if per_row_count == 0 {
                "nothing"
            } else {
                "everything"
            },
        });
    }

    let rows = batch * config.replicas;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = Array2::from_elem((rows, length), false);
    for r in 0..rows {
        for p in rand::seq::index::sample(&mut rng, length, per_row_count) {
            mask[[r, p]] = true;
        }
    }
    let mut fill_noise = Tensor::zeros(IxDyn(&[rows, per_row_count, slot_width]));
    for v in fill_noise.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    Ok(MaskPlan {
        batch,
        replicas: config.replicas,
        length,
        slot_width,
        per_row_count,
        mask,
        fill_noise,
    })
}

impl MaskPlan {
    fn rows(&self) -> usize {
        self.batch * self.replicas
    }

    /// Checks that a `[B·M, T, J, d]` feature shape matches this plan and
    /// returns (frames, joints, dim).
    fn feature_dims(&self, shape: &[usize]) -> Result<(usize, usize, usize), TrainError> {
        let expected_rows = self.rows();
        let ok = shape.len() == 4
            && shape[0] == expected_rows
            && (
                // Frame slots cover one time step...
                (self.length == shape[1] && self.slot_width == shape[2] * shape[3])
                // ...token slots cover one joint.
                || (self.length == shape[1] * shape[2] && self.slot_width == shape[3])
            );
        if !ok {
            return Err(TrainError::ShapeMismatch {
                pred: shape.to_vec(),
                gt: vec![expected_rows, self.length, self.slot_width],
            });
        }
        Ok((shape[1], shape[2], shape[3]))
    }

    /// Materializes the plan against a feature shape as two `[B·M, T, J, d]`
    /// tensors: `keep` is 0 at masked entries and 1 elsewhere; `fill` holds
    /// the noise at masked entries and 0 elsewhere. Masked features are then
    /// `F ⊙ keep + fill`.
    pub fn materialize(&self, shape: &[usize]) -> Result<(Tensor, Tensor), TrainError> {
        let (frames, joints, dim) = self.feature_dims(shape)?;
        let token_slots = self.length == frames * joints;
        let mut keep = Tensor::from_elem(IxDyn(shape), 1.0);
        let mut fill = Tensor::zeros(IxDyn(shape));
        for r in 0..self.rows() {
            let mut slot = 0usize;
            for p in 0..self.length {
                if !self.mask[[r, p]] {
                    continue;
                }
                if token_slots {
                    let (t, j) = (p / joints, p % joints);
                    for c in 0..dim {
                        keep[[r, t, j, c]] = 0.0;
                        fill[[r, t, j, c]] = self.fill_noise[[r, slot, c]];
                    }
                } else {
                    for j in 0..joints {
                        for c in 0..dim {
                            keep[[r, p, j, c]] = 0.0;
                            fill[[r, p, j, c]] = self.fill_noise[[r, slot, j * dim + c]];
                        }
                    }
                }
                slot += 1;
            }
        }
        Ok((keep, fill))
    }

    /// 0/1 weights over `[B·M, T, J, d]` marking the loss support.
    fn support_weights(&self, shape: &[usize], support: LossSupport) -> Result<Tensor, TrainError> {
        match support {
            LossSupport::All => Ok(Tensor::from_elem(IxDyn(shape), 1.0)),
            LossSupport::Masked => {
                let (keep, _) = self.materialize(shape)?;
                Ok(keep.mapv(|k| 1.0 - k))
            }
        }
    }
}

/// Replaces masked slots of an embedded feature batch with the plan's noise:
/// masked entries become `fill_noise`; everything else is untouched.
pub fn apply_mask(f0: &Tensor, plan: &MaskPlan) -> Result<Tensor, TrainError> {
    let (keep, fill) = plan.materialize(f0.shape())?;
    Ok(f0 * &keep + &fill)
}

/// Stacks M copies of a `[B, ...]` tensor into `[M·B, ...]`; replica m of
/// sample b lands at row m·B + b.
pub fn replicate_for_multimask(f0: &Tensor, replicas: usize) -> Tensor {
    assert!(replicas >= 1, "need at least one replica");
    let views: Vec<_> = (0..replicas).map(|_| f0.view()).collect();
    concatenate(Axis(0), &views).expect("identical shapes stack")
}

// ---------------------------------------------------------------------------
// Teacher
// ---------------------------------------------------------------------------

/// The EMA teacher: a full model copy updated only through [`ema_update`].
#[derive(Debug, Clone)]
pub struct TeacherState {
    pub model: Model,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Number of EMA updates applied so far.
    pub step: usize,
    /// Horizon over which τ moves linearly from tau_start to tau_end.
    pub total_steps: usize,
}

impl TeacherState {
    /// Starts the teacher as an exact copy of the student.
    pub fn new(student: &Model, config: &PretrainConfig) -> Self {
        TeacherState {
            model: student.clone(),
            tau_start: config.tau_start,
            tau_end: config.tau_end,
            step: 0,
            total_steps: config.steps,
        }
    }

    /// Current decay factor: tau_start + (tau_end − tau_start)·min(step/total, 1).
    pub fn tau(&self) -> f64 {
        let frac = if self.total_steps == 0 {
            1.0
        } else {
            (self.step as f64 / self.total_steps as f64).min(1.0)
        };
        self.tau_start + (self.tau_end - self.tau_start) * frac
    }
}

/// One EMA step: trainable teacher tensors move to τ·δ + (1−τ)·θ; frozen
/// tensors (batch-norm running statistics) are copied from the student
/// outright. τ is read before the step counter advances.
pub fn ema_update(teacher: &mut TeacherState, student: &ParamSet) -> Result<(), TrainError> {
    let tau = teacher.tau();
    let params = &mut teacher.model.params;
    if params.len() != student.len() {
        return Err(TrainError::TeacherShapeMismatch {
            name: format!(
                "parameter count {} vs student {}",
                params.len(),
                student.len()
            ),
        });
    }
    for idx in 0..params.len() {
        let theta = student.entry(idx);
        let entry = params.entry(idx);
        if entry.name != theta.name || entry.value.shape() != theta.value.shape() {
            return Err(TrainError::TeacherShapeMismatch {
                name: theta.name.clone(),
            });
        }
        let next = if entry.trainable {
            entry.value.mapv(|d| d * tau) + theta.value.mapv(|t| t * (1.0 - tau))
        } else {
            theta.value.clone()
        };
        params.set_value(idx, next);
    }
    teacher.step += 1;
    Ok(())
}

// ---------------------------------------------------------------------------
// Target construction
// ---------------------------------------------------------------------------

/// Parameter-free layer normalization over the last axis (population
/// variance, same epsilon as the differentiable op).
fn ln_last(x: &Tensor) -> Tensor {
    let axis = x.ndim() - 1;
    let d = x.shape()[axis] as f64;
    let mut out = x.clone();
    for mut lane in out.lanes_mut(Axis(axis)) {
        let mean = lane.sum() / d;
        let var = lane.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        for e in lane.iter_mut() {
            *e = (*e - mean) * inv;
        }
    }
    out
}

/// Builds the regression target from the deepest `k` fused layer outputs:
/// each is layer-normalized per token, averaged, and normalized once more,
/// so every token of the target has zero mean and unit variance over
/// channels.
pub fn build_target(layer_outputs: &[Tensor], k: usize) -> Result<Tensor, TrainError> {
    let n = layer_outputs.len();
    if k == 0 || k > n {
        return Err(TrainError::BadConfig(format!(
            "target_layers must lie in [1, {n}], got {k}"
        )));
    }
    let mut acc: Option<Tensor> = None;
    for layer in &layer_outputs[n - k..] {
        let normed = ln_last(layer);
        acc = Some(match acc {
            Some(a) => a + normed,
            None => normed,
        });
    }
    let mean = acc.expect("k >= 1").mapv(|v| v / k as f64);
    Ok(ln_last(&mean))
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean squared error between the student's regression output
/// (`[B·M, T, J, d]`) and the teacher target (`[B, T, J, d]`, reused for all
/// M replicas), over the configured support. The target is a constant: no
/// gradient flows toward the teacher.
pub fn pretrain_loss(
    t: &mut Tape,
    student_out: Var,
    target: &Tensor,
    plan: &MaskPlan,
    support: LossSupport,
) -> Result<Var, TrainError> {
    let shape = t.shape(student_out).to_vec();
    plan.feature_dims(&shape)?;
    let mut expected = shape.clone();
    expected[0] = plan.batch;
    if target.shape() != expected.as_slice() {
        return Err(TrainError::ShapeMismatch {
            pred: shape,
            gt: target.shape().to_vec(),
        });
    }
    let weights = plan.support_weights(&shape, support)?;
    let denom = weights.sum();
    if denom == 0.0 {
        return Err(TrainError::BadConfig(
            "loss support selects no positions".into(),
        ));
    }
    let target_rep = replicate_for_multimask(target, plan.replicas);
    let tv = t.constant(target_rep);
    let diff = t.sub(student_out, tv);
    let masked = t.mul_const(diff, weights);
    let sq = t.mul(masked, masked);
    let total = t.sum_all(sq);
    Ok(t.scale(total, 1.0 / denom))
}

// ---------------------------------------------------------------------------
// Step and loop
// ---------------------------------------------------------------------------

/// Per-run instrumentation: the per-step losses and how many teacher
/// forward passes the run performed (exactly one per step).
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    pub teacher_forwards: usize,
}

fn teacher_fused_outputs(acts: &Activations, tape: &Tape) -> Vec<Tensor> {
    acts.fused.iter().map(|&v| tape.value(v).clone()).collect()
}

/// The mask geometry for a model/config pair: (length, slot_width).
pub fn mask_geometry(model: &Model, axis: MaskAxis) -> (usize, usize) {
    let (frames, joints, dim) = (
        model.config.frames,
        model.config.joints,
        model.config.dim,
    );
    match axis {
        MaskAxis::Frames => (frames, joints * dim),
        MaskAxis::Tokens => (frames * joints, dim),
    }
}

/// One pre-training step over a `[B, T, J, 3]` input batch.
///
/// Teacher: one unmasked eval forward; its deepest `target_layers` fused
/// outputs form the target. Student: M masked replicas through embedding,
/// backbone, and the regression head in train mode; masked regression loss;
/// backward; optimizer update; batch-norm statistics update; EMA update.
pub fn pretrain_step(
    student: &mut Model,
    teacher: &mut TeacherState,
    inputs: &Tensor,
    config: &PretrainConfig,
    opt: &mut AdamW,
    step: usize,
    teacher_forwards: &mut usize,
) -> Result<f64, TrainError> {
    let cfg = student.config.clone();
    if config.target_layers > cfg.layers {
        return Err(TrainError::BadConfig(format!(
            "target_layers {} exceeds network depth {}",
            config.target_layers, cfg.layers
        )));
    }
    let shape = inputs.shape();
    if shape.len() != 4 || shape[1] != cfg.frames || shape[2] != cfg.joints || shape[3] != 3 {
        return Err(TrainError::ShapeMismatch {
            pred: shape.to_vec(),
            gt: vec![shape.first().copied().unwrap_or(0), cfg.frames, cfg.joints, 3],
        });
    }
    let batch = shape[0];

    // Teacher: single unmasked forward in eval mode.
    let teacher_pass =
        teacher
            .model
            .forward(inputs, crate::network::ForwardMode::Features, RunMode::Eval)?;
    *teacher_forwards += 1;
    let fused = teacher_fused_outputs(&teacher_pass.acts, &teacher_pass.tape);
    let target = build_target(&fused, config.target_layers)?;
    drop(teacher_pass);

    // Student: M masked replicas in train mode.
    let (length, slot_width) = mask_geometry(student, config.mask_axis);
    let plan_seed = derive_seed(derive_seed(config.seed, stream::MASK), step as u64);
    let plan = make_mask_plan(batch, length, slot_width, config, plan_seed)?;

    let x_rep = replicate_for_multimask(inputs, config.replicas);
    let mut tape = Tape::new();
    let vars = student.bind(&mut tape, RunMode::Train);
    let x = tape.constant(x_rep);
    let f0 = student.embed_input(&mut tape, &vars, x);
    let (keep, fill) = plan.materialize(tape.shape(f0))?;
    let kept = tape.mul_const(f0, keep);
    let masked = tape.add_const(kept, fill);
    let (acts, bn_updates) = student.backbone(&mut tape, &vars, masked, RunMode::Train)?;
    let last = *acts.fused.last().expect("at least one layer");
    let out = student.pretrain_head(&mut tape, &vars, last);

    let loss = pretrain_loss(&mut tape, out, &target, &plan, config.loss_support)?;
    let value = tape.value(loss)[[0]];
    if !value.is_finite() {
        return Err(TrainError::NonFiniteLoss { step });
    }
    let grads = tape.backward(loss);
    opt.step(&mut student.params, &grads, &vars);
    student.apply_bn_updates(&bn_updates);

    ema_update(teacher, &student.params)?;
    Ok(value)
}

/// Builds the optimizer for a pre-training run.
pub fn make_optimizer(model: &Model, config: &PretrainConfig) -> AdamW {
    AdamW::new(
        &model.params,
        OptimConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            total_steps: config.steps,
            ..OptimConfig::default()
        },
    )
}

/// The pre-training loop over a dataset of 2D input sequences.
///
/// Batches cycle through a shuffled order (reshuffled on every pass, seeded
/// from config.seed); 3D targets are never consumed. Returns the per-step
/// losses and the teacher forward count.
pub fn pretrain_loop(
    student: &mut Model,
    teacher: &mut TeacherState,
    dataset: &[PoseSequence],
    config: &PretrainConfig,
    opt: &mut AdamW,
) -> Result<PretrainReport, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::BadConfig("dataset is empty".into()));
    }
    let batch_size = config.batch_size.min(dataset.len());
    let mut order: Vec<usize> = Vec::new();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, stream::BATCH));

    let mut losses = Vec::with_capacity(config.steps);
    let mut teacher_forwards = 0usize;
    for step in 0..config.steps {
        let mut picks = Vec::with_capacity(batch_size);
        while picks.len() < batch_size {
            if order.is_empty() {
                order = (0..dataset.len()).collect();
                use rand::seq::SliceRandom;
                order.shuffle(&mut shuffle_rng);
            }
            picks.push(order.pop().expect("order refilled above"));
        }
        let mut inputs = Tensor::zeros(IxDyn(&[
            batch_size,
            dataset[picks[0]].frames,
            dataset[picks[0]].joints,
            3,
        ]));
        for (slot, &i) in picks.iter().enumerate() {
            let seq = &dataset[i];
            inputs
                .index_axis_mut(Axis(0), slot)
                .assign(&seq.data.view());
        }
        let value = pretrain_step(
            student,
            teacher,
            &inputs,
            config,
            opt,
            step,
            &mut teacher_forwards,
        )?;
        losses.push(value);
    }
    Ok(PretrainReport {
        losses,
        teacher_forwards,
    })
}
