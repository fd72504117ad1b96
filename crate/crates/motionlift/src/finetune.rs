//! Supervised training: differentiable position, scale-normalized, and
//! velocity losses for 3D lifting, the cross-entropy action objective, and
//! the epoch loop with a held-out validation split.
//!
//! All losses are built on a [`Tape`] so one `backward` call yields gradients
//! for every model parameter. They accept a single `[T, J, 3]` sequence or a
//! `[B, T, J, 3]` batch; batched values are the mean of the per-sequence
//! values (the normalized loss computes its optimal scale per sequence).

use std::time::Instant;

use ndarray::IxDyn;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_inputs, batch_targets, SamplePair};
use crate::error::TrainError;
use crate::graph::{Tape, Tensor, Var};
use crate::metrics::{evaluate, Protocol};
use crate::network::{ForwardMode, Model, RunMode};
use crate::optim::{AdamW, OptimConfig};
use crate::rng::{derive_seed, stream};

/// Fraction of the dataset held out (from the end) for validation.
pub const VAL_FRACTION: f64 = 0.2;

/// Which objective the training loop minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// 3D lifting with the combined position/scale/velocity loss.
    Pose3d,
    /// Sequence classification with mean cross-entropy.
    Action,
}

/// How the scale-normalized position loss applies its optimal scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmpjpeForm {
    /// Scale the prediction, then measure: MPJPE(s·pred, gt). This is the
    /// form that is actually invariant to rescaling the prediction.
    Standard,
    /// Scale the unscaled error: s·MPJPE(pred, gt). Kept selectable because
    /// some write-ups print the formula this way.
    Literal,
}

/// Fine-tuning hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    /// Weight of the scale-normalized position term.
    pub lambda1: f64,
    /// Weight of the velocity term.
    pub lambda2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate; decays to zero on a cosine schedule.
    pub lr: f64,
    pub weight_decay: f64,
    pub task: TaskKind,
    pub nmpjpe_form: NmpjpeForm,
    pub seed: u64,
    /// Checkpoint whose backbone initializes the model (heads are fresh).
    pub init_checkpoint: Option<String>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lambda1: 0.5,
            lambda2: 20.0,
            epochs: 10,
            batch_size: 4,
            lr: 5e-4,
            weight_decay: 0.01,
            task: TaskKind::Pose3d,
            nmpjpe_form: NmpjpeForm::Standard,
            seed: 0,
            init_checkpoint: None,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !nonneg(self.lambda1) || !nonneg(self.lambda2) {
            return Err(TrainError::BadConfig(format!(
                "lambda1 and lambda2 must be finite and >= 0, got {} and {}",
                self.lambda1, self.lambda2
            )));
        }
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be >= 1".into()));
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
        if !nonneg(self.weight_decay) {
            return Err(TrainError::BadConfig(format!(
                "weight_decay must be finite and >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Checks that `pred` and `gt` share a `[T, J, 3]` or `[B, T, J, 3]` shape and
/// returns (batch, frames, joints).
fn pose_dims(t: &Tape, pred: Var, gt: Var) -> Result<(usize, usize, usize), TrainError> {
    let p = t.shape(pred).to_vec();
    let g = t.shape(gt).to_vec();
    let ok = p == g
        && (p.len() == 3 || p.len() == 4)
        && p.last() == Some(&3)
        && p.iter().all(|&d| d > 0);
    if !ok {
        return Err(TrainError::ShapeMismatch { pred: p, gt: g });
    }
    Ok(if p.len() == 4 {
        (p[0], p[1], p[2])
    } else {
        (1, p[0], p[1])
    })
}

/// Mean Euclidean norm of the last-axis rows of `diff`, `count` rows total.
fn mean_joint_norm(t: &mut Tape, diff: Var, count: usize) -> Var {
    let sq = t.mul(diff, diff);
    let ssq = t.sum_last(sq);
    let norm = t.sqrt(ssq);
    let total = t.sum_all(norm);
    t.scale(total, 1.0 / count as f64)
}

/// Mean per-joint position error: (1/TJ)·Σ_t Σ_j ‖pred_{t,j} − gt_{t,j}‖₂,
/// averaged over the batch when one is present.
pub fn loss_mpjpe(t: &mut Tape, pred: Var, gt: Var) -> Result<Var, TrainError> {
    let (batch, frames, joints) = pose_dims(t, pred, gt)?;
    let d = t.sub(pred, gt);
    Ok(mean_joint_norm(t, d, batch * frames * joints))
}

fn nmpjpe_single(t: &mut Tape, pred: Var, gt: Var, form: NmpjpeForm) -> Result<Var, TrainError> {
    let pp = t.mul(pred, pred);
    let denom = t.sum_all(pp);
    if t.value(denom)[[0]] == 0.0 {
        return Err(TrainError::ZeroPrediction);
    }
    let pg = t.mul(pred, gt);
    let dot = t.sum_all(pg);
    let s = t.div(dot, denom);
    match form {
        NmpjpeForm::Standard => {
            let scaled = t.scale_by(pred, s);
            loss_mpjpe(t, scaled, gt)
        }
        NmpjpeForm::Literal => {
            let m = loss_mpjpe(t, pred, gt)?;
            Ok(t.mul(s, m))
        }
    }
}

/// Scale-normalized position error. The scalar s = ⟨pred, gt⟩/⟨pred, pred⟩
/// minimizes ‖s·pred − gt‖²_F and is computed independently per sequence.
pub fn loss_nmpjpe(
    t: &mut Tape,
    pred: Var,
    gt: Var,
    form: NmpjpeForm,
) -> Result<Var, TrainError> {
    let (batch, _, _) = pose_dims(t, pred, gt)?;
    if t.shape(pred).len() == 3 {
        return nmpjpe_single(t, pred, gt, form);
    }
    let mut acc: Option<Var> = None;
    for b in 0..batch {
        let p = t.slice_axis(pred, 0, b, b + 1);
        let g = t.slice_axis(gt, 0, b, b + 1);
        let l = nmpjpe_single(t, p, g, form)?;
        acc = Some(match acc {
            Some(a) => t.add(a, l),
            None => l,
        });
    }
    let total = acc.expect("batch >= 1");
    Ok(t.scale(total, 1.0 / batch as f64))
}

/// Mean error of frame-to-frame displacements:
/// (1/((T−1)J))·Σ_{t≥2} Σ_j ‖Δpred_{t,j} − Δgt_{t,j}‖₂.
pub fn loss_velocity(t: &mut Tape, pred: Var, gt: Var) -> Result<Var, TrainError> {
    let (batch, frames, joints) = pose_dims(t, pred, gt)?;
    if frames < 2 {
        return Err(TrainError::TooFewFrames { frames });
    }
    let axis = t.shape(pred).len() - 3;
    let p_next = t.slice_axis(pred, axis, 1, frames);
    let p_prev = t.slice_axis(pred, axis, 0, frames - 1);
    let vp = t.sub(p_next, p_prev);
    let g_next = t.slice_axis(gt, axis, 1, frames);
    let g_prev = t.slice_axis(gt, axis, 0, frames - 1);
    let vg = t.sub(g_next, g_prev);
    let d = t.sub(vp, vg);
    Ok(mean_joint_norm(t, d, batch * (frames - 1) * joints))
}

/// Combined lifting objective: L = MPJPE + λ1·N-MPJPE + λ2·Velocity.
///
/// A term with zero weight is skipped entirely, so its preconditions (nonzero
/// prediction for λ1, two frames for λ2) only bind when the term is active.
pub fn loss_finetune(
    t: &mut Tape,
    pred: Var,
    gt: Var,
    lambda1: f64,
    lambda2: f64,
    form: NmpjpeForm,
) -> Result<Var, TrainError> {
    if !(lambda1.is_finite() && lambda1 >= 0.0) || !(lambda2.is_finite() && lambda2 >= 0.0) {
        return Err(TrainError::BadConfig(format!(
            "loss weights must be finite and >= 0, got {lambda1} and {lambda2}"
        )));
    }
    let mut total = loss_mpjpe(t, pred, gt)?;
    if lambda1 != 0.0 {
        let n = loss_nmpjpe(t, pred, gt, form)?;
        let weighted = t.scale(n, lambda1);
        total = t.add(total, weighted);
    }
    if lambda2 != 0.0 {
        let v = loss_velocity(t, pred, gt)?;
        let weighted = t.scale(v, lambda2);
        total = t.add(total, weighted);
    }
    Ok(total)
}

/// Mean cross-entropy over a `[B, C]` logit batch, stabilized through the
/// log-sum-exp identity.
pub fn loss_action(t: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var, TrainError> {
    let shape = t.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 || shape[1] == 0 {
        return Err(TrainError::ShapeMismatch {
            pred: shape,
            gt: vec![labels.len()],
        });
    }
    let classes = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(TrainError::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    let lse = t.logsumexp_last(logits);
    let mut hot = Tensor::zeros(IxDyn(&shape));
    for (i, &l) in labels.iter().enumerate() {
        hot[[i, l]] = 1.0;
    }
    let picked = t.mul_const(logits, hot);
    let correct = t.sum_last(picked);
    let nll = t.sub(lse, correct);
    let total = t.sum_all(nll);
    Ok(t.scale(total, 1.0 / labels.len() as f64))
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// One row of the per-epoch metric log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation MPJPE for the lifting task, validation Top-1 for actions.
    pub val_metric: f64,
    pub wall_seconds: f64,
}

impl EpochLog {
    /// Renders the stable line format: epoch, train loss, validation metric
    /// (named per task), wall time. Loss and metric use full float precision
    /// so logs can be compared bit-for-bit; wall time is informational.
    pub fn render(&self, task: TaskKind) -> String {
        let metric = match task {
            TaskKind::Pose3d => "val_mpjpe",
            TaskKind::Action => "val_top1",
        };
        format!(
            "epoch {} train_loss {:.16e} {} {:.16e} wall_seconds {:.3}",
            self.epoch, self.train_loss, metric, self.val_metric, self.wall_seconds
        )
    }
}

/// Splits a dataset into train and held-out slices; the validation slice is
/// the last 20% (rounded down, so small datasets may leave it empty).
pub fn split_train_val(dataset: &[SamplePair]) -> (&[SamplePair], &[SamplePair]) {
    let val_len = (dataset.len() as f64 * VAL_FRACTION).floor() as usize;
    let cut = dataset.len() - val_len;
    (&dataset[..cut], &dataset[cut..])
}

/// Builds the optimizer for a run: cosine schedule spanning exactly the
/// number of steps `finetune_loop` will take on this dataset.
pub fn make_optimizer(model: &Model, config: &FinetuneConfig, dataset: &[SamplePair]) -> AdamW {
    let (train, _) = split_train_val(dataset);
    let steps_per_epoch = train.len().div_ceil(config.batch_size.max(1)).max(1);
    AdamW::new(
        &model.params,
        OptimConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            total_steps: config.epochs * steps_per_epoch,
            ..OptimConfig::default()
        },
    )
}

fn labels_of(pairs: &[&SamplePair]) -> Result<Vec<usize>, TrainError> {
    pairs
        .iter()
        .map(|(input, target)| {
            target
                .action_label
                .or(input.action_label)
                .ok_or(TrainError::MissingLabel)
        })
        .collect()
}

/// Runs forward, loss, backward, one optimizer update, and the batch-norm
/// running-statistics update on one batch. Returns the loss value.
pub fn train_step(
    model: &mut Model,
    pairs: &[&SamplePair],
    config: &FinetuneConfig,
    opt: &mut AdamW,
    step: usize,
) -> Result<f64, TrainError> {
    let x = batch_inputs(pairs);
    let (pass, loss) = match config.task {
        TaskKind::Pose3d => {
            let y = batch_targets(pairs);
            let mut pass = model.forward(&x, ForwardMode::Pose, RunMode::Train)?;
            let gt = pass.tape.constant(y);
            let loss = loss_finetune(
                &mut pass.tape,
                pass.output,
                gt,
                config.lambda1,
                config.lambda2,
                config.nmpjpe_form,
            )?;
            (pass, loss)
        }
        TaskKind::Action => {
            let labels = labels_of(pairs)?;
            let mut pass = model.forward(&x, ForwardMode::Action, RunMode::Train)?;
            let loss = loss_action(&mut pass.tape, pass.output, &labels)?;
            (pass, loss)
        }
    };
    let value = pass.tape.value(loss)[[0]];
    if !value.is_finite() {
        return Err(TrainError::NonFiniteLoss { step });
    }
    let grads = pass.tape.backward(loss);
    opt.step(&mut model.params, &grads, &pass.vars);
    model.apply_bn_updates(&pass.bn_updates);
    Ok(value)
}

pub fn validation_metric(
    model: &Model,
    val: &[SamplePair],
    config: &FinetuneConfig,
) -> Result<f64, TrainError> {
    let protocol = match config.task {
        TaskKind::Pose3d => Protocol::P1,
        TaskKind::Action => Protocol::Action,
    };
    let report = evaluate(model, val, protocol)?;
    Ok(report.overall[protocol.metric_name()])
}

/// The supervised training loop.
///
/// Shuffles the train split every epoch with a seed derived from
/// (config.seed, epoch), minimizes the task loss batch by batch, and logs the
/// epoch's mean train loss and validation metric. Datasets too small to carve
/// out a validation split are validated on the train split itself.
pub fn finetune_loop(
    model: &mut Model,
    dataset: &[SamplePair],
    config: &FinetuneConfig,
    opt: &mut AdamW,
) -> Result<Vec<EpochLog>, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::BadConfig("dataset is empty".into()));
    }
    let (train, val) = split_train_val(dataset);
    let val = if val.is_empty() { train } else { val };

    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        let epoch_seed = derive_seed(derive_seed(config.seed, stream::BATCH), epoch as u64);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));

        let mut loss_acc = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let pairs: Vec<&SamplePair> = chunk.iter().map(|&i| &train[i]).collect();
            let value = train_step(model, &pairs, config, opt, step)?;
            loss_acc += value * chunk.len() as f64;
            step += 1;
        }
        let train_loss = loss_acc / train.len() as f64;
        let val_metric = validation_metric(model, val, config)?;
        log.push(EpochLog {
            epoch,
            train_loss,
            val_metric,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{chain_topology, generate_synthetic_dataset};
    use crate::network::NetworkConfig;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        Tensor::from_shape_fn(IxDyn(shape), |_| r.gen_range(-1.0..1.0))
    }

    /// Evaluates a loss built by `build` on a raw prediction tensor.
    fn eval_loss<F>(pred: &Tensor, build: F) -> f64
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut t = Tape::new();
        let p = t.param(pred.clone());
        let l = build(&mut t, p);
        t.value(l)[[0]]
    }

    /// Central-difference gradient check of a scalar loss w.r.t. `pred`.
    fn fd_check<F>(pred: &Tensor, build: F)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut t = Tape::new();
        let p = t.param(pred.clone());
        let l = build(&mut t, p);
        let grads = t.backward(l);
        let analytic = grads.get(p).expect("loss must reach pred").clone();

        let eps = 1e-5;
        let n = pred.len();
        for k in 0..n {
            let mut plus = pred.clone();
            plus.as_slice_mut().unwrap()[k] += eps;
            let mut minus = pred.clone();
            minus.as_slice_mut().unwrap()[k] -= eps;
            let fd = (eval_loss(&plus, &build) - eval_loss(&minus, &build)) / (2.0 * eps);
            let a = analytic.as_slice().unwrap()[k];
            let denom = a.abs().max(fd.abs()).max(1e-3);
            assert!(
                ((a - fd) / denom).abs() < 1e-4,
                "entry {k}: analytic {a} vs finite difference {fd}"
            );
        }
    }

    // -- position loss -------------------------------------------------------

    #[test]
    fn mpjpe_zero_when_equal() {
        let x = random_tensor(&[2, 3, 3], 1);
        let v = eval_loss(&x, |t, p| {
            let g = t.constant(x.clone());
            loss_mpjpe(t, p, g).unwrap()
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn mpjpe_is_the_euclidean_norm_on_one_joint() {
        let gt = Tensor::zeros(IxDyn(&[1, 1, 3]));
        let mut pred = gt.clone();
        pred[[0, 0, 0]] = 3.0;
        pred[[0, 0, 1]] = 4.0;
        let v = eval_loss(&pred, |t, p| {
            let g = t.constant(gt.clone());
            loss_mpjpe(t, p, g).unwrap()
        });
        assert_abs_diff_eq!(v, 5.0, epsilon = 1e-15);
    }

    #[test]
    fn mpjpe_matches_brute_force() {
        let pred = random_tensor(&[4, 3, 3], 2);
        let gt = random_tensor(&[4, 3, 3], 3);
        let mut acc = 0.0;
        for t in 0..4 {
            for j in 0..3 {
                let mut sq = 0.0;
                for c in 0..3 {
                    let d = pred[[t, j, c]] - gt[[t, j, c]];
                    sq += d * d;
                }
                acc += sq.sqrt();
            }
        }
        let v = eval_loss(&pred, |t, p| {
            let g = t.constant(gt.clone());
            loss_mpjpe(t, p, g).unwrap()
        });
        assert_abs_diff_eq!(v, acc / 12.0, epsilon = 1e-12);
    }

    #[test]
    fn mpjpe_homogeneity_and_offset_cancellation() {
        let pred = random_tensor(&[3, 4, 3], 4);
        let gt = random_tensor(&[3, 4, 3], 5);
        let base = eval_loss(&pred, |t, p| {
            let g = t.constant(gt.clone());
            loss_mpjpe(t, p, g).unwrap()
        });
        let a = -1.7;
        let c = 0.3;
        let pred2 = pred.mapv(|v| a * v + c);
        let gt2 = gt.mapv(|v| a * v + c);
        let scaled = eval_loss(&pred2, |t, p| {
            let g = t.constant(gt2.clone());
            loss_mpjpe(t, p, g).unwrap()
        });
        assert_abs_diff_eq!(scaled, a.abs() * base, epsilon = 1e-12);
    }

    #[test]
    fn mpjpe_batched_is_mean_of_sequences() {
        let s1 = random_tensor(&[2, 3, 3], 6);
        let s2 = random_tensor(&[2, 3, 3], 7);
        let g1 = random_tensor(&[2, 3, 3], 8);
        let g2 = random_tensor(&[2, 3, 3], 9);
        let single = |p: &Tensor, g: &Tensor| {
            eval_loss(p, |t, pv| {
                let gv = t.constant(g.clone());
                loss_mpjpe(t, pv, gv).unwrap()
            })
        };
        let mut pb = Tensor::zeros(IxDyn(&[2, 2, 3, 3]));
        let mut gb = Tensor::zeros(IxDyn(&[2, 2, 3, 3]));
        for t in 0..2 {
            for j in 0..3 {
                for c in 0..3 {
                    pb[[0, t, j, c]] = s1[[t, j, c]];
                    pb[[1, t, j, c]] = s2[[t, j, c]];
                    gb[[0, t, j, c]] = g1[[t, j, c]];
                    gb[[1, t, j, c]] = g2[[t, j, c]];
                }
            }
        }
        let batched = eval_loss(&pb, |t, pv| {
            let gv = t.constant(gb.clone());
            loss_mpjpe(t, pv, gv).unwrap()
        });
        assert_abs_diff_eq!(
            batched,
            0.5 * (single(&s1, &g1) + single(&s2, &g2)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn mpjpe_rejects_shape_mismatch() {
        let mut t = Tape::new();
        let p = t.param(random_tensor(&[2, 3, 3], 10));
        let g = t.constant(random_tensor(&[2, 4, 3], 11));
        assert!(matches!(
            loss_mpjpe(&mut t, p, g),
            Err(TrainError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn mpjpe_gradient_matches_finite_differences() {
        let pred = random_tensor(&[2, 3, 3], 12);
        let gt = random_tensor(&[2, 3, 3], 13);
        fd_check(&pred, |t, p| {
            let g = t.constant(gt.clone());
            loss_mpjpe(t, p, g).unwrap()
        });
    }

    // -- scale-normalized loss -------------------------------------------------

    #[test]
    fn nmpjpe_zero_when_prediction_is_scaled_gt() {
        let gt = random_tensor(&[2, 3, 3], 14);
        let pred = gt.mapv(|v| 2.0 * v);
        let v = eval_loss(&pred, |t, p| {
            let g = t.constant(gt.clone());
            loss_nmpjpe(t, p, g, NmpjpeForm::Standard).unwrap()
        });
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn nmpjpe_zero_when_equal() {
        let gt = random_tensor(&[2, 3, 3], 15);
        let v = eval_loss(&gt.clone(), |t, p| {
            let g = t.constant(gt.clone());
            loss_nmpjpe(t, p, g, NmpjpeForm::Standard).unwrap()
        });
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn nmpjpe_beats_every_grid_scale() {
        let pred = random_tensor(&[3, 4, 3], 16);
        let gt = random_tensor(&[3, 4, 3], 17);
        let closed = eval_loss(&pred, |t, p| {
            let g = t.constant(gt.clone());
            loss_nmpjpe(t, p, g, NmpjpeForm::Standard).unwrap()
        });
        // The closed-form scale minimizes the squared error, not the summed
        // norm, so grant a grid-resolution tolerance.
        for i in 1..=30 {
            let s = 0.1 * i as f64;
            let scaled = pred.mapv(|v| s * v);
            let at_s = eval_loss(&scaled, |t, p| {
                let g = t.constant(gt.clone());
                loss_mpjpe(t, p, g).unwrap()
            });
            assert!(
                closed <= at_s + 0.05,
                "closed form {closed} should not lose to grid scale {s} ({at_s})"
            );
        }
    }

    #[test]
    fn nmpjpe_standard_form_is_scale_invariant() {
        let pred = random_tensor(&[2, 3, 3], 18);
        let gt = random_tensor(&[2, 3, 3], 19);
        let base = eval_loss(&pred, |t, p| {
            let g = t.constant(gt.clone());
            loss_nmpjpe(t, p, g, NmpjpeForm::Standard).unwrap()
        });
        let rescaled = pred.mapv(|v| 3.7 * v);
        let after = eval_loss(&rescaled, |t, p| {
            let g = t.constant(gt.clone());
            loss_nmpjpe(t, p, g, NmpjpeForm::Standard).unwrap()
        });
        assert_abs_diff_eq!(base, after, epsilon = 1e-12);
    }

    #[test]
    fn nmpjpe_literal_form_multiplies_unscaled_error() {
        let pred = random_tensor(&[2, 3, 3], 20);
        let gt = random_tensor(&[2, 3, 3], 21);
        let dot: f64 = pred.iter().zip(gt.iter()).map(|(a, b)| a * b).sum();
        let denom: f64 = pred.iter().map(|a| a * a).sum();
        let mpjpe = eval_loss(&pred, |t, p| {
            let g = t.constant(gt.clone());
            loss_mpjpe(t, p, g).unwrap()
        });
        let literal = eval_loss(&pred, |t, p| {
            let g = t.constant(gt.clone());
            loss_nmpjpe(t, p, g, NmpjpeForm::Literal).unwrap()
        });
        assert_abs_diff_eq!(literal, (dot / denom) * mpjpe, epsilon = 1e-12);
    }

    #[test]
    fn nmpjpe_rejects_all_zero_prediction() {
        let mut t = Tape::new();
        let p = t.param(Tensor::zeros(IxDyn(&[2, 3, 3])));
        let g = t.constant(random_tensor(&[2, 3, 3], 22));
        assert!(matches!(
            loss_nmpjpe(&mut t, p, g, NmpjpeForm::Standard),
            Err(TrainError::ZeroPrediction)
        ));
    }

    #[test]
    fn nmpjpe_batched_uses_per_sequence_scales() {
        // Sequence 1 is an exact rescaling of its target (so its own loss is
        // 0); sequence 2 is unrelated. A shared scale could not zero the
        // first term, so matching the mean of singles proves per-sequence
        // scaling.
        let g1 = random_tensor(&[2, 3, 3], 23);
        let s1 = g1.mapv(|v| 5.0 * v);
        let s2 = random_tensor(&[2, 3, 3], 24);
        let g2 = random_tensor(&[2, 3, 3], 25);
        let single = |p: &Tensor, g: &Tensor| {
            eval_loss(p, |t, pv| {
                let gv = t.constant(g.clone());
                loss_nmpjpe(t, pv, gv, NmpjpeForm::Standard).unwrap()
            })
        };
        let mut pb = Tensor::zeros(IxDyn(&[2, 2, 3, 3]));
        let mut gb = Tensor::zeros(IxDyn(&[2, 2, 3, 3]));
        for t in 0..2 {
            for j in 0..3 {
                for c in 0..3 {
                    pb[[0, t, j, c]] = s1[[t, j, c]];
                    pb[[1, t, j, c]] = s2[[t, j, c]];
                    gb[[0, t, j, c]] = g1[[t, j, c]];
                    gb[[1, t, j, c]] = g2[[t, j, c]];
                }
            }
        }
        let batched = eval_loss(&pb, |t, pv| {
            let gv = t.constant(gb.clone());
            loss_nmpjpe(t, pv, gv, NmpjpeForm::Standard).unwrap()
        });
        let expect = 0.5 * (single(&s1, &g1) + single(&s2, &g2));
        assert_abs_diff_eq!(batched, expect, epsilon = 1e-12);
        assert!(single(&s1, &g1) < 1e-12);
    }

    #[test]
    fn nmpjpe_gradient_matches_finite_differences() {
        let pred = random_tensor(&[2, 3, 3], 26);
        let gt = random_tensor(&[2, 3, 3], 27);
        fd_check(&pred, |t, p| {
            let g = t.constant(gt.clone());
            loss_nmpjpe(t, p, g, NmpjpeForm::Standard).unwrap()
        });
        fd_check(&pred, |t, p| {
            let g = t.constant(gt.clone());
            loss_nmpjpe(t, p, g, NmpjpeForm::Literal).unwrap()
        });
    }

    // -- velocity loss ---------------------------------------------------------

    #[test]
    fn velocity_ignores_constant_offsets() {
        let gt = random_tensor(&[4, 3, 3], 28);
        let pred = gt.mapv(|v| v + 0.75);
        let v = eval_loss(&pred, |t, p| {
            let g = t.constant(gt.clone());
            loss_velocity(t, p, g).unwrap()
        });
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn velocity_zero_for_static_sequences() {
        let frame = random_tensor(&[1, 3, 3], 29);
        let mut pred = Tensor::zeros(IxDyn(&[4, 3, 3]));
        let mut gt = Tensor::zeros(IxDyn(&[4, 3, 3]));
        for t in 0..4 {
            for j in 0..3 {
                for c in 0..3 {
                    pred[[t, j, c]] = frame[[0, j, c]] + 1.0;
                    gt[[t, j, c]] = frame[[0, j, c]];
                }
            }
        }
        let v = eval_loss(&pred, |t, p| {
            let g = t.constant(gt.clone());
            loss_velocity(t, p, g).unwrap()
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn velocity_hand_case_matches_difference_oracle() {
        // T=3, J=1: displacements of pred are (1,0,0) then (0,2,0); of gt are
        // (0,0,0) then (0,0,1). Norms: 1 and sqrt(5); mean over (T-1)*J = 2.
        let mut pred = Tensor::zeros(IxDyn(&[3, 1, 3]));
        pred[[1, 0, 0]] = 1.0;
        pred[[2, 0, 0]] = 1.0;
        pred[[2, 0, 1]] = 2.0;
        let mut gt = Tensor::zeros(IxDyn(&[3, 1, 3]));
        gt[[2, 0, 2]] = 1.0;
        let v = eval_loss(&pred, |t, p| {
            let g = t.constant(gt.clone());
            loss_velocity(t, p, g).unwrap()
        });
        assert_abs_diff_eq!(v, (1.0 + 5.0f64.sqrt()) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn velocity_needs_two_frames() {
        let mut t = Tape::new();
        let p = t.param(random_tensor(&[1, 3, 3], 30));
        let g = t.constant(random_tensor(&[1, 3, 3], 31));
        assert!(matches!(
            loss_velocity(&mut t, p, g),
            Err(TrainError::TooFewFrames { frames: 1 })
        ));
    }

    #[test]
    fn velocity_gradient_matches_finite_differences() {
        let pred = random_tensor(&[3, 2, 3], 32);
        let gt = random_tensor(&[3, 2, 3], 33);
        fd_check(&pred, |t, p| {
            let g = t.constant(gt.clone());
            loss_velocity(t, p, g).unwrap()
        });
    }

    // -- combined loss -----------------------------------------------------------

    #[test]
    fn combined_loss_zero_when_equal() {
        let gt = random_tensor(&[3, 2, 3], 34);
        let v = eval_loss(&gt.clone(), |t, p| {
            let g = t.constant(gt.clone());
            loss_finetune(t, p, g, 0.5, 20.0, NmpjpeForm::Standard).unwrap()
        });
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn combined_loss_with_zero_weights_is_plain_mpjpe() {
        let pred = random_tensor(&[3, 2, 3], 35);
        let gt = random_tensor(&[3, 2, 3], 36);
        let combined = eval_loss(&pred, |t, p| {
            let g = t.constant(gt.clone());
            loss_finetune(t, p, g, 0.0, 0.0, NmpjpeForm::Standard).unwrap()
        });
        let plain = eval_loss(&pred, |t, p| {
            let g = t.constant(gt.clone());
            loss_mpjpe(t, p, g).unwrap()
        });
        assert_eq!(combined, plain);
    }

    #[test]
    fn combined_loss_matches_weighted_component_sum() {
        let pred = random_tensor(&[3, 2, 3], 37);
        let gt = random_tensor(&[3, 2, 3], 38);
        let part = |f: &dyn Fn(&mut Tape, Var, Var) -> Var| {
            eval_loss(&pred, |t, p| {
                let g = t.constant(gt.clone());
                f(t, p, g)
            })
        };
        let m = part(&|t, p, g| loss_mpjpe(t, p, g).unwrap());
        let n = part(&|t, p, g| loss_nmpjpe(t, p, g, NmpjpeForm::Standard).unwrap());
        let v = part(&|t, p, g| loss_velocity(t, p, g).unwrap());
        let combined = part(&|t, p, g| {
            loss_finetune(t, p, g, 0.5, 20.0, NmpjpeForm::Standard).unwrap()
        });
        assert_abs_diff_eq!(combined, m + 0.5 * n + 20.0 * v, epsilon = 1e-12);
    }

    #[test]
    fn combined_loss_rejects_negative_weights() {
        let mut t = Tape::new();
        let p = t.param(random_tensor(&[2, 2, 3], 39));
        let g = t.constant(random_tensor(&[2, 2, 3], 40));
        assert!(matches!(
            loss_finetune(&mut t, p, g, -0.1, 0.0, NmpjpeForm::Standard),
            Err(TrainError::BadConfig(_))
        ));
    }

    #[test]
    fn combined_loss_gradient_matches_finite_differences() {
        let pred = random_tensor(&[3, 2, 3], 41);
        let gt = random_tensor(&[3, 2, 3], 42);
        fd_check(&pred, |t, p| {
            let g = t.constant(gt.clone());
            loss_finetune(t, p, g, 0.5, 20.0, NmpjpeForm::Standard).unwrap()
        });
    }

    // -- action loss ---------------------------------------------------------------

    #[test]
    fn action_uniform_logits_gives_ln_classes() {
        let logits = Tensor::zeros(IxDyn(&[2, 4]));
        let v = eval_loss(&logits, |t, p| loss_action(t, p, &[0, 3]).unwrap());
        assert_abs_diff_eq!(v, 4.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn action_loss_decreases_with_margin() {
        let mut last = f64::INFINITY;
        for margin in [1.0, 5.0, 10.0] {
            let mut logits = Tensor::zeros(IxDyn(&[1, 4]));
            logits[[0, 2]] = margin;
            let v = eval_loss(&logits, |t, p| loss_action(t, p, &[2]).unwrap());
            assert!(v < last, "loss should fall as the margin grows");
            last = v;
        }
        assert!(last < 1e-3, "a 10-unit margin should nearly zero the loss");
    }

    #[test]
    fn action_matches_brute_force_softmax_oracle() {
        let logits = random_tensor(&[3, 5], 43);
        let labels = [4usize, 0, 2];
        let mut expect = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row: Vec<f64> = (0..5).map(|c| logits[[i, c]]).collect();
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect += -(row[l].exp() / z).ln();
        }
        expect /= labels.len() as f64;
        let v = eval_loss(&logits, |t, p| loss_action(t, p, &labels).unwrap());
        assert_abs_diff_eq!(v, expect, epsilon = 1e-12);
    }

    #[test]
    fn action_is_stable_for_huge_logits() {
        let mut logits = Tensor::zeros(IxDyn(&[1, 3]));
        logits[[0, 0]] = 10_000.0;
        logits[[0, 1]] = 9_999.0;
        let v = eval_loss(&logits, |t, p| loss_action(t, p, &[0]).unwrap());
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn action_rejects_out_of_range_label() {
        let mut t = Tape::new();
        let p = t.param(Tensor::zeros(IxDyn(&[2, 3])));
        assert!(matches!(
            loss_action(&mut t, p, &[0, 3]),
            Err(TrainError::LabelOutOfRange {
                label: 3,
                classes: 3
            })
        ));
    }

    #[test]
    fn action_gradient_matches_finite_differences() {
        let logits = random_tensor(&[3, 4], 44);
        fd_check(&logits, |t, p| loss_action(t, p, &[1, 0, 3]).unwrap());
    }

    // -- split / loop ----------------------------------------------------------------

    fn tiny_dataset(count: usize, frames: usize, joints: usize, seed: u64) -> Vec<SamplePair> {
        generate_synthetic_dataset(count, frames, &chain_topology(joints), 0.01, seed).unwrap()
    }

    fn tiny_model(frames: usize, joints: usize, seed: u64) -> Model {
        let cfg = NetworkConfig {
            layers: 1,
            dim: 4,
            heads: 2,
            mlp_ratio: 2,
            frames,
            joints,
            action_classes: Some(4),
        };
        Model::new(cfg, &chain_topology(joints), seed).unwrap()
    }

    #[test]
    fn split_takes_last_fifth() {
        let data = tiny_dataset(10, 2, 3, 1);
        let (train, val) = split_train_val(&data);
        assert_eq!(train.len(), 8);
        assert_eq!(val.len(), 2);
        assert_eq!(&data[8..], val);

        let small = tiny_dataset(4, 2, 3, 2);
        let (train, val) = split_train_val(&small);
        assert_eq!(train.len(), 4);
        assert!(val.is_empty());
    }

    #[test]
    fn loop_logs_one_entry_per_epoch_and_decreases_loss() {
        let data = tiny_dataset(5, 4, 3, 3);
        let mut model = tiny_model(4, 3, 7);
        let config = FinetuneConfig {
            epochs: 8,
            batch_size: 2,
            lambda1: 0.5,
            lambda2: 2.0,
            seed: 5,
            ..FinetuneConfig::default()
        };
        let mut opt = make_optimizer(&model, &config, &data);
        let log = finetune_loop(&mut model, &data, &config, &mut opt).unwrap();
        assert_eq!(log.len(), 8);
        for (i, row) in log.iter().enumerate() {
            assert_eq!(row.epoch, i);
            assert!(row.train_loss.is_finite() && row.train_loss >= 0.0);
            assert!(row.val_metric.is_finite());
            assert!(row.wall_seconds >= 0.0);
        }
        assert!(
            log.last().unwrap().train_loss < log[0].train_loss,
            "training should reduce the loss on an easy synthetic set"
        );
    }

    #[test]
    fn loop_is_deterministic_up_to_wall_time() {
        let data = tiny_dataset(5, 4, 3, 4);
        let config = FinetuneConfig {
            epochs: 3,
            batch_size: 2,
            seed: 11,
            lambda2: 1.0,
            ..FinetuneConfig::default()
        };
        let run = || {
            let mut model = tiny_model(4, 3, 9);
            let mut opt = make_optimizer(&model, &config, &data);
            finetune_loop(&mut model, &data, &config, &mut opt).unwrap()
        };
        let (a, b) = (run(), run());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.epoch, y.epoch);
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
            assert_eq!(x.val_metric.to_bits(), y.val_metric.to_bits());
        }
    }

    #[test]
    fn loop_trains_the_action_task() {
        let data = tiny_dataset(6, 4, 3, 6);
        let mut model = tiny_model(4, 3, 13);
        let config = FinetuneConfig {
            epochs: 2,
            batch_size: 3,
            task: TaskKind::Action,
            seed: 2,
            ..FinetuneConfig::default()
        };
        let mut opt = make_optimizer(&model, &config, &data);
        let log = finetune_loop(&mut model, &data, &config, &mut opt).unwrap();
        assert_eq!(log.len(), 2);
        for row in &log {
            assert!((0.0..=100.0).contains(&row.val_metric));
        }
    }

    #[test]
    fn loop_rejects_empty_dataset_and_unlabeled_action_data() {
        let mut model = tiny_model(4, 3, 1);
        let config = FinetuneConfig::default();
        let mut opt = make_optimizer(&model, &config, &[]);
        assert!(matches!(
            finetune_loop(&mut model, &[], &config, &mut opt),
            Err(TrainError::BadConfig(_))
        ));

        let mut data = tiny_dataset(3, 4, 3, 7);
        for (input, target) in &mut data {
            input.action_label = None;
            target.action_label = None;
        }
        let config = FinetuneConfig {
            task: TaskKind::Action,
            epochs: 1,
            ..FinetuneConfig::default()
        };
        let mut opt = make_optimizer(&model, &config, &data);
        assert!(matches!(
            finetune_loop(&mut model, &data, &config, &mut opt),
            Err(TrainError::MissingLabel)
        ));
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let bad = [
            FinetuneConfig { lambda1: -1.0, ..FinetuneConfig::default() },
            FinetuneConfig { lambda2: f64::NAN, ..FinetuneConfig::default() },
            FinetuneConfig { epochs: 0, ..FinetuneConfig::default() },
            FinetuneConfig { batch_size: 0, ..FinetuneConfig::default() },
            FinetuneConfig { lr: 0.0, ..FinetuneConfig::default() },
            FinetuneConfig { lr: f64::INFINITY, ..FinetuneConfig::default() },
            FinetuneConfig { weight_decay: -0.1, ..FinetuneConfig::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "accepted {c:?}");
        }
        assert!(FinetuneConfig::default().validate().is_ok());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = FinetuneConfig {
            task: TaskKind::Action,
            nmpjpe_form: NmpjpeForm::Literal,
            init_checkpoint: Some("pre.ckpt".into()),
            ..FinetuneConfig::default()
        };
        let text = serde_json::to_string(&c).unwrap();
        assert!(text.contains("\"task\":\"action\""));
        assert!(text.contains("\"nmpjpe_form\":\"literal\""));
        let back: FinetuneConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.task, TaskKind::Action);
        assert_eq!(back.nmpjpe_form, NmpjpeForm::Literal);
        assert_eq!(back.init_checkpoint.as_deref(), Some("pre.ckpt"));
        // Unknown keys are configuration mistakes, not extensions.
        assert!(serde_json::from_str::<FinetuneConfig>("{\"lambda_one\":1}").is_err());
    }

    #[test]
    fn log_line_has_stable_field_order() {
        let row = EpochLog {
            epoch: 3,
            train_loss: 0.25,
            val_metric: 1.5,
            wall_seconds: 0.125,
        };
        let line = row.render(TaskKind::Pose3d);
        assert!(line.starts_with("epoch 3 train_loss 2.5"));
        assert!(line.contains("val_mpjpe 1.5"));
        assert!(line.ends_with("wall_seconds 0.125"));
        let line = row.render(TaskKind::Action);
        assert!(line.contains("val_top1"));
    }

    #[test]
    fn short_pose_run_descends_from_random_init() {
        // A quick end-to-end sanity run: a few steps on one batch must
        // strictly reduce the combined loss when starting from random init.
        let data = tiny_dataset(2, 4, 3, 8);
        let mut model = tiny_model(4, 3, 21);
        let config = FinetuneConfig {
            epochs: 6,
            batch_size: 2,
            lambda1: 0.5,
            lambda2: 2.0,
            lr: 1e-2,
            seed: 3,
            ..FinetuneConfig::default()
        };
        let mut opt = make_optimizer(&model, &config, &data);
        let log = finetune_loop(&mut model, &data, &config, &mut opt).unwrap();
        assert!(log.last().unwrap().train_loss < log[0].train_loss);
    }
}
