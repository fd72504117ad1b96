//! Evaluation metrics: position error, Procrustes-aligned position error,
//! correct-keypoint percentages, area under the PCK curve, classification
//! accuracy, and dataset-level aggregation.
//!
//! All functions here are pure tensor computations (no gradients). Position
//! metrics are reported in the coordinate units of the data; thresholded
//! metrics default to the usual millimeter conventions (150 mm PCK threshold,
//! AUC over thresholds 5, 10, …, 150).

use std::collections::BTreeMap;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Axis};

use crate::data::SamplePair;
use crate::error::MetricError;
use crate::graph::Tensor;
use crate::network::{ForwardMode, Model, RunMode};

/// Default strict threshold for the percentage of correct keypoints.
pub const PCK_THRESHOLD_DEFAULT: f64 = 150.0;

/// The AUC threshold grid: 5, 10, …, 150 (30 values).
///
/// The grid deliberately starts at 5, not 0: a perfect prediction must score
/// 100, and a zero threshold can never be satisfied by a strict comparison.
pub fn auc_thresholds() -> Vec<f64> {
    (1..=30).map(|i| 5.0 * i as f64).collect()
}

/// Evaluation protocol selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Mean per-joint position error.
    P1,
    /// Procrustes-aligned mean per-joint position error.
    P2,
    /// Percentage of correct keypoints at the default threshold.
    Pck,
    /// Area under the PCK curve.
    Auc,
    /// Top-1 action classification accuracy.
    Action,
}

impl Protocol {
    /// The metric name used in reports.
    pub fn metric_name(self) -> &'static str {
        match self {
            Protocol::P1 => "mpjpe",
            Protocol::P2 => "pmpjpe",
            Protocol::Pck => "pck",
            Protocol::Auc => "auc",
            Protocol::Action => "top1",
        }
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "p1" => Ok(Protocol::P1),
            "p2" => Ok(Protocol::P2),
            "pck" => Ok(Protocol::Pck),
            "auc" => Ok(Protocol::Auc),
            "action" => Ok(Protocol::Action),
            other => Err(format!(
                "unknown protocol {other:?}; expected p1, p2, pck, auc, or action"
            )),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Protocol::P1 => "p1",
            Protocol::P2 => "p2",
            Protocol::Pck => "pck",
            Protocol::Auc => "auc",
            Protocol::Action => "action",
        };
        f.write_str(s)
    }
}

// ---------------------------------------------------------------------------
// Per-sequence metrics
// ---------------------------------------------------------------------------

fn check_pose_pair(pred: &Tensor, gt: &Tensor) -> Result<(usize, usize), MetricError> {
    let (p, g) = (pred.shape(), gt.shape());
    if p != g || p.len() != 3 || p[2] != 3 || p[0] == 0 || p[1] == 0 {
        return Err(MetricError::ShapeMismatch {
            pred: p.to_vec(),
            gt: g.to_vec(),
        });
    }
    Ok((p[0], p[1]))
}

/// Euclidean error of every joint: a `[T, J]` table.
fn joint_errors(pred: &Tensor, gt: &Tensor) -> Result<Array2<f64>, MetricError> {
    let (frames, joints) = check_pose_pair(pred, gt)?;
    let mut errors = Array2::zeros((frames, joints));
    for t in 0..frames {
        for j in 0..joints {
            let mut sq = 0.0;
            for c in 0..3 {
                let d = pred[[t, j, c]] - gt[[t, j, c]];
                sq += d * d;
            }
            errors[[t, j]] = sq.sqrt();
        }
    }
    Ok(errors)
}

/// Mean per-joint position error over a `[T, J, 3]` pair.
pub fn metric_mpjpe(pred: &Tensor, gt: &Tensor) -> Result<f64, MetricError> {
    let errors = joint_errors(pred, gt)?;
    Ok(errors.mean().expect("non-empty by construction"))
}

/// Optimal similarity alignment of one frame: returns
/// `s·R·(pred − pred_centroid) + gt_centroid` where the proper rotation `R`
/// and scale `s` minimize the Frobenius error against `gt`.
///
/// Both tensors are `[J, 3]`. A prediction whose joints all coincide aligns
/// to the ground-truth centroid; coincident ground-truth joints are an error
/// because every rotation fits them equally well.
pub fn procrustes_align(pred: &Tensor, gt: &Tensor) -> Result<Tensor, MetricError> {
    let (p, g) = (pred.shape(), gt.shape());
    if p != g || p.len() != 2 || p[1] != 3 || p[0] < 3 {
        return Err(MetricError::ShapeMismatch {
            pred: p.to_vec(),
            gt: g.to_vec(),
        });
    }
    let joints = p[0];

    let centroid = |x: &Tensor| -> [f64; 3] {
        let mut c = [0.0; 3];
        for j in 0..joints {
            for (k, ck) in c.iter_mut().enumerate() {
                *ck += x[[j, k]];
            }
        }
        c.map(|v| v / joints as f64)
    };
    let cp = centroid(pred);
    let cg = centroid(gt);

    // Centered copies and their total squared norms.
    let mut x = Array2::<f64>::zeros((joints, 3));
    let mut y = Array2::<f64>::zeros((joints, 3));
    let (mut x_norm, mut y_norm) = (0.0, 0.0);
    for j in 0..joints {
        for k in 0..3 {
            x[[j, k]] = pred[[j, k]] - cp[k];
            y[[j, k]] = gt[[j, k]] - cg[k];
            x_norm += x[[j, k]] * x[[j, k]];
            y_norm += y[[j, k]] * y[[j, k]];
        }
    }
    if y_norm == 0.0 {
        return Err(MetricError::DegenerateAlignment);
    }

    let mut aligned = Tensor::zeros(ndarray::IxDyn(&[joints, 3]));
    if x_norm == 0.0 {
        // Every prediction point sits on the centroid; the best similarity
        // transform maps them all onto the ground-truth centroid.
        for j in 0..joints {
            for k in 0..3 {
                aligned[[j, k]] = cg[k];
            }
        }
        return Ok(aligned);
    }

    // Cross-covariance H = Xᵀ·Y, its singular decomposition, and the
    // determinant-corrected rotation R = V·D·Uᵀ with D = diag(1, 1, ±1).
    let h = Matrix3::from_fn(|r, c| {
        let mut acc = 0.0;
        for j in 0..joints {
            acc += x[[j, r]] * y[[j, c]];
        }
        acc
    });
    let svd = h.svd(true, true);
    let u = svd.u.expect("3x3 singular decomposition");
    let v_t = svd.v_t.expect("3x3 singular decomposition");
    let sign = if (v_t.transpose() * u.transpose()).determinant() < 0.0 {
        -1.0
    } else {
        1.0
    };
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign));
    let r = v_t.transpose() * d * u.transpose();
    // Singular values arrive sorted descending, so the sign correction is
    // applied to the smallest one, which is the optimal choice.
    let sv = svd.singular_values;
    let scale = (sv[0] + sv[1] + sign * sv[2]) / x_norm;

    for j in 0..joints {
        for k in 0..3 {
            let mut rot = 0.0;
            for m in 0..3 {
                rot += r[(k, m)] * x[[j, m]];
            }
            aligned[[j, k]] = scale * rot + cg[k];
        }
    }
    Ok(aligned)
}

/// Procrustes-aligned position error: every frame is aligned independently,
/// then the per-joint errors are averaged exactly as in [`metric_mpjpe`].
pub fn metric_pmpjpe(pred: &Tensor, gt: &Tensor) -> Result<f64, MetricError> {
    let (frames, joints) = check_pose_pair(pred, gt)?;
    let mut total = 0.0;
    for t in 0..frames {
        let pf = pred.index_axis(Axis(0), t).to_owned().into_dyn();
        let gf = gt.index_axis(Axis(0), t).to_owned().into_dyn();
        let aligned = procrustes_align(&pf, &gf)?;
        for j in 0..joints {
            let mut sq = 0.0;
            for c in 0..3 {
                let d = aligned[[j, c]] - gf[[j, c]];
                sq += d * d;
            }
            total += sq.sqrt();
        }
    }
    Ok(total / (frames * joints) as f64)
}

/// Percentage of joints whose error is strictly below `threshold`.
pub fn metric_pck(pred: &Tensor, gt: &Tensor, threshold: f64) -> Result<f64, MetricError> {
    if !(threshold.is_finite() && threshold > 0.0) {
        return Err(MetricError::InvalidArgument(format!(
            "pck threshold must be finite and positive, got {threshold}"
        )));
    }
    let errors = joint_errors(pred, gt)?;
    let hits = errors.iter().filter(|&&e| e < threshold).count();
    Ok(100.0 * hits as f64 / errors.len() as f64)
}

/// Mean PCK over the standard threshold grid (see [`auc_thresholds`]).
pub fn metric_auc(pred: &Tensor, gt: &Tensor) -> Result<f64, MetricError> {
    let errors = joint_errors(pred, gt)?;
    let grid = auc_thresholds();
    let mut acc = 0.0;
    for threshold in &grid {
        let hits = errors.iter().filter(|&&e| e < *threshold).count();
        acc += 100.0 * hits as f64 / errors.len() as f64;
    }
    Ok(acc / grid.len() as f64)
}

/// Percentage of rows whose argmax matches the label. Ties resolve to the
/// lowest class index, so the result is deterministic.
pub fn metric_top1(logits: &Tensor, labels: &[usize]) -> Result<f64, MetricError> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || s[1] == 0 {
        return Err(MetricError::ShapeMismatch {
            pred: s.to_vec(),
            gt: vec![labels.len()],
        });
    }
    let classes = s[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(MetricError::InvalidArgument(format!(
            "label {bad} is outside [0, {classes})"
        )));
    }
    let mut hits = 0usize;
    for (row, &label) in logits.axis_iter(Axis(0)).zip(labels) {
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

// ---------------------------------------------------------------------------
// Dataset-level evaluation
// ---------------------------------------------------------------------------

/// Aggregated evaluation results: the overall (frame-weighted) value per
/// metric, the same breakdown per action label, and the dataset size.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub overall: BTreeMap<String, f64>,
    pub per_action: BTreeMap<usize, BTreeMap<String, f64>>,
    pub sequence_count: usize,
    pub frame_count: usize,
}

impl std::fmt::Display for EvalReport {
    /// Line-oriented rendering with a stable field order: one row per action
    /// label, then the overall average and the dataset size.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "protocol {}", self.protocol)?;
        let name = self.protocol.metric_name();
        for (action, metrics) in &self.per_action {
            writeln!(f, "action {} {} {:.6}", action, name, metrics[name])?;
        }
        writeln!(f, "overall {} {:.6}", name, self.overall[name])?;
        writeln!(f, "sequences {}", self.sequence_count)?;
        write!(f, "frames {}", self.frame_count)
    }
}

/// Frame-weighted mean of per-sequence values.
fn weighted_mean(values: &[(f64, usize)]) -> f64 {
    let total: usize = values.iter().map(|(_, w)| w).sum();
    let acc: f64 = values.iter().map(|(v, w)| v * *w as f64).sum();
    acc / total as f64
}

/// Runs the model over every sequence in eval mode and aggregates the
/// protocol's metric, overall and per action label, weighting each sequence
/// by its frame count.
pub fn evaluate(
    model: &Model,
    dataset: &[SamplePair],
    protocol: Protocol,
) -> Result<EvalReport, MetricError> {
    if dataset.is_empty() {
        return Err(MetricError::EmptyDataset);
    }
    let name = protocol.metric_name().to_string();
    // (value, frames) per sequence plus the action label when present.
    let mut rows: Vec<(f64, usize, Option<usize>)> = Vec::with_capacity(dataset.len());
    let mut frame_count = 0usize;

    for (input, target) in dataset {
        frame_count += input.frames;
        let x = input.data.clone().insert_axis(Axis(0));
        let value = match protocol {
            Protocol::Action => {
                let label = target.action_label.or(input.action_label).ok_or_else(|| {
                    MetricError::ProtocolMismatch {
                        protocol: "action".into(),
                        reason: "a sequence has no action label".into(),
                    }
                })?;
                let pass = model.forward(&x, ForwardMode::Action, RunMode::Eval)?;
                let logits = pass.tape.value(pass.output).clone();
                metric_top1(&logits, &[label])?
            }
            _ => {
                let pass = model.forward(&x, ForwardMode::Pose, RunMode::Eval)?;
                let pred = pass
                    .tape
                    .value(pass.output)
                    .index_axis(Axis(0), 0)
                    .to_owned()
                    .into_dyn();
                let gt = &target.data;
                match protocol {
                    Protocol::P1 => metric_mpjpe(&pred, gt)?,
                    Protocol::P2 => metric_pmpjpe(&pred, gt)?,
                    Protocol::Pck => metric_pck(&pred, gt, PCK_THRESHOLD_DEFAULT)?,
                    Protocol::Auc => metric_auc(&pred, gt)?,
                    Protocol::Action => unreachable!(),
                }
            }
        };
        rows.push((value, input.frames, target.action_label.or(input.action_label)));
    }

    let overall = weighted_mean(
        &rows
            .iter()
            .map(|&(v, w, _)| (v, w))
            .collect::<Vec<_>>(),
    );
    let mut by_action: BTreeMap<usize, Vec<(f64, usize)>> = BTreeMap::new();
    for &(v, w, action) in &rows {
        if let Some(a) = action {
            by_action.entry(a).or_default().push((v, w));
        }
    }
    let per_action = by_action
        .into_iter()
        .map(|(a, vals)| {
            let mut m = BTreeMap::new();
            m.insert(name.clone(), weighted_mean(&vals));
            (a, m)
        })
        .collect();
    let mut overall_map = BTreeMap::new();
    overall_map.insert(name, overall);

    Ok(EvalReport {
        protocol,
        overall: overall_map,
        per_action,
        sequence_count: dataset.len(),
        frame_count,
    })
}
