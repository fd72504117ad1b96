//! Pose sequences, skeleton topology, adjacency construction, the synthetic
//! motion generator, and dataset file I/O.
//!
//! Dataset files are line-oriented: one JSON object per line with fields
//! `id`, `frames`, `joints`, `pose2d` (T×J×3 nested arrays of x, y,
//! confidence), `pose3d` (T×J×3 of x, y, z), and `action` (int or null).
//! Floats are written with 17 significant digits so a write/read round trip
//! reproduces every tensor bit-exactly.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use ndarray::{Array2, ArrayD, Dimension, IxDyn};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::graph::Tensor;
use crate::rng::{derive_seed, stream, uniform};

// ---------------------------------------------------------------------------
// Topology
// ---------------------------------------------------------------------------

/// A skeleton: joint count, undirected bone edges, and the root joint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointTopology {
    pub joint_count: usize,
    pub root: usize,
    pub edges: Vec<(usize, usize)>,
}

impl JointTopology {
    /// Checks index ranges, self-edges, and duplicates.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.joint_count == 0 {
            return Err(DataError::BadTopology("joint_count must be positive".into()));
        }
        if self.root >= self.joint_count {
            return Err(DataError::BadTopology(format!(
                "root {} out of range for {} joints",
                self.root, self.joint_count
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for &(a, b) in &self.edges {
            if a >= self.joint_count || b >= self.joint_count {
                return Err(DataError::BadTopology(format!(
                    "edge ({a}, {b}) out of range for {} joints",
                    self.joint_count
                )));
            }
            if a == b {
                return Err(DataError::BadTopology(format!("self-edge at joint {a}")));
            }
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                return Err(DataError::BadTopology(format!(
                    "duplicate edge ({}, {})",
                    key.0, key.1
                )));
            }
        }
        Ok(())
    }

    /// Parent of each joint in the tree rooted at `root`, or an error when the
    /// edge graph is not a connected tree. `parents[root]` is `root` itself.
    pub fn tree_parents(&self) -> Result<Vec<usize>, DataError> {
        self.validate()?;
        if self.edges.len() + 1 != self.joint_count {
            return Err(DataError::BadTopology(format!(
                "a tree on {} joints needs {} edges, got {}",
                self.joint_count,
                self.joint_count - 1,
                self.edges.len()
            )));
        }
        let mut neighbors = vec![Vec::new(); self.joint_count];
        for &(a, b) in &self.edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        let mut parents = vec![usize::MAX; self.joint_count];
        parents[self.root] = self.root;
        let mut queue = VecDeque::from([self.root]);
        let mut reached = 1;
        while let Some(j) = queue.pop_front() {
            for &n in &neighbors[j] {
                if parents[n] == usize::MAX {
                    parents[n] = j;
                    reached += 1;
                    queue.push_back(n);
                }
            }
        }
        if reached != self.joint_count {
            return Err(DataError::BadTopology(format!(
                "graph is disconnected: {reached} of {} joints reachable from root",
                self.joint_count
            )));
        }
        Ok(parents)
    }

    /// Joints ordered root-first so every joint appears after its parent.
    pub fn topological_order(&self) -> Result<Vec<usize>, DataError> {
        let parents = self.tree_parents()?;
        let mut order = Vec::with_capacity(self.joint_count);
        let mut placed = vec![false; self.joint_count];
        order.push(self.root);
        placed[self.root] = true;
        while order.len() < self.joint_count {
            for j in 0..self.joint_count {
                if !placed[j] && placed[parents[j]] {
                    order.push(j);
                    placed[j] = true;
                }
            }
        }
        Ok(order)
    }
}

/// The conventional 17-joint Human3.6M skeleton tree, rooted at the pelvis.
pub fn default_h36m_topology() -> JointTopology {
    JointTopology {
        joint_count: 17,
        root: 0,
        edges: vec![
            (0, 1),
            (1, 2),
            (2, 3),
            (0, 4),
            (4, 5),
            (5, 6),
            (0, 7),
            (7, 8),
            (8, 9),
            (9, 10),
            (8, 11),
            (11, 12),
            (12, 13),
            (8, 14),
            (14, 15),
            (15, 16),
        ],
    }
}

/// A simple path skeleton 0-1-…-(j-1) for non-standard joint counts.
pub fn chain_topology(joints: usize) -> JointTopology {
    JointTopology {
        joint_count: joints,
        root: 0,
        edges: (1..joints).map(|j| (j - 1, j)).collect(),
    }
}

/// Loads a topology file: a JSON object with joint_count, root, and edges.
pub fn read_topology(path: &Path) -> Result<JointTopology, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let topo: JointTopology = serde_json::from_str(&text).map_err(|e| {
        DataError::BadTopology(format!("failed to parse {}: {e}", path.display()))
    })?;
    topo.validate()?;
    Ok(topo)
}

pub fn write_topology(path: &Path, topo: &JointTopology) -> Result<(), DataError> {
    let text = serde_json::to_string_pretty(topo).expect("topology serializes");
    std::fs::write(path, text).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

// ---------------------------------------------------------------------------
// Adjacency
// ---------------------------------------------------------------------------

/// Self-connected adjacency Ã = A + I and its symmetric normalization
/// D̃^{-1/2} Ã D̃^{-1/2}.
#[derive(Debug, Clone)]
pub struct AdjacencyMatrix {
    pub size: usize,
    pub a_tilde: Array2<f64>,
    pub a_norm: Array2<f64>,
}

fn normalize_adjacency(a_tilde: Array2<f64>) -> AdjacencyMatrix {
    let n = a_tilde.nrows();
    let mut inv_sqrt_deg = vec![0.0; n];
    for (i, slot) in inv_sqrt_deg.iter_mut().enumerate() {
        let deg: f64 = a_tilde.row(i).sum();
        *slot = 1.0 / deg.sqrt(); // diagonal is 1, so deg >= 1
    }
    let mut a_norm = a_tilde.clone();
    for ((i, j), v) in a_norm.indexed_iter_mut() {
        *v *= inv_sqrt_deg[i] * inv_sqrt_deg[j];
    }
    AdjacencyMatrix {
        size: n,
        a_tilde,
        a_norm,
    }
}

/// Adjacency over joints: Ã(i,j) = 1 iff (i,j) is a bone or i = j.
pub fn build_spatial_adjacency(topology: &JointTopology) -> Result<AdjacencyMatrix, DataError> {
    topology.validate()?;
    let j = topology.joint_count;
    let mut a = Array2::<f64>::eye(j);
    for &(u, v) in &topology.edges {
        a[[u, v]] = 1.0;
        a[[v, u]] = 1.0;
    }
    Ok(normalize_adjacency(a))
}

/// Adjacency over frames: each frame connects to its predecessor (and, by
/// symmetrization, its successor) plus a self-connection, giving a
/// tri-diagonal Ã with 3T−2 nonzeros.
pub fn build_temporal_adjacency(frames: usize) -> Result<AdjacencyMatrix, DataError> {
    if frames == 0 {
        return Err(DataError::InvalidArgument(
            "temporal adjacency needs at least one frame".into(),
        ));
    }
    let mut a = Array2::<f64>::eye(frames);
    for t in 1..frames {
        a[[t, t - 1]] = 1.0;
        a[[t - 1, t]] = 1.0;
    }
    Ok(normalize_adjacency(a))
}

// ---------------------------------------------------------------------------
// Pose sequences
// ---------------------------------------------------------------------------

/// Whether a sequence holds 2D detector input or 3D target coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoseKind {
    /// Channels are x, y in normalized image units and confidence in [0, 1].
    Input2d,
    /// Channels are x, y, z positions.
    Target3d,
}

/// A T×J×3 pose tensor with metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub frames: usize,
    pub joints: usize,
    pub kind: PoseKind,
    pub data: Tensor,
    pub action_label: Option<usize>,
}

impl PoseSequence {
    /// Builds a sequence after checking shape, finiteness, and (for 2D input)
    /// the confidence range. `record` names the source in error messages.
    pub fn new(
        kind: PoseKind,
        data: Tensor,
        action_label: Option<usize>,
        record: &str,
    ) -> Result<Self, DataError> {
        let shape = data.shape();
        if shape.len() != 3 || shape[2] != 3 || shape[0] == 0 || shape[1] == 0 {
            return Err(DataError::ShapeMismatch {
                record: record.to_string(),
                field: match kind {
                    PoseKind::Input2d => "pose2d".into(),
                    PoseKind::Target3d => "pose3d".into(),
                },
                expected: vec![shape.first().copied().unwrap_or(0), shape.get(1).copied().unwrap_or(0), 3],
                found: shape.to_vec(),
            });
        }
        let (frames, joints) = (shape[0], shape[1]);
        for (idx, &v) in data.indexed_iter() {
            if !v.is_finite() {
                return Err(DataError::NonFinite {
                    record: record.to_string(),
                    field: match kind {
                        PoseKind::Input2d => "pose2d".into(),
                        PoseKind::Target3d => "pose3d".into(),
                    },
                    index: idx.as_array_view().iter().copied().collect(),
                });
            }
            if kind == PoseKind::Input2d && idx[2] == 2 && !(0.0..=1.0).contains(&v) {
                return Err(DataError::ConfidenceRange {
                    record: record.to_string(),
                    value: v,
                    index: idx.as_array_view().iter().copied().collect(),
                });
            }
        }
        Ok(PoseSequence {
            frames,
            joints,
            kind,
            data,
            action_label,
        })
    }
}

/// One training sample: a 2D input sequence paired with its 3D target.
pub type SamplePair = (PoseSequence, PoseSequence);

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

// Motion bounds. Worst-case per-frame joint displacement is bounded by
// (tree depth) * (max bone length) * 2 * AMP_MAX * FREQ_MAX for the angular
// motion plus sqrt(3) * ROOT_AMP_MAX * FREQ_MAX for the root drift; with the
// H36M tree (depth 5) that is 5*0.4*2*0.4*0.1 + 0.018 < 0.18 < 0.2 units.
const BONE_MIN: f64 = 0.15;
const BONE_MAX: f64 = 0.4;
const AMP_MIN: f64 = 0.1;
const AMP_MAX: f64 = 0.4;
const FREQ_MIN: f64 = 0.02;
const FREQ_MAX: f64 = 0.10;
const ROOT_AMP_MIN: f64 = 0.02;
const ROOT_AMP_MAX: f64 = 0.1;
const ACTION_CLASSES: usize = 4;

/// The action id of a base frequency: its band within [FREQ_MIN, FREQ_MAX).
fn action_of_frequency(omega: f64) -> usize {
    let band = (omega - FREQ_MIN) / ((FREQ_MAX - FREQ_MIN) / ACTION_CLASSES as f64);
    (band as usize).min(ACTION_CLASSES - 1)
}

/// Generates smooth skeleton motions with constant bone lengths.
///
/// Each sequence animates the topology tree with per-joint sinusoidal joint
/// angles driven by one per-sequence base frequency (which also determines
/// the action label), plus a slow sinusoidal root trajectory. The 2D input is
/// the orthographic projection (x, y) with additive Gaussian noise and a
/// confidence channel that decays with the noise magnitude.
pub fn generate_synthetic_dataset(
    count: usize,
    frames: usize,
    topology: &JointTopology,
    noise_std: f64,
    seed: u64,
) -> Result<Vec<SamplePair>, DataError> {
    if count == 0 {
        return Err(DataError::InvalidArgument("count must be >= 1".into()));
    }
    if frames < 2 {
        return Err(DataError::InvalidArgument("frames must be >= 2".into()));
    }
    if noise_std < 0.0 {
        return Err(DataError::InvalidArgument("noise_std must be >= 0".into()));
    }
    let parents = topology.tree_parents()?;
    let order = topology.topological_order()?;
    let data_seed = derive_seed(seed, stream::DATA);

    (0..count)
        .map(|i| {
            // Per-sequence sub-seed: generation order and parallelism cannot
            // change any sequence's content.
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(data_seed, i as u64));
            Ok(generate_sequence(
                &format!("seq-{i:05}"),
                frames,
                topology,
                &parents,
                &order,
                noise_std,
                &mut rng,
            ))
        })
        .collect()
}

struct JointMotion {
    polar_base: f64,
    polar_amp: f64,
    polar_phase: f64,
    azimuth_base: f64,
    azimuth_amp: f64,
    azimuth_phase: f64,
}

fn generate_sequence(
    id: &str,
    frames: usize,
    topology: &JointTopology,
    parents: &[usize],
    order: &[usize],
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> SamplePair {
    let j = topology.joint_count;
    let omega = uniform(rng, FREQ_MIN, FREQ_MAX);
    let action = action_of_frequency(omega);

    let bone_len: Vec<f64> = (0..j).map(|_| uniform(rng, BONE_MIN, BONE_MAX)).collect();
    let motions: Vec<JointMotion> = (0..j)
        .map(|_| JointMotion {
            polar_base: uniform(rng, 0.4, std::f64::consts::PI - 0.4),
            polar_amp: uniform(rng, AMP_MIN, AMP_MAX),
            polar_phase: uniform(rng, 0.0, std::f64::consts::TAU),
            azimuth_base: uniform(rng, 0.0, std::f64::consts::TAU),
            azimuth_amp: uniform(rng, AMP_MIN, AMP_MAX),
            azimuth_phase: uniform(rng, 0.0, std::f64::consts::TAU),
        })
        .collect();
    let root_amp: [f64; 3] = std::array::from_fn(|_| uniform(rng, ROOT_AMP_MIN, ROOT_AMP_MAX));
    let root_phase: [f64; 3] = std::array::from_fn(|_| uniform(rng, 0.0, std::f64::consts::TAU));

    let mut pose3d = Tensor::zeros(IxDyn(&[frames, j, 3]));
    for t in 0..frames {
        let time = t as f64;
        let mut pos = vec![[0.0f64; 3]; j];
        pos[topology.root] =
            std::array::from_fn(|k| root_amp[k] * (omega * time + root_phase[k]).sin());
        for &joint in order.iter().skip(1) {
            let m = &motions[joint];
            let polar = m.polar_base + m.polar_amp * (omega * time + m.polar_phase).sin();
            let azimuth = m.azimuth_base + m.azimuth_amp * (omega * time + m.azimuth_phase).sin();
            let dir = [
                polar.sin() * azimuth.cos(),
                polar.sin() * azimuth.sin(),
                polar.cos(),
            ];
            let p = pos[parents[joint]];
            pos[joint] = std::array::from_fn(|k| p[k] + bone_len[joint] * dir[k]);
        }
        for joint in 0..j {
            for k in 0..3 {
                pose3d[[t, joint, k]] = pos[joint][k];
            }
        }
    }

    // Orthographic projection plus detector noise. Confidence decays with the
    // injected noise magnitude and is exactly 1 for a noise-free projection.
    let mut pose2d = Tensor::zeros(IxDyn(&[frames, j, 3]));
    for t in 0..frames {
        for joint in 0..j {
            let (nx, ny) = if noise_std > 0.0 {
                let a: f64 = StandardNormal.sample(rng);
                let b: f64 = StandardNormal.sample(rng);
                (a * noise_std, b * noise_std)
            } else {
                (0.0, 0.0)
            };
            pose2d[[t, joint, 0]] = pose3d[[t, joint, 0]] + nx;
            pose2d[[t, joint, 1]] = pose3d[[t, joint, 1]] + ny;
            pose2d[[t, joint, 2]] = if noise_std > 0.0 {
                ((-(nx * nx + ny * ny)) / (2.0 * noise_std * noise_std))
                    .exp()
                    .clamp(0.0, 1.0)
            } else {
                1.0
            };
        }
    }

    let input = PoseSequence::new(PoseKind::Input2d, pose2d, Some(action), id)
        .expect("generated 2d sequence is valid by construction");
    let target = PoseSequence::new(PoseKind::Target3d, pose3d, Some(action), id)
        .expect("generated 3d sequence is valid by construction");
    (input, target)
}

// ---------------------------------------------------------------------------
// Dataset file I/O
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    frames: usize,
    joints: usize,
    pose2d: Vec<Vec<Vec<f64>>>,
    pose3d: Vec<Vec<Vec<f64>>>,
    action: Option<usize>,
}

/// Appends one float with 17 significant digits (exact f64 round trip).
fn push_float(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("write to string");
}

fn push_tensor(out: &mut String, t: &Tensor) {
    let (frames, joints) = (t.shape()[0], t.shape()[1]);
    out.push('[');
    for f in 0..frames {
        if f > 0 {
            out.push(',');
        }
        out.push('[');
        for j in 0..joints {
            if j > 0 {
                out.push(',');
            }
            out.push('[');
            for c in 0..3 {
                if c > 0 {
                    out.push(',');
                }
                push_float(out, t[[f, j, c]]);
            }
            out.push(']');
        }
        out.push(']');
    }
    out.push(']');
}

/// Writes one record per line in the dataset format.
pub fn write_dataset(path: &Path, data: &[SamplePair]) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(file);
    for (i, (input, target)) in data.iter().enumerate() {
        let mut line = String::new();
        let id = format!("seq-{i:05}");
        write!(line, "{{\"id\":{}", serde_json::to_string(&id).unwrap()).unwrap();
        write!(line, ",\"frames\":{},\"joints\":{}", input.frames, input.joints).unwrap();
        line.push_str(",\"pose2d\":");
        push_tensor(&mut line, &input.data);
        line.push_str(",\"pose3d\":");
        push_tensor(&mut line, &target.data);
        match input.action_label {
            Some(a) => write!(line, ",\"action\":{a}}}").unwrap(),
            None => line.push_str(",\"action\":null}"),
        }
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn nested_to_tensor(
    nested: &[Vec<Vec<f64>>],
    frames: usize,
    joints: usize,
    record: &str,
    field: &str,
) -> Result<Tensor, DataError> {
    let mismatch = |found: Vec<usize>| DataError::ShapeMismatch {
        record: record.to_string(),
        field: field.to_string(),
        expected: vec![frames, joints, 3],
        found,
    };
    if nested.len() != frames {
        return Err(mismatch(vec![nested.len()]));
    }
    let mut t = Tensor::zeros(IxDyn(&[frames, joints, 3]));
    for (f, frame) in nested.iter().enumerate() {
        if frame.len() != joints {
            return Err(mismatch(vec![frames, frame.len()]));
        }
        for (j, joint) in frame.iter().enumerate() {
            if joint.len() != 3 {
                return Err(mismatch(vec![frames, joints, joint.len()]));
            }
            for (c, &v) in joint.iter().enumerate() {
                t[[f, j, c]] = v;
            }
        }
    }
    Ok(t)
}

/// Reads a dataset file, validating every record.
pub fn read_dataset(path: &Path) -> Result<Vec<SamplePair>, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| DataError::MalformedRecord {
                record: extract_id(&line),
                line: lineno + 1,
                message: e.to_string(),
            })?;
        if raw.frames == 0 || raw.joints == 0 {
            return Err(DataError::MalformedRecord {
                record: raw.id.clone(),
                line: lineno + 1,
                message: "frames and joints must be positive".into(),
            });
        }
        let pose2d = nested_to_tensor(&raw.pose2d, raw.frames, raw.joints, &raw.id, "pose2d")?;
        let pose3d = nested_to_tensor(&raw.pose3d, raw.frames, raw.joints, &raw.id, "pose3d")?;
        let input = PoseSequence::new(PoseKind::Input2d, pose2d, raw.action, &raw.id)?;
        let target = PoseSequence::new(PoseKind::Target3d, pose3d, raw.action, &raw.id)?;
        out.push((input, target));
    }
    if out.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    Ok(out)
}

/// Best-effort id extraction from an unparseable line, for diagnostics.
fn extract_id(line: &str) -> String {
    if let Some(start) = line.find("\"id\"") {
        let rest = &line[start + 4..];
        if let Some(q1) = rest.find('"') {
            if let Some(q2) = rest[q1 + 1..].find('"') {
                return rest[q1 + 1..q1 + 1 + q2].to_string();
            }
        }
    }
    "<unparsed>".to_string()
}

/// Stacks B sample inputs into one B×T×J×3 batch tensor.
pub fn batch_inputs(samples: &[&SamplePair]) -> Tensor {
    batch_of(samples, |p| &p.0.data)
}

/// Stacks B sample targets into one B×T×J×3 batch tensor.
pub fn batch_targets(samples: &[&SamplePair]) -> Tensor {
    batch_of(samples, |p| &p.1.data)
}

fn batch_of<'a>(samples: &[&'a SamplePair], pick: impl Fn(&'a SamplePair) -> &'a Tensor) -> Tensor {
    assert!(!samples.is_empty(), "batch must be non-empty");
    let first = pick(samples[0]).shape();
    let (t, j) = (first[0], first[1]);
    let mut out = ArrayD::zeros(IxDyn(&[samples.len(), t, j, 3]));
    for (b, s) in samples.iter().enumerate() {
        let d = pick(s);
        assert_eq!(d.shape(), first, "mixed sequence shapes in one batch");
        out.index_axis_mut(ndarray::Axis(0), b).assign(d);
    }
    out
}
