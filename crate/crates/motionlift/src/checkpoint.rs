//! Checkpoint files: a model, and optionally its distillation teacher,
//! serialized to a single self-describing binary artifact.
//!
//! Layout, front to back:
//!
//! 1. the 8-byte magic `MLFTCKP1`;
//! 2. a 4-byte little-endian header length;
//! 3. a JSON header holding the format version, the architecture
//!    configuration, the joint topology, the training step, a tensor table
//!    (name, shape, element offset), a SHA-256 digest of the payload, and —
//!    for pretraining checkpoints — the teacher's blend schedule and its own
//!    tensor table;
//! 4. the payload: every tensor as contiguous little-endian 32-bit floats,
//!    student tensors first, teacher tensors after.
//!
//! Tensors live in memory as f64 and are quantized to f32 on save. Every
//! f32 converts to f64 and back without loss, and the header carries no
//! timestamps, so saving, loading, and saving again reproduces the first
//! file byte for byte: a checkpoint is a pure function of the model state.
//!
//! Loading validates everything before any model is built: magic, header
//! syntax, format version, configuration and topology sanity, tensor-table
//! contiguity, payload length, payload digest, and finally the tensor table
//! against the layout the stored configuration implies. Corrupt files fail
//! with a description of what disagrees, never a panic.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::JointTopology;
use crate::error::{CheckpointError, TensorMismatch};
use crate::graph::Tensor;
use crate::network::{param_layout, Model, NetworkConfig};
use crate::params::ParamSet;
use crate::pretrain::TeacherState;

/// First eight bytes of every checkpoint file.
pub const MAGIC: &[u8; 8] = b"MLFTCKP1";

/// Current container revision; bumped on any layout change.
pub const FORMAT_VERSION: u32 = 1;

/// Namespace of the output heads. Backbone transfer skips tensors under it.
const HEAD_PREFIX: &str = "head.";

// ---------------------------------------------------------------------------
// Header structures
// ---------------------------------------------------------------------------

/// One payload tensor: its name, shape, and element (not byte) offset from
/// the start of the payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Teacher section of a pretraining checkpoint: the blend schedule plus the
/// teacher's tensor table. Teacher tensors follow the student's in the
/// payload, so their offsets continue where the student table ends.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TeacherRecord {
    tau_start: f64,
    tau_end: f64,
    step: usize,
    total_steps: usize,
    tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: NetworkConfig,
    topology: JointTopology,
    step: usize,
    tensors: Vec<TensorRecord>,
    /// Lowercase hex SHA-256 of the payload bytes.
    digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    teacher: Option<TeacherRecord>,
}

// ---------------------------------------------------------------------------
// Loaded form
// ---------------------------------------------------------------------------

/// The teacher stored alongside a pretraining checkpoint.
#[derive(Debug, Clone)]
pub struct TeacherSnapshot {
    pub params: ParamSet,
    pub tau_start: f64,
    pub tau_end: f64,
    pub step: usize,
    pub total_steps: usize,
}

/// A fully validated checkpoint: configuration, topology, training step,
/// and tensors, plus the teacher section when one was stored.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub topology: JointTopology,
    pub step: usize,
    pub params: ParamSet,
    pub teacher: Option<TeacherSnapshot>,
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Appends every tensor of `params` to the payload as little-endian f32 and
/// returns the matching table rows. `next_offset` counts elements across
/// calls so the teacher table continues after the student's.
fn push_tensors(
    params: &ParamSet,
    payload: &mut Vec<u8>,
    next_offset: &mut usize,
) -> Vec<TensorRecord> {
    params
        .iter()
        .map(|entry| {
            let record = TensorRecord {
                name: entry.name.clone(),
                shape: entry.value.shape().to_vec(),
                offset: *next_offset,
            };
            *next_offset += entry.value.len();
            payload.reserve(entry.value.len() * 4);
            for &v in entry.value.iter() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
            record
        })
        .collect()
}

/// Serializes a model, and optionally its teacher, to checkpoint bytes.
pub fn encode_checkpoint(model: &Model, step: usize, teacher: Option<&TeacherState>) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut next_offset = 0usize;
    let tensors = push_tensors(&model.params, &mut payload, &mut next_offset);
    let teacher = teacher.map(|t| TeacherRecord {
        tau_start: t.tau_start,
        tau_end: t.tau_end,
        step: t.step,
        total_steps: t.total_steps,
        tensors: push_tensors(&t.model.params, &mut payload, &mut next_offset),
    });
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        topology: model.topology.clone(),
        step,
        tensors,
        digest: hex::encode(Sha256::digest(&payload)),
        teacher,
    };
    let header_bytes =
        serde_json::to_vec(&header).expect("a checkpoint header always serializes");
    let header_len =
        u32::try_from(header_bytes.len()).expect("a checkpoint header fits in 4 GiB");
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header_bytes.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    out
}

/// Writes a checkpoint file. Pass the teacher for pretraining checkpoints;
/// finetuned and evaluated models store the student alone.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    step: usize,
    teacher: Option<&TeacherState>,
) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(model, step, teacher)).map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

fn bad(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::BadHeader(msg.into())
}

/// Requires each record to start exactly where the previous one ended;
/// `next` carries the running element count across the student and teacher
/// tables.
fn check_contiguity(records: &[TensorRecord], next: &mut usize) -> Result<(), CheckpointError> {
    for record in records {
        if record.offset != *next {
            return Err(bad(format!(
                "tensor {} stored at element offset {}, expected {}",
                record.name, record.offset, next
            )));
        }
        *next += record.shape.iter().product::<usize>();
    }
    Ok(())
}

/// Checks a tensor table against the layout the stored configuration
/// implies, then materializes the tensors in canonical model order.
/// Offsets must already be validated against the payload length.
fn decode_tensors(
    records: &[TensorRecord],
    layout: &[(String, Vec<usize>, bool)],
    payload: &[u8],
) -> Result<ParamSet, CheckpointError> {
    let mut by_name: HashMap<&str, &TensorRecord> = HashMap::new();
    for record in records {
        if by_name.insert(record.name.as_str(), record).is_some() {
            return Err(bad(format!("duplicate tensor {}", record.name)));
        }
    }
    let mut mismatch = TensorMismatch::default();
    for (name, shape, _) in layout {
        match by_name.get(name.as_str()) {
            None => mismatch.missing.push(name.clone()),
            Some(record) if &record.shape != shape => {
                mismatch
                    .shape
                    .push((name.clone(), shape.clone(), record.shape.clone()));
            }
            Some(_) => {}
        }
    }
    let known: HashSet<&str> = layout.iter().map(|(name, _, _)| name.as_str()).collect();
    for record in records {
        if !known.contains(record.name.as_str()) {
            mismatch.unexpected.push(record.name.clone());
        }
    }
    if !mismatch.is_empty() {
        return Err(CheckpointError::TensorMismatch(mismatch));
    }

    let mut params = ParamSet::new();
    for (name, shape, trainable) in layout {
        let record = by_name[name.as_str()];
        let len: usize = shape.iter().product();
        let bytes = &payload[record.offset * 4..(record.offset + len) * 4];
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let tensor = Tensor::from_shape_vec(IxDyn(shape), data)
            .expect("shape and element count agree by construction");
        params.insert(name.clone(), tensor, *trainable);
    }
    Ok(params)
}

/// Parses and fully validates checkpoint bytes.
pub fn decode_checkpoint(data: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if data.len() < MAGIC.len() || &data[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if data.len() < MAGIC.len() + 4 {
        return Err(bad("file ends before the header length"));
    }
    let header_len = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + header_len;
    if header_end > data.len() {
        return Err(bad(format!(
            "header claims {} bytes but only {} remain",
            header_len,
            data.len() - 12
        )));
    }
    let header: Header =
        serde_json::from_slice(&data[12..header_end]).map_err(|e| bad(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported format version {} (this build reads {})",
            header.format_version, FORMAT_VERSION
        )));
    }
    header
        .config
        .validate()
        .map_err(|e| bad(format!("stored config: {e}")))?;
    header
        .topology
        .validate()
        .map_err(|e| bad(format!("stored topology: {e}")))?;
    if header.topology.joint_count != header.config.joints {
        return Err(bad(format!(
            "stored topology has {} joints but the config says {}",
            header.topology.joint_count, header.config.joints
        )));
    }

    let payload = &data[header_end..];
    let mut total_elements = 0usize;
    check_contiguity(&header.tensors, &mut total_elements)?;
    if let Some(t) = &header.teacher {
        check_contiguity(&t.tensors, &mut total_elements)?;
    }
    if payload.len() != total_elements * 4 {
        return Err(bad(format!(
            "payload holds {} bytes but the tensor table implies {}",
            payload.len(),
            total_elements * 4
        )));
    }
    let computed = hex::encode(Sha256::digest(payload));
    if computed != header.digest {
        return Err(CheckpointError::DigestMismatch {
            stored: header.digest,
            computed,
        });
    }

    let layout = param_layout(&header.config);
    let params = decode_tensors(&header.tensors, &layout, payload)?;
    let teacher = match &header.teacher {
        None => None,
        Some(t) => Some(TeacherSnapshot {
            params: decode_tensors(&t.tensors, &layout, payload)?,
            tau_start: t.tau_start,
            tau_end: t.tau_end,
            step: t.step,
            total_steps: t.total_steps,
        }),
    };
    Ok(Checkpoint {
        config: header.config,
        topology: header.topology,
        step: header.step,
        params,
        teacher,
    })
}

/// Reads and fully validates a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let data = fs::read(path).map_err(|e| io_err(path, e))?;
    decode_checkpoint(&data)
}

// ---------------------------------------------------------------------------
// Rebuilding models
// ---------------------------------------------------------------------------

/// Rebuilds a runnable model from a loaded checkpoint.
pub fn restore_model(ckpt: &Checkpoint) -> Result<Model, CheckpointError> {
    Model::from_params(ckpt.config.clone(), &ckpt.topology, ckpt.params.clone())
        .map_err(|e| bad(format!("stored model is unusable: {e}")))
}

/// Rebuilds the distillation teacher stored alongside a pretraining
/// checkpoint, or `None` when the file holds a student alone.
pub fn restore_teacher(ckpt: &Checkpoint) -> Result<Option<TeacherState>, CheckpointError> {
    let Some(snapshot) = &ckpt.teacher else {
        return Ok(None);
    };
    let model = Model::from_params(ckpt.config.clone(), &ckpt.topology, snapshot.params.clone())
        .map_err(|e| bad(format!("stored teacher is unusable: {e}")))?;
    Ok(Some(TeacherState {
        model,
        tau_start: snapshot.tau_start,
        tau_end: snapshot.tau_end,
        step: snapshot.step,
        total_steps: snapshot.total_steps,
    }))
}

/// Copies every backbone tensor — anything outside the `head.` namespace,
/// frozen batch-norm statistics included — from a checkpoint into `model`,
/// leaving the model's freshly initialized heads untouched. The checkpoint
/// may come from a model with different heads or a different frame count;
/// everything else must line up, and any disagreement is reported by tensor
/// name without modifying the model. Returns the number of tensors copied.
pub fn load_backbone(model: &mut Model, ckpt: &Checkpoint) -> Result<usize, CheckpointError> {
    let mut mismatch = TensorMismatch::default();
    let mut moves: Vec<(usize, Tensor)> = Vec::new();
    for (idx, entry) in model.params.iter().enumerate() {
        if entry.name.starts_with(HEAD_PREFIX) {
            continue;
        }
        match ckpt.params.get(&entry.name) {
            None => mismatch.missing.push(entry.name.clone()),
            Some(stored) if stored.shape() != entry.value.shape() => {
                mismatch.shape.push((
                    entry.name.clone(),
                    entry.value.shape().to_vec(),
                    stored.shape().to_vec(),
                ));
            }
            Some(stored) => moves.push((idx, stored.clone())),
        }
    }
    for entry in ckpt.params.iter() {
        if !entry.name.starts_with(HEAD_PREFIX) && model.params.index_of(&entry.name).is_none() {
            mismatch.unexpected.push(entry.name.clone());
        }
    }
    if !mismatch.is_empty() {
        return Err(CheckpointError::TensorMismatch(mismatch));
    }
    let copied = moves.len();
    for (idx, value) in moves {
        model.params.set_value(idx, value);
    }
    Ok(copied)
}
