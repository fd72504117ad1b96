//! The dual-stream pose-lifting network.
//!
//! The model embeds per-joint 2D detections into d-dimensional tokens, adds a
//! learned per-joint position embedding, and refines the tokens through N
//! blocks. Each block runs two parallel streams over the same input — a
//! Transformer stream (spatial self-attention across joints, then temporal
//! self-attention across frames) and a graph-convolution stream (spatial
//! skeleton graph, then temporal chain graph) — and blends the two stream
//! outputs token-by-token with a learned softmax gate. Small task heads map
//! the final features to 3D coordinates, action logits, or a d-dimensional
//! regression target.
//!
//! Every block is exposed both as a free function over explicit weight
//! handles (so tests can pin weights to hand values) and through [`Model`],
//! which binds the named [`ParamSet`] entries onto a [`Tape`] and wires the
//! full forward pass.

use ndarray::{Array2, IxDyn};
use serde::{Deserialize, Serialize};

use crate::data::{
    build_spatial_adjacency, build_temporal_adjacency, AdjacencyMatrix, JointTopology,
};
use crate::error::NetworkError;
use crate::graph::{BatchStats, Tape, Tensor, Var};
use crate::params::ParamSet;
use crate::rng::{self, stream};

/// Standard deviation of the truncated-normal weight initialization.
pub const INIT_STD: f64 = 0.02;
/// Momentum of the batch-norm running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Architecture hyperparameters.
///
/// `layers` is the block count N, `dim` the token width d, `heads` the
/// attention head count h (must divide d), and `mlp_ratio` the hidden-width
/// multiplier r of the feed-forward sublayers. `frames` and `joints` fix the
/// input sequence geometry. `action_classes` enables the classification head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub frames: usize,
    pub joints: usize,
    pub action_classes: Option<usize>,
}

impl Default for NetworkConfig {
    /// The base-model scale: 16 blocks of width 128 with 8 heads over
    /// 243-frame, 17-joint sequences.
    fn default() -> Self {
        Self {
            layers: 16,
            dim: 128,
            heads: 8,
            mlp_ratio: 4,
            frames: 243,
            joints: 17,
            action_classes: None,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |msg: String| Err(NetworkError::BadConfig(msg));
        if self.layers == 0 {
            return bad("layers must be >= 1".into());
        }
        if self.dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("dim, heads, and mlp_ratio must be >= 1".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "heads ({}) must divide dim ({})",
                self.heads, self.dim
            ));
        }
        if self.frames == 0 || self.joints == 0 {
            return bad("frames and joints must be >= 1".into());
        }
        if self.action_classes == Some(0) {
            return bad("action_classes must be >= 1 when present".into());
        }
        Ok(())
    }

    /// Width of one attention head.
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
    trainable: bool,
}

fn push_ln(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    specs.push(ParamSpec {
        name: format!("{prefix}.gain"),
        shape: vec![d],
        init: Init::Ones,
        trainable: true,
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: vec![d],
        init: Init::Zeros,
        trainable: true,
    });
}

fn push_linear(specs: &mut Vec<ParamSpec>, prefix: &str, rows: usize, cols: usize) {
    specs.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: vec![rows, cols],
        init: Init::TruncNormal,
        trainable: true,
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: vec![cols],
        init: Init::Zeros,
        trainable: true,
    });
}

fn push_mlp(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize, ratio: usize) {
    specs.push(ParamSpec {
        name: format!("{prefix}.w1"),
        shape: vec![d, d * ratio],
        init: Init::TruncNormal,
        trainable: true,
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.b1"),
        shape: vec![d * ratio],
        init: Init::Zeros,
        trainable: true,
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.w2"),
        shape: vec![d * ratio, d],
        init: Init::TruncNormal,
        trainable: true,
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.b2"),
        shape: vec![d],
        init: Init::Zeros,
        trainable: true,
    });
}

/// One attention sub-block: pre-norm, four d×d projections, post-norm MLP.
fn push_attn_sub_block(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize, ratio: usize) {
    push_ln(specs, &format!("{prefix}.ln1"), d);
    for w in ["wq", "wk", "wv", "wo"] {
        specs.push(ParamSpec {
            name: format!("{prefix}.attn.{w}"),
            shape: vec![d, d],
            init: Init::TruncNormal,
            trainable: true,
        });
    }
    push_ln(specs, &format!("{prefix}.ln2"), d);
    push_mlp(specs, &format!("{prefix}.mlp"), d, ratio);
}

/// One graph sub-block: two d×d mixing weights, batch norm, post-norm MLP.
fn push_gcn_sub_block(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize, ratio: usize) {
    for w in ["w1", "w2"] {
        specs.push(ParamSpec {
            name: format!("{prefix}.{w}"),
            shape: vec![d, d],
            init: Init::TruncNormal,
            trainable: true,
        });
    }
    specs.push(ParamSpec {
        name: format!("{prefix}.bn.gain"),
        shape: vec![d],
        init: Init::Ones,
        trainable: true,
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.bn.bias"),
        shape: vec![d],
        init: Init::Zeros,
        trainable: true,
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.bn.running_mean"),
        shape: vec![d],
        init: Init::Zeros,
        trainable: false,
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.bn.running_var"),
        shape: vec![d],
        init: Init::Ones,
        trainable: false,
    });
    push_ln(specs, &format!("{prefix}.ln"), d);
    push_mlp(specs, &format!("{prefix}.mlp"), d, ratio);
}

/// The full ordered parameter layout for a configuration.
///
/// Initialization draws, checkpoint payload order, and optimizer state all
/// follow this order, so it is part of the on-disk contract.
fn param_specs(config: &NetworkConfig) -> Vec<ParamSpec> {
    let d = config.dim;
    let r = config.mlp_ratio;
    let mut specs = Vec::new();
    push_linear(&mut specs, "embed", 3, d);
    specs.push(ParamSpec {
        name: "spatial_pos".into(),
        shape: vec![1, config.joints, d],
        init: Init::TruncNormal,
        trainable: true,
    });
    for i in 0..config.layers {
        push_attn_sub_block(&mut specs, &format!("layers.{i}.tr.spatial"), d, r);
        push_attn_sub_block(&mut specs, &format!("layers.{i}.tr.temporal"), d, r);
        push_gcn_sub_block(&mut specs, &format!("layers.{i}.gcn.spatial"), d, r);
        push_gcn_sub_block(&mut specs, &format!("layers.{i}.gcn.temporal"), d, r);
        push_linear(&mut specs, &format!("layers.{i}.fuse"), 2 * d, 2);
    }
    push_linear(&mut specs, "head.pose", d, 3);
    push_linear(&mut specs, "head.pretrain", d, d);
    if let Some(classes) = config.action_classes {
        push_linear(&mut specs, "head.action", d, classes);
    }
    specs
}

/// The full tensor layout a configuration implies, in model order:
/// `(name, shape, trainable)` per tensor. Checkpoint loading validates
/// stored tensors against this before a model is rebuilt.
pub(crate) fn param_layout(config: &NetworkConfig) -> Vec<(String, Vec<usize>, bool)> {
    param_specs(config)
        .into_iter()
        .map(|s| (s.name, s.shape, s.trainable))
        .collect()
}

/// Number of trainable scalars implied by a configuration.
pub fn expected_param_count(config: &NetworkConfig) -> usize {
    param_specs(config)
        .iter()
        .filter(|s| s.trainable)
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

/// Draws a fresh parameter set: truncated-normal weights, zero biases, unit
/// norm gains. The draw order is the parameter order, so a seed pins every
/// tensor.
pub fn init_params(config: &NetworkConfig, seed: u64) -> ParamSet {
    let mut rng = rng::stream_rng(seed, stream::INIT);
    let mut params = ParamSet::new();
    for spec in param_specs(config) {
        let value = match spec.init {
            Init::TruncNormal => rng::truncated_normal_tensor(&mut rng, &spec.shape, INIT_STD),
            Init::Zeros => Tensor::zeros(IxDyn(&spec.shape)),
            Init::Ones => Tensor::from_elem(IxDyn(&spec.shape), 1.0),
        };
        params.insert(spec.name, value, spec.trainable);
    }
    params
}

// ---------------------------------------------------------------------------
// Block primitives over explicit weight handles
// ---------------------------------------------------------------------------

/// Layer-norm gain/bias pair.
#[derive(Debug, Clone, Copy)]
pub struct LnWeights {
    pub gain: Var,
    pub bias: Var,
}

/// The four projection matrices of one attention sub-block.
#[derive(Debug, Clone, Copy)]
pub struct AttnWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Two-layer feed-forward weights (d → rd → d).
#[derive(Debug, Clone, Copy)]
pub struct MlpWeights {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Batch-norm behavior inside [`gcn_layer`].
pub enum BnMode<'a> {
    /// Normalize with batch statistics and report them to the caller.
    Train,
    /// Normalize with frozen running statistics.
    Eval {
        running_mean: &'a Tensor,
        running_var: &'a Tensor,
    },
}

/// Layer norm followed by the learned gain and bias.
pub fn layer_norm_affine(t: &mut Tape, x: Var, w: &LnWeights) -> Var {
    let n = t.layer_norm(x);
    let n = t.mul_bias(n, w.gain);
    t.add_bias(n, w.bias)
}

/// Token-wise feed-forward: linear, GELU, linear. Shape-preserving except for
/// the channel width, which follows `w2`.
pub fn mlp(t: &mut Tape, x: Var, w: &MlpWeights) -> Var {
    let shape = t.shape(x).to_vec();
    let d = *shape.last().expect("mlp input must have a channel axis");
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let flat = t.reshape(x, &[rows, d]);
    let h = t.matmul(flat, w.w1);
    let h = t.add_bias(h, w.b1);
    let h = t.gelu(h);
    let o = t.matmul(h, w.w2);
    let o = t.add_bias(o, w.b2);
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = t.shape(o)[1];
    t.reshape(o, &out_shape)
}

/// Multi-head self-attention over `f: [groups, tokens, d]`.
///
/// Each group attends independently. Heads split the channel axis; logits are
/// scaled by 1/sqrt(d/h). `layer` and `module` label the error when logits
/// go non-finite.
pub fn multi_head_attention(
    t: &mut Tape,
    f: Var,
    w: &AttnWeights,
    heads: usize,
    layer: usize,
    module: &str,
) -> Result<Var, NetworkError> {
    let shape = t.shape(f).to_vec();
    assert_eq!(shape.len(), 3, "attention wants [groups, tokens, channels]");
    let (g, n, d) = (shape[0], shape[1], shape[2]);
    assert_eq!(d % heads, 0, "heads must divide the channel width");
    let dh = d / heads;

    fn project(t: &mut Tape, flat: Var, w: Var, g: usize, n: usize, heads: usize, dh: usize) -> Var {
        let p = t.matmul(flat, w);
        let p = t.reshape(p, &[g, n, heads, dh]);
        let p = t.permute(p, &[0, 2, 1, 3]);
        t.reshape(p, &[g * heads, n, dh])
    }

    let flat = t.reshape(f, &[g * n, d]);
    let q = project(t, flat, w.wq, g, n, heads, dh);
    let k = project(t, flat, w.wk, g, n, heads, dh);
    let v = project(t, flat, w.wv, g, n, heads, dh);

    let logits = t.bmm_nt(q, k);
    let logits = t.scale(logits, 1.0 / (dh as f64).sqrt());
    if t.value(logits).iter().any(|e| !e.is_finite()) {
        return Err(NetworkError::NonFiniteLogits {
            layer,
            module: module.to_string(),
        });
    }
    let attn = t.softmax_last(logits);
    let ctx = t.bmm(attn, v);
    let ctx = t.reshape(ctx, &[g, heads, n, dh]);
    let ctx = t.permute(ctx, &[0, 2, 1, 3]);
    let ctx = t.reshape(ctx, &[g * n, d]);
    let out = t.matmul(ctx, w.wo);
    Ok(t.reshape(out, &[g, n, d]))
}

/// One graph-convolution layer over `f: [groups, nodes, d]`:
/// `ReLU(F + BN(A·F·W1 + F·W2))` with `A` the normalized adjacency.
///
/// Batch norm runs per channel over every token in the batch. Training mode
/// requires at least two tokens and returns the batch statistics so the
/// caller can fold them into the running averages.
#[allow(clippy::too_many_arguments)]
pub fn gcn_layer(
    t: &mut Tape,
    f: Var,
    a_norm: &Array2<f64>,
    w1: Var,
    w2: Var,
    bn_gain: Var,
    bn_bias: Var,
    bn: BnMode,
) -> Result<(Var, Option<BatchStats>), NetworkError> {
    let shape = t.shape(f).to_vec();
    assert_eq!(shape.len(), 3, "gcn wants [groups, nodes, channels]");
    let (g, n, d) = (shape[0], shape[1], shape[2]);
    assert_eq!(a_norm.nrows(), n, "adjacency size must match the group length");

    let neigh = t.matmul_const_left(a_norm.clone(), f);
    let neigh = t.reshape(neigh, &[g * n, d]);
    let z1 = t.matmul(neigh, w1);
    let flat = t.reshape(f, &[g * n, d]);
    let z2 = t.matmul(flat, w2);
    let z = t.add(z1, z2);

    let (zn, stats) = match bn {
        BnMode::Train => {
            if g * n < 2 {
                return Err(NetworkError::BatchTooSmall { tokens: g * n });
            }
            let (y, s) = t.batch_norm_train(z, bn_gain, bn_bias);
            (y, Some(s))
        }
        BnMode::Eval {
            running_mean,
            running_var,
        } => (
            t.batch_norm_eval(z, bn_gain, bn_bias, running_mean, running_var),
            None,
        ),
    };
    let zn = t.reshape(zn, &[g, n, d]);
    let sum = t.add(f, zn);
    Ok((t.relu(sum), stats))
}

/// Blends two stream outputs with a per-token softmax gate.
///
/// For each token the concatenated features are mapped to two logits; their
/// softmax weights the convex combination. Returns the fused features and
/// both weight fields (shape of `f` with the channel axis collapsed to 1).
pub fn adaptive_fuse(
    t: &mut Tape,
    f_tr: Var,
    f_g: Var,
    weight: Var,
    bias: Var,
) -> (Var, Var, Var) {
    let shape = t.shape(f_tr).to_vec();
    assert_eq!(shape, t.shape(f_g), "stream shapes must agree");
    let d = *shape.last().expect("fuse input must have a channel axis");
    let rows: usize = shape[..shape.len() - 1].iter().product();

    let cat = t.concat_last(f_tr, f_g);
    let flat = t.reshape(cat, &[rows, 2 * d]);
    let logits = t.matmul(flat, weight);
    let logits = t.add_bias(logits, bias);
    let alpha = t.softmax_last(logits);

    let mut a_shape = shape;
    *a_shape.last_mut().unwrap() = 1;
    let a_tr = t.slice_last(alpha, 0, 1);
    let a_tr = t.reshape(a_tr, &a_shape);
    let a_g = t.slice_last(alpha, 1, 2);
    let a_g = t.reshape(a_g, &a_shape);

    let left = t.mul_broadcast_last(f_tr, a_tr);
    let right = t.mul_broadcast_last(f_g, a_g);
    (t.add(left, right), a_tr, a_g)
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Whether a pass binds trainable leaves and uses batch statistics (`Train`)
/// or binds constants and frozen running statistics (`Eval`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Train,
    Eval,
}

/// Which head the forward pass applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// 3D coordinates for every frame and joint: `[B, T, J, 3]`.
    Pose,
    /// Class logits after global average pooling: `[B, classes]`.
    Action,
    /// No head; the output is the last fused feature map.
    Features,
}

/// Per-layer intermediate handles kept by a forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    /// Embedded input `F^(0)`.
    pub embedded: Var,
    /// Fused block outputs `F^(1..=N)`, each `[B, T, J, d]`.
    pub fused: Vec<Var>,
    /// Transformer-stream outputs per block.
    pub stream_tr: Vec<Var>,
    /// Graph-stream outputs per block.
    pub stream_g: Vec<Var>,
    /// Gate weight on the Transformer stream per block, `[B, T, J, 1]`.
    pub alpha_tr: Vec<Var>,
    /// Gate weight on the graph stream per block, `[B, T, J, 1]`.
    pub alpha_g: Vec<Var>,
}

/// A pending running-statistics update produced by one batch-norm layer in
/// training mode. Applied to the parameter set after the optimizer step.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub mean_index: usize,
    pub var_index: usize,
    pub mean: Tensor,
    pub var: Tensor,
}

/// Everything produced by one forward pass: the tape holding all values, the
/// bound parameter handles (aligned with [`ParamSet`] order), the layer
/// activations, pending batch-norm updates, and the head output.
pub struct ForwardPass {
    pub tape: Tape,
    pub vars: Vec<Var>,
    pub acts: Activations,
    pub bn_updates: Vec<BnUpdate>,
    pub output: Var,
}

/// A complete model: configuration, named parameters, and the fixed
/// normalized adjacencies for the joint graph and the frame chain.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: NetworkConfig,
    pub topology: JointTopology,
    pub params: ParamSet,
    pub adj_spatial: AdjacencyMatrix,
    pub adj_temporal: AdjacencyMatrix,
}

impl Model {
    /// Builds a model with freshly initialized parameters.
    pub fn new(
        config: NetworkConfig,
        topology: &JointTopology,
        seed: u64,
    ) -> Result<Self, NetworkError> {
        let params = init_params(&config, seed);
        Self::from_params(config, topology, params)
    }

    /// Builds a model around an existing parameter set (checkpoint load).
    pub fn from_params(
        config: NetworkConfig,
        topology: &JointTopology,
        params: ParamSet,
    ) -> Result<Self, NetworkError> {
        config.validate()?;
        topology
            .validate()
            .map_err(|e| NetworkError::BadConfig(format!("topology: {e}")))?;
        if topology.joint_count != config.joints {
            return Err(NetworkError::BadConfig(format!(
                "topology has {} joints but the config says {}",
                topology.joint_count, config.joints
            )));
        }
        let expected = expected_param_count(&config);
        assert_eq!(
            params.trainable_scalar_count(),
            expected,
            "parameter count must match the configuration"
        );
        let adj_spatial = build_spatial_adjacency(topology)
            .map_err(|e| NetworkError::BadConfig(format!("topology: {e}")))?;
        let adj_temporal = build_temporal_adjacency(config.frames)
            .map_err(|e| NetworkError::BadConfig(format!("frames: {e}")))?;
        Ok(Self {
            config,
            topology: topology.clone(),
            params,
            adj_spatial,
            adj_temporal,
        })
    }

    /// Places every parameter on the tape, in parameter order. Training mode
    /// binds trainable entries as gradient leaves; everything else becomes a
    /// constant.
    pub fn bind(&self, t: &mut Tape, run: RunMode) -> Vec<Var> {
        self.params
            .iter()
            .map(|e| {
                if run == RunMode::Train && e.trainable {
                    t.param(e.value.clone())
                } else {
                    t.constant(e.value.clone())
                }
            })
            .collect()
    }

    fn pv(&self, vars: &[Var], name: &str) -> Var {
        let idx = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        vars[idx]
    }

    fn ln_weights(&self, vars: &[Var], prefix: &str) -> LnWeights {
        LnWeights {
            gain: self.pv(vars, &format!("{prefix}.gain")),
            bias: self.pv(vars, &format!("{prefix}.bias")),
        }
    }

    fn mlp_weights(&self, vars: &[Var], prefix: &str) -> MlpWeights {
        MlpWeights {
            w1: self.pv(vars, &format!("{prefix}.w1")),
            b1: self.pv(vars, &format!("{prefix}.b1")),
            w2: self.pv(vars, &format!("{prefix}.w2")),
            b2: self.pv(vars, &format!("{prefix}.b2")),
        }
    }

    /// Validates an input batch and returns its batch size.
    fn check_input(&self, x: &Tensor) -> Result<usize, NetworkError> {
        let s = x.shape();
        let ok = s.len() == 4
            && s[0] >= 1
            && s[1] == self.config.frames
            && s[2] == self.config.joints
            && s[3] == 3;
        if !ok {
            let b = if s.is_empty() { 1 } else { s[0] };
            return Err(NetworkError::ShapeMismatch {
                expected: vec![b, self.config.frames, self.config.joints, 3],
                found: s.to_vec(),
            });
        }
        Ok(s[0])
    }

    /// Projects `x: [B, T, J, 3]` to d channels and adds the per-joint
    /// position embedding, broadcast over batch and time.
    pub fn embed_input(&self, t: &mut Tape, vars: &[Var], x: Var) -> Var {
        let shape = t.shape(x).to_vec();
        let (b, frames, joints) = (shape[0], shape[1], shape[2]);
        let d = self.config.dim;
        let flat = t.reshape(x, &[b * frames * joints, 3]);
        let y = t.matmul(flat, self.pv(vars, "embed.weight"));
        let y = t.add_bias(y, self.pv(vars, "embed.bias"));
        let y = t.reshape(y, &[b, frames, joints, d]);
        let pos = self.pv(vars, "spatial_pos");
        let pos = t.reshape(pos, &[joints, d]);
        t.add_bias(y, pos)
    }

    /// Attention plus feed-forward with pre-norm residuals, over grouped
    /// tokens `[G, n, d]`.
    fn attn_sub_block(
        &self,
        t: &mut Tape,
        vars: &[Var],
        prefix: &str,
        layer: usize,
        module: &str,
        f: Var,
    ) -> Result<Var, NetworkError> {
        let ln1 = self.ln_weights(vars, &format!("{prefix}.ln1"));
        let attn = AttnWeights {
            wq: self.pv(vars, &format!("{prefix}.attn.wq")),
            wk: self.pv(vars, &format!("{prefix}.attn.wk")),
            wv: self.pv(vars, &format!("{prefix}.attn.wv")),
            wo: self.pv(vars, &format!("{prefix}.attn.wo")),
        };
        let normed = layer_norm_affine(t, f, &ln1);
        let a = multi_head_attention(t, normed, &attn, self.config.heads, layer, module)?;
        let f = t.add(f, a);

        let ln2 = self.ln_weights(vars, &format!("{prefix}.ln2"));
        let mlp_w = self.mlp_weights(vars, &format!("{prefix}.mlp"));
        let normed = layer_norm_affine(t, f, &ln2);
        let m = mlp(t, normed, &mlp_w);
        Ok(t.add(f, m))
    }

    /// Transformer stream: spatial attention across joints, then temporal
    /// attention across frames. `f` is `[B, T, J, d]`.
    pub fn transformer_block(
        &self,
        t: &mut Tape,
        vars: &[Var],
        layer: usize,
        f: Var,
    ) -> Result<Var, NetworkError> {
        let shape = t.shape(f).to_vec();
        let (b, frames, joints, d) = (shape[0], shape[1], shape[2], shape[3]);

        let fs = t.reshape(f, &[b * frames, joints, d]);
        let prefix = format!("layers.{layer}.tr.spatial");
        let fs = self.attn_sub_block(t, vars, &prefix, layer, "tr.spatial", fs)?;

        let f4 = t.reshape(fs, &[b, frames, joints, d]);
        let ft = t.permute(f4, &[0, 2, 1, 3]);
        let ft = t.reshape(ft, &[b * joints, frames, d]);
        let prefix = format!("layers.{layer}.tr.temporal");
        let ft = self.attn_sub_block(t, vars, &prefix, layer, "tr.temporal", ft)?;

        let f4 = t.reshape(ft, &[b, joints, frames, d]);
        Ok(t.permute(f4, &[0, 2, 1, 3]))
    }

    /// Graph layer plus feed-forward residual over grouped tokens, collecting
    /// the pending running-statistics update in training mode.
    #[allow(clippy::too_many_arguments)]
    fn gcn_sub_block(
        &self,
        t: &mut Tape,
        vars: &[Var],
        prefix: &str,
        a_norm: &Array2<f64>,
        run: RunMode,
        updates: &mut Vec<BnUpdate>,
        f: Var,
    ) -> Result<Var, NetworkError> {
        let w1 = self.pv(vars, &format!("{prefix}.w1"));
        let w2 = self.pv(vars, &format!("{prefix}.w2"));
        let bn_gain = self.pv(vars, &format!("{prefix}.bn.gain"));
        let bn_bias = self.pv(vars, &format!("{prefix}.bn.bias"));
        let mean_index = self
            .params
            .index_of(&format!("{prefix}.bn.running_mean"))
            .expect("running mean present");
        let var_index = self
            .params
            .index_of(&format!("{prefix}.bn.running_var"))
            .expect("running var present");

        let (g1, stats) = match run {
            RunMode::Train => gcn_layer(t, f, a_norm, w1, w2, bn_gain, bn_bias, BnMode::Train)?,
            RunMode::Eval => gcn_layer(
                t,
                f,
                a_norm,
                w1,
                w2,
                bn_gain,
                bn_bias,
                BnMode::Eval {
                    running_mean: self.params.value(mean_index),
                    running_var: self.params.value(var_index),
                },
            )?,
        };
        if let Some(stats) = stats {
            let old_mean = self.params.value(mean_index);
            let old_var = self.params.value(var_index);
            let mean = old_mean * (1.0 - BN_MOMENTUM) + &stats.mean * BN_MOMENTUM;
            let var = old_var * (1.0 - BN_MOMENTUM) + &stats.var_unbiased * BN_MOMENTUM;
            updates.push(BnUpdate {
                mean_index,
                var_index,
                mean,
                var,
            });
        }

        let ln = self.ln_weights(vars, &format!("{prefix}.ln"));
        let mlp_w = self.mlp_weights(vars, &format!("{prefix}.mlp"));
        let normed = layer_norm_affine(t, g1, &ln);
        let m = mlp(t, normed, &mlp_w);
        Ok(t.add(g1, m))
    }

    /// Graph stream: skeleton-graph layer across joints, then chain-graph
    /// layer across frames, each followed by a feed-forward residual.
    pub fn gcn_block(
        &self,
        t: &mut Tape,
        vars: &[Var],
        layer: usize,
        f: Var,
        run: RunMode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var, NetworkError> {
        let shape = t.shape(f).to_vec();
        let (b, frames, joints, d) = (shape[0], shape[1], shape[2], shape[3]);

        let fs = t.reshape(f, &[b * frames, joints, d]);
        let prefix = format!("layers.{layer}.gcn.spatial");
        let fs = self.gcn_sub_block(t, vars, &prefix, &self.adj_spatial.a_norm, run, updates, fs)?;

        let f4 = t.reshape(fs, &[b, frames, joints, d]);
        let ft = t.permute(f4, &[0, 2, 1, 3]);
        let ft = t.reshape(ft, &[b * joints, frames, d]);
        let prefix = format!("layers.{layer}.gcn.temporal");
        let ft =
            self.gcn_sub_block(t, vars, &prefix, &self.adj_temporal.a_norm, run, updates, ft)?;

        let f4 = t.reshape(ft, &[b, joints, frames, d]);
        Ok(t.permute(f4, &[0, 2, 1, 3]))
    }

    /// Runs the N dual-stream blocks from an embedded feature map `f0`.
    pub fn backbone(
        &self,
        t: &mut Tape,
        vars: &[Var],
        f0: Var,
        run: RunMode,
    ) -> Result<(Activations, Vec<BnUpdate>), NetworkError> {
        let mut acts = Activations {
            embedded: f0,
            fused: Vec::new(),
            stream_tr: Vec::new(),
            stream_g: Vec::new(),
            alpha_tr: Vec::new(),
            alpha_g: Vec::new(),
        };
        let mut updates = Vec::new();
        let mut f = f0;
        for i in 0..self.config.layers {
            let f_tr = self.transformer_block(t, vars, i, f)?;
            let f_g = self.gcn_block(t, vars, i, f, run, &mut updates)?;
            let weight = self.pv(vars, &format!("layers.{i}.fuse.weight"));
            let bias = self.pv(vars, &format!("layers.{i}.fuse.bias"));
            let (fused, a_tr, a_g) = adaptive_fuse(t, f_tr, f_g, weight, bias);
            acts.stream_tr.push(f_tr);
            acts.stream_g.push(f_g);
            acts.alpha_tr.push(a_tr);
            acts.alpha_g.push(a_g);
            acts.fused.push(fused);
            f = fused;
        }
        Ok((acts, updates))
    }

    /// Maps features `[B, T, J, d]` to 3D coordinates `[B, T, J, 3]`.
    pub fn pose_head(&self, t: &mut Tape, vars: &[Var], f: Var) -> Var {
        let shape = t.shape(f).to_vec();
        let rows: usize = shape[..3].iter().product();
        let flat = t.reshape(f, &[rows, shape[3]]);
        let y = t.matmul(flat, self.pv(vars, "head.pose.weight"));
        let y = t.add_bias(y, self.pv(vars, "head.pose.bias"));
        t.reshape(y, &[shape[0], shape[1], shape[2], 3])
    }

    /// Global average pool over frames and joints, then the class projection.
    pub fn action_head(&self, t: &mut Tape, vars: &[Var], f: Var) -> Result<Var, NetworkError> {
        let classes = self
            .config
            .action_classes
            .ok_or(NetworkError::ActionHeadMissing)?;
        let shape = t.shape(f).to_vec();
        let (b, frames, joints, d) = (shape[0], shape[1], shape[2], shape[3]);
        let tokens = t.reshape(f, &[b, frames * joints, d]);
        let pooled = t.mean_mid(tokens);
        let y = t.matmul(pooled, self.pv(vars, "head.action.weight"));
        let y = t.add_bias(y, self.pv(vars, "head.action.bias"));
        debug_assert_eq!(t.shape(y), &[b, classes]);
        Ok(y)
    }

    /// Maps features back to d channels for the masked-regression objective.
    pub fn pretrain_head(&self, t: &mut Tape, vars: &[Var], f: Var) -> Var {
        let shape = t.shape(f).to_vec();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let d = *shape.last().unwrap();
        let flat = t.reshape(f, &[rows, d]);
        let y = t.matmul(flat, self.pv(vars, "head.pretrain.weight"));
        let y = t.add_bias(y, self.pv(vars, "head.pretrain.bias"));
        t.reshape(y, &shape)
    }

    /// Full forward pass over a batch `x: [B, T, J, 3]`.
    pub fn forward(
        &self,
        x: &Tensor,
        mode: ForwardMode,
        run: RunMode,
    ) -> Result<ForwardPass, NetworkError> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, run);
        let xv = tape.constant(x.clone());
        let f0 = self.embed_input(&mut tape, &vars, xv);
        let (acts, bn_updates) = self.backbone(&mut tape, &vars, f0, run)?;
        let last = *acts.fused.last().expect("at least one block");
        let output = match mode {
            ForwardMode::Pose => self.pose_head(&mut tape, &vars, last),
            ForwardMode::Action => self.action_head(&mut tape, &vars, last)?,
            ForwardMode::Features => last,
        };
        Ok(ForwardPass {
            tape,
            vars,
            acts,
            bn_updates,
            output,
        })
    }

    /// Folds pending batch-norm statistics into the stored running averages.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            self.params.set_value(u.mean_index, u.mean.clone());
            self.params.set_value(u.var_index, u.var.clone());
        }
    }
}
