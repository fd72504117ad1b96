//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records every operation eagerly: building a node computes its
//! value immediately and stores the operands needed for the backward pass.
//! [`Tape::backward`] then walks the recorded nodes in reverse, accumulating
//! vector-Jacobian products. Gradients are kept only for leaves created with
//! [`Tape::param`]; intermediate gradients are dropped as soon as they have
//! been propagated, which keeps peak memory close to the forward pass.
//!
//! Shapes are validated with assertions: callers own the shape contract, and
//! a violated assertion here is a bug in the caller, not a runtime condition.
//! All node values are kept in standard (row-major, contiguous) layout so
//! reshapes are free and slices are cheap.

use ndarray::{concatenate, Array2, ArrayD, Axis, Ix2, IxDyn, Slice};

/// Owned dynamic-rank tensor used throughout the crate.
pub type Tensor = ArrayD<f64>;

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Per-feature batch statistics produced by a training-mode batch norm node.
///
/// `var_biased` (divide by n) is what the normalization itself used;
/// `var_unbiased` (divide by n-1) is what running averages should track.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Tensor,
    pub var_biased: Tensor,
    pub var_unbiased: Tensor,
}

/// Numerical floor added to variances before taking an inverse square root.
pub const NORM_EPS: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Operation set
// ---------------------------------------------------------------------------

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    /// x + c where the constant broadcasts to x's shape (c is not stored:
    /// the gradient passes through unchanged).
    AddConst(Var),
    /// x * c where the stored constant broadcasts to x's shape.
    MulConst(Var, Tensor),
    Sqrt(Var),
    Relu(Var),
    Gelu(Var),
    /// [.., s] + b where b's shape equals the trailing dims of x.
    AddBias(Var, Var),
    /// [.., s] * b where b's shape equals the trailing dims of x.
    MulBias(Var, Var),
    /// [.., d] + s where s is [.., 1] over the same leading dims.
    AddBroadcastLast(Var, Var),
    /// [.., d] * s where s is [.., 1] over the same leading dims.
    MulBroadcastLast(Var, Var),
    /// x * s where s is a single-element tensor.
    ScaleBy(Var, Var),
    /// [n, k] x [k, m].
    MatMul(Var, Var),
    /// [g, n, k] x [g, k, m] batched.
    Bmm(Var, Var),
    /// [g, n, k] x [g, m, k]^T batched.
    BmmNT(Var, Var),
    /// c x x[i] for every group i of x: [g, n, d] with c [n, n].
    MatMulConstLeft(Array2<f64>, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    ConcatLast(Var, Var),
    /// Slice of the last axis: [start, end).
    SliceLast(Var, usize, usize),
    /// Slice of an arbitrary axis: (axis, start, end).
    SliceAxis(Var, usize, usize, usize),
    /// x stacked `reps` times along axis 0.
    TileFirst(Var, usize),
    /// Sum of every element, shaped [1].
    SumAll(Var),
    /// Sum over the last axis, keeping it as size 1.
    SumLast(Var),
    /// Mean over axis 1 of a rank-3 tensor: [b, n, d] -> [b, d].
    MeanMid(Var),
    SoftmaxLast(Var),
    /// log(sum(exp(x))) over the last axis, kept as size 1.
    LogSumExpLast(Var),
    /// Parameter-free layer norm over the last axis; value is x-hat.
    LayerNorm { x: Var, inv_std: Tensor },
    /// gain * x-hat + bias on a [n, c] tensor, batch statistics.
    BatchNormTrain {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Tensor,
    },
    /// gain * (x - mean) * scale + bias with frozen statistics.
    BatchNormEval {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        scale: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Callback that folds one node's contribution into the gradient table
/// during the backward sweep.
type AccumulateFn = dyn Fn(&mut [Option<Tensor>], Var, Tensor, &Tape);

/// Gradients produced by [`Tape::backward`], indexable by [`Var`].
pub struct Gradients {
    by_id: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, if it was a differentiable leaf on the path to the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_id.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of the given shape when it was off-path.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(IxDyn(shape)),
        }
    }
}

/// The recorded computation: values forward, vector-Jacobian products back.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Small tensor helpers
// ---------------------------------------------------------------------------

/// Copies into standard layout if needed and reshapes. Panics if sizes differ.
fn reshaped(a: &Tensor, shape: &[usize]) -> Tensor {
    a.as_standard_layout()
        .to_shape(IxDyn(shape))
        .expect("reshape size mismatch")
        .to_owned()
}

fn to_std(a: Tensor) -> Tensor {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

fn mm2(a: &Tensor, b: &Tensor) -> Tensor {
    let a2 = a.view().into_dimensionality::<Ix2>().expect("lhs not 2-d");
    let b2 = b.view().into_dimensionality::<Ix2>().expect("rhs not 2-d");
    a2.dot(&b2).into_dyn()
}

/// Sums `g` over its leading axes so the result has `trailing` shape.
fn sum_to_trailing(g: &Tensor, trailing: &[usize]) -> Tensor {
    let tail: usize = trailing.iter().product();
    let lead = g.len() / tail.max(1);
    let flat = reshaped(g, &[lead, tail]);
    reshaped(&flat.sum_axis(Axis(0)).into_dyn(), trailing)
}

/// Mean over the last axis, kept as a size-1 axis.
fn mean_last_keep(a: &Tensor) -> Tensor {
    let d = *a.shape().last().expect("rank 0 tensor") as f64;
    let mut out = a.sum_axis(Axis(a.ndim() - 1)).insert_axis(Axis(a.ndim() - 1));
    out.mapv_inplace(|v| v / d);
    out
}

const GELU_COEF: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn unary(&mut self, value: Tensor, op: Op, parent: Var) -> Var {
        let ng = self.needs(parent);
        self.push(value, op, ng)
    }

    fn binary(&mut self, value: Tensor, op: Op, a: Var, b: Var) -> Var {
        let ng = self.needs(a) || self.needs(b);
        self.push(value, op, ng)
    }

    // -- leaves ------------------------------------------------------------

    /// A differentiable leaf: its gradient survives [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(to_std(value), Op::Leaf, true)
    }

    /// A non-differentiable leaf: inputs, targets, frozen statistics.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(to_std(value), Op::Leaf, false)
    }

    // -- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.binary(v, Op::Add(a, b), a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.binary(v, Op::Sub(a, b), a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.binary(v, Op::Mul(a, b), a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "div shape mismatch");
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.binary(v, Op::Div(a, b), a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.unary(v, Op::Scale(a, c), a)
    }

    /// x + c, where c broadcasts to x's shape (same rank, size-1 axes stretch).
    pub fn add_const(&mut self, x: Var, c: Tensor) -> Var {
        let v = to_std(&self.nodes[x.0].value + &c);
        assert_eq!(v.shape(), self.shape(x), "add_const must not grow x");
        self.unary(v, Op::AddConst(x), x)
    }

    /// x * c, where c broadcasts to x's shape.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Var {
        let v = to_std(&self.nodes[x.0].value * &c);
        assert_eq!(v.shape(), self.shape(x), "mul_const must not grow x");
        self.unary(v, Op::MulConst(x, c), x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        self.unary(v, Op::Sqrt(a), a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.unary(v, Op::Relu(a), a)
    }

    /// Gaussian error linear unit, tanh form.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(gelu_scalar);
        self.unary(v, Op::Gelu(a), a)
    }

    // -- broadcasting forms ------------------------------------------------

    /// [.., s0, .., sk] + b where b is shaped [s0, .., sk] (trailing dims).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let bs = self.shape(b).to_vec();
        let xs = self.shape(x);
        assert!(
            xs.len() >= bs.len() && xs[xs.len() - bs.len()..] == bs[..],
            "bias {bs:?} is not a trailing block of {xs:?}"
        );
        let v = to_std(&self.nodes[x.0].value + &self.nodes[b.0].value);
        self.binary(v, Op::AddBias(x, b), x, b)
    }

    /// Elementwise product with a trailing-shaped factor (see [`Self::add_bias`]).
    pub fn mul_bias(&mut self, x: Var, b: Var) -> Var {
        let bs = self.shape(b).to_vec();
        let xs = self.shape(x);
        assert!(
            xs.len() >= bs.len() && xs[xs.len() - bs.len()..] == bs[..],
            "bias {bs:?} is not a trailing block of {xs:?}"
        );
        let v = to_std(&self.nodes[x.0].value * &self.nodes[b.0].value);
        self.binary(v, Op::MulBias(x, b), x, b)
    }

    /// [.., d] + s where s is [.., 1] with identical leading dims.
    pub fn add_broadcast_last(&mut self, x: Var, s: Var) -> Var {
        self.check_broadcast_last(x, s);
        let v = to_std(&self.nodes[x.0].value + &self.nodes[s.0].value);
        self.binary(v, Op::AddBroadcastLast(x, s), x, s)
    }

    /// [.., d] * s where s is [.., 1] with identical leading dims.
    pub fn mul_broadcast_last(&mut self, x: Var, s: Var) -> Var {
        self.check_broadcast_last(x, s);
        let v = to_std(&self.nodes[x.0].value * &self.nodes[s.0].value);
        self.binary(v, Op::MulBroadcastLast(x, s), x, s)
    }

    fn check_broadcast_last(&self, x: Var, s: Var) {
        let xs = self.shape(x);
        let ss = self.shape(s);
        assert_eq!(xs.len(), ss.len(), "rank mismatch: {xs:?} vs {ss:?}");
        assert_eq!(*ss.last().unwrap(), 1, "factor last axis must be 1");
        assert_eq!(
            &xs[..xs.len() - 1],
            &ss[..ss.len() - 1],
            "leading dims differ: {xs:?} vs {ss:?}"
        );
    }

    /// x scaled by a single-element tensor, with gradient through both.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "scale factor must be one element");
        let c = self.nodes[s.0].value.iter().next().copied().unwrap();
        let v = self.nodes[x.0].value.mapv(|e| e * c);
        self.binary(v, Op::ScaleBy(x, s), x, s)
    }

    // -- contractions --------------------------------------------------------

    /// [n, k] x [k, m] -> [n, m].
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).len(), 2, "matmul lhs must be 2-d");
        assert_eq!(self.shape(b).len(), 2, "matmul rhs must be 2-d");
        assert_eq!(self.shape(a)[1], self.shape(b)[0], "matmul inner dim");
        let v = mm2(&self.nodes[a.0].value, &self.nodes[b.0].value);
        self.binary(v, Op::MatMul(a, b), a, b)
    }

    /// [g, n, k] x [g, k, m] -> [g, n, m].
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3, "bmm wants rank-3 operands");
        assert_eq!(sa[0], sb[0], "bmm group count");
        assert_eq!(sa[2], sb[1], "bmm inner dim");
        let v = batched_mm(&self.nodes[a.0].value, &self.nodes[b.0].value, false);
        self.binary(v, Op::Bmm(a, b), a, b)
    }

    /// [g, n, k] x [g, m, k] -> [g, n, m], contracting the shared last axis.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3, "bmm_nt wants rank-3 operands");
        assert_eq!(sa[0], sb[0], "bmm_nt group count");
        assert_eq!(sa[2], sb[2], "bmm_nt contracted dim");
        let v = batched_mm(&self.nodes[a.0].value, &self.nodes[b.0].value, true);
        self.binary(v, Op::BmmNT(a, b), a, b)
    }

    /// c x x[i] for each group of x: x is [g, n, d], c is [n, n].
    pub fn matmul_const_left(&mut self, c: Array2<f64>, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "matmul_const_left wants a rank-3 operand");
        assert!(c.is_square() && c.nrows() == xs[1], "matrix/group size");
        let xv = &self.nodes[x.0].value;
        let mut out = Tensor::zeros(IxDyn(&xs));
        for i in 0..xs[0] {
            let xi = xv
                .index_axis(Axis(0), i)
                .into_dimensionality::<Ix2>()
                .unwrap()
                .to_owned();
            out.index_axis_mut(Axis(0), i).assign(&c.dot(&xi));
        }
        self.unary(out, Op::MatMulConstLeft(c, x), x)
    }

    // -- structure -----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = reshaped(&self.nodes[x.0].value, shape);
        self.unary(v, Op::Reshape(x), x)
    }

    /// Reorders axes and materializes the result in standard layout.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        assert_eq!(perm.len(), self.shape(x).len(), "permutation rank");
        let v = to_std(
            self.nodes[x.0]
                .value
                .view()
                .permuted_axes(IxDyn(perm))
                .to_owned(),
        );
        self.unary(v, Op::Permute(x, perm.to_vec()), x)
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let axis = self.shape(a).len() - 1;
        assert_eq!(
            self.shape(a)[..axis],
            self.shape(b)[..axis],
            "concat leading dims"
        );
        let v = to_std(
            concatenate(
                Axis(axis),
                &[self.nodes[a.0].value.view(), self.nodes[b.0].value.view()],
            )
            .expect("concat"),
        );
        self.binary(v, Op::ConcatLast(a, b), a, b)
    }

    /// Columns [start, end) of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Var {
        let axis = self.shape(x).len() - 1;
        self.slice_axis(x, axis, start, end)
    }

    /// Indices [start, end) along `axis`.
    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Var {
        let xs = self.shape(x);
        assert!(axis < xs.len() && start < end && end <= xs[axis], "slice bounds");
        let v = to_std(
            self.nodes[x.0]
                .value
                .slice_axis(Axis(axis), Slice::from(start..end))
                .to_owned(),
        );
        let op = if axis == xs.len() - 1 {
            Op::SliceLast(x, start, end)
        } else {
            Op::SliceAxis(x, axis, start, end)
        };
        self.unary(v, op, x)
    }

    /// x repeated `reps` times along axis 0: [b, ..] -> [reps*b, ..].
    pub fn tile_first(&mut self, x: Var, reps: usize) -> Var {
        assert!(reps >= 1, "tile_first needs reps >= 1");
        let views: Vec<_> = (0..reps).map(|_| self.nodes[x.0].value.view()).collect();
        let v = to_std(concatenate(Axis(0), &views).expect("tile"));
        self.unary(v, Op::TileFirst(x, reps), x)
    }

    // -- reductions ----------------------------------------------------------

    /// Sum of every element, shaped [1].
    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::from_elem(IxDyn(&[1]), self.nodes[x.0].value.sum());
        self.unary(v, Op::SumAll(x), x)
    }

    /// Sum over the last axis, kept as a size-1 axis.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let axis = self.shape(x).len() - 1;
        let v = self.nodes[x.0]
            .value
            .sum_axis(Axis(axis))
            .insert_axis(Axis(axis));
        self.unary(to_std(v), Op::SumLast(x), x)
    }

    /// Mean over axis 1: [b, n, d] -> [b, d].
    pub fn mean_mid(&mut self, x: Var) -> Var {
        assert_eq!(self.shape(x).len(), 3, "mean_mid wants a rank-3 operand");
        let n = self.shape(x)[1] as f64;
        let mut v = self.nodes[x.0].value.sum_axis(Axis(1));
        v.mapv_inplace(|e| e / n);
        self.unary(to_std(v), Op::MeanMid(x), x)
    }

    // -- normalization and attention ------------------------------------------

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let axis = self.shape(x).len() - 1;
        let mut v = self.nodes[x.0].value.clone();
        for mut lane in v.lanes_mut(Axis(axis)) {
            let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in lane.iter_mut() {
                *e = (*e - max).exp();
                sum += *e;
            }
            for e in lane.iter_mut() {
                *e /= sum;
            }
        }
        self.unary(v, Op::SoftmaxLast(x), x)
    }

    /// log(sum(exp(x))) over the last axis, kept as a size-1 axis.
    pub fn logsumexp_last(&mut self, x: Var) -> Var {
        let axis = self.shape(x).len() - 1;
        let xv = &self.nodes[x.0].value;
        let mut out_shape = self.shape(x).to_vec();
        out_shape[axis] = 1;
        let mut v = Tensor::zeros(IxDyn(&out_shape));
        for (lane, slot) in xv.lanes(Axis(axis)).into_iter().zip(v.iter_mut()) {
            let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = lane.iter().map(|e| (e - max).exp()).sum();
            *slot = max + sum.ln();
        }
        self.unary(v, Op::LogSumExpLast(x), x)
    }

    /// Parameter-free layer normalization over the last axis.
    ///
    /// Centers and scales each lane to zero mean and (population) unit
    /// variance; affine gain/bias are applied separately via
    /// [`Self::mul_bias`] and [`Self::add_bias`].
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let axis = self.shape(x).len() - 1;
        let d = self.shape(x)[axis] as f64;
        let mut v = self.nodes[x.0].value.clone();
        let mut inv_shape = self.shape(x).to_vec();
        inv_shape[axis] = 1;
        let mut inv_std = Tensor::zeros(IxDyn(&inv_shape));
        for (mut lane, slot) in v.lanes_mut(Axis(axis)).into_iter().zip(inv_std.iter_mut()) {
            let mean = lane.sum() / d;
            let var = lane.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for e in lane.iter_mut() {
                *e = (*e - mean) * inv;
            }
            *slot = inv;
        }
        self.unary(v, Op::LayerNorm { x, inv_std }, x)
    }

    /// Batch normalization in training mode on a [n, c] tensor.
    ///
    /// Normalizes each feature column with batch statistics, applies the
    /// affine gain/bias, and returns the statistics so the caller can update
    /// running averages. Panics when n < 2 (the caller validates first).
    pub fn batch_norm_train(&mut self, x: Var, gain: Var, bias: Var) -> (Var, BatchStats) {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 2, "batch norm wants a [tokens, channels] tensor");
        let (n, c) = (xs[0], xs[1]);
        assert!(n >= 2, "batch norm needs at least 2 rows");
        assert_eq!(self.shape(gain), &[c], "gain shape");
        assert_eq!(self.shape(bias), &[c], "bias shape");

        let xv = &self.nodes[x.0].value;
        let mean = xv.sum_axis(Axis(0)).mapv(|e| e / n as f64);
        let mut var = Tensor::zeros(IxDyn(&[c]));
        for row in xv.rows() {
            for (j, e) in row.iter().enumerate() {
                let d = e - mean[j];
                var[j] += d * d;
            }
        }
        let var_biased = var.mapv(|e| e / n as f64);
        let var_unbiased = var.mapv(|e| e / (n - 1) as f64);
        let inv_std = var_biased.mapv(|e| 1.0 / (e + NORM_EPS).sqrt());

        let mut xhat = xv.clone();
        for mut row in xhat.rows_mut() {
            for (j, e) in row.iter_mut().enumerate() {
                *e = (*e - mean[j]) * inv_std[j];
            }
        }
        let gv = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        let mut out = xhat.clone();
        for mut row in out.rows_mut() {
            for (j, e) in row.iter_mut().enumerate() {
                *e = *e * gv[j] + bv[j];
            }
        }

        let stats = BatchStats {
            mean: mean.clone(),
            var_biased: var_biased.clone(),
            var_unbiased,
        };
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        let v = self.push(
            out,
            Op::BatchNormTrain {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        );
        (v, stats)
    }

    /// Batch normalization with frozen running statistics ([n, c] tensor).
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
    ) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 2, "batch norm wants a [tokens, channels] tensor");
        let c = xs[1];
        assert_eq!(running_mean.len(), c, "running mean length");
        assert_eq!(running_var.len(), c, "running var length");
        let scale = running_var.mapv(|e| 1.0 / (e + NORM_EPS).sqrt());
        let mean = running_mean.as_slice().unwrap();
        let sc = scale.as_slice().unwrap();
        let mut xhat = self.nodes[x.0].value.clone();
        for mut row in xhat.rows_mut() {
            for (j, e) in row.iter_mut().enumerate() {
                *e = (*e - mean[j]) * sc[j];
            }
        }
        let gv = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        let mut out = xhat.clone();
        for mut row in out.rows_mut() {
            for (j, e) in row.iter_mut().enumerate() {
                *e = *e * gv[j] + bv[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            out,
            Op::BatchNormEval {
                x,
                gain,
                bias,
                xhat,
                scale,
            },
            ng,
        )
    }

    // -- backward -------------------------------------------------------------

    /// Propagates d(root)/d(leaf) to every differentiable leaf.
    ///
    /// `root` must be a single-element tensor (a scalar loss). Intermediate
    /// gradients are dropped as soon as they are consumed.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward root must be a scalar loss"
        );
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.needs(root) {
            return Gradients { by_id: grads };
        }
        grads[root.0] = Some(Tensor::ones(self.value(root).raw_dim()));

        for id in (0..=root.0).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue; // leaf gradients are the output; keep them in place
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, g, &mut grads);
        }
        Gradients { by_id: grads }
    }

    fn propagate(&self, id: usize, g: Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], v: Var, c: Tensor, tape: &Tape| {
            if !tape.needs(v) {
                return;
            }
            debug_assert_eq!(c.shape(), tape.shape(v), "gradient shape drift");
            match &mut grads[v.0] {
                Some(slot) => *slot += &c,
                slot @ None => *slot = Some(to_std(c)),
            }
        };

        match &self.nodes[id].op {
            Op::Leaf => unreachable!("leaves are skipped by backward"),

            Op::Add(a, b) => {
                acc(grads, *a, g.clone(), self);
                acc(grads, *b, g, self);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone(), self);
                acc(grads, *b, g.mapv(|e| -e), self);
            }
            Op::Mul(a, b) => {
                acc(grads, *a, &g * &self.nodes[b.0].value, self);
                acc(grads, *b, &g * &self.nodes[a.0].value, self);
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[b.0].value;
                acc(grads, *a, &g / bv, self);
                let gb = &(&g * &self.nodes[id].value) / bv;
                acc(grads, *b, gb.mapv(|e| -e), self);
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc(grads, *a, g.mapv(|e| e * c), self);
            }
            Op::AddConst(a) => acc(grads, *a, g, self),
            Op::MulConst(a, c) => acc(grads, *a, to_std(&g * c), self),
            Op::Sqrt(a) => {
                // d sqrt(x) = 1 / (2 sqrt(x)); at exactly 0 the subgradient 0
                // avoids poisoning the whole step with a NaN.
                let gx = ndarray::Zip::from(&g)
                    .and(&self.nodes[id].value)
                    .map_collect(|&gi, &vi| if vi > 0.0 { gi / (2.0 * vi) } else { 0.0 });
                acc(grads, *a, gx, self);
            }
            Op::Relu(a) => {
                let gx = ndarray::Zip::from(&g)
                    .and(&self.nodes[id].value)
                    .map_collect(|&gi, &vi| if vi > 0.0 { gi } else { 0.0 });
                acc(grads, *a, gx, self);
            }
            Op::Gelu(a) => {
                let gx = ndarray::Zip::from(&g)
                    .and(&self.nodes[a.0].value)
                    .map_collect(|&gi, &xi| gi * gelu_grad_scalar(xi));
                acc(grads, *a, gx, self);
            }

            Op::AddBias(x, b) => {
                acc(grads, *b, sum_to_trailing(&g, self.shape(*b)), self);
                acc(grads, *x, g, self);
            }
            Op::MulBias(x, b) => {
                if self.needs(*b) {
                    let gb = to_std(&g * &self.nodes[x.0].value);
                    acc(grads, *b, sum_to_trailing(&gb, self.shape(*b)), self);
                }
                acc(grads, *x, to_std(&g * &self.nodes[b.0].value), self);
            }
            Op::AddBroadcastLast(x, s) => {
                acc(grads, *s, g.sum_axis(Axis(g.ndim() - 1)).insert_axis(Axis(g.ndim() - 1)), self);
                acc(grads, *x, g, self);
            }
            Op::MulBroadcastLast(x, s) => {
                if self.needs(*s) {
                    let prod = &g * &self.nodes[x.0].value;
                    let gs = prod
                        .sum_axis(Axis(prod.ndim() - 1))
                        .insert_axis(Axis(prod.ndim() - 1));
                    acc(grads, *s, gs, self);
                }
                acc(grads, *x, to_std(&g * &self.nodes[s.0].value), self);
            }
            Op::ScaleBy(x, s) => {
                if self.needs(*s) {
                    let dot: f64 = (&g * &self.nodes[x.0].value).sum();
                    acc(grads, *s, Tensor::from_elem(IxDyn(&[1]), dot), self);
                }
                let c = self.nodes[s.0].value.iter().next().copied().unwrap();
                acc(grads, *x, g.mapv(|e| e * c), self);
            }

            Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if self.needs(*a) {
                    let bt = to_std(bv.view().permuted_axes(IxDyn(&[1, 0])).to_owned());
                    acc(grads, *a, mm2(&g, &bt), self);
                }
                if self.needs(*b) {
                    let at = to_std(av.view().permuted_axes(IxDyn(&[1, 0])).to_owned());
                    acc(grads, *b, mm2(&at, &g), self);
                }
            }
            Op::Bmm(a, b) => {
                // out[i] = a[i] b[i]  =>  ga[i] = g[i] b[i]^T, gb[i] = a[i]^T g[i]
                if self.needs(*a) {
                    acc(grads, *a, batched_mm(&g, &self.nodes[b.0].value, true), self);
                }
                if self.needs(*b) {
                    let gb = batched_mm_ta(&self.nodes[a.0].value, &g);
                    acc(grads, *b, gb, self);
                }
            }
            Op::BmmNT(a, b) => {
                // out[i] = a[i] b[i]^T  =>  ga[i] = g[i] b[i], gb[i] = g[i]^T a[i]
                if self.needs(*a) {
                    acc(grads, *a, batched_mm(&g, &self.nodes[b.0].value, false), self);
                }
                if self.needs(*b) {
                    acc(grads, *b, batched_mm_ta(&g, &self.nodes[a.0].value), self);
                }
            }
            Op::MatMulConstLeft(c, x) => {
                let ct = c.t();
                let xs = self.shape(*x);
                let mut gx = Tensor::zeros(IxDyn(xs));
                for i in 0..xs[0] {
                    let gi = g
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .to_owned();
                    gx.index_axis_mut(Axis(0), i).assign(&ct.dot(&gi));
                }
                acc(grads, *x, gx, self);
            }

            Op::Reshape(x) => acc(grads, *x, reshaped(&g, self.shape(*x)), self),
            Op::Permute(x, perm) => {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gx = to_std(g.view().permuted_axes(IxDyn(&inv)).to_owned());
                acc(grads, *x, gx, self);
            }
            Op::ConcatLast(a, b) => {
                let axis = g.ndim() - 1;
                let da = self.shape(*a)[axis];
                let ga = to_std(g.slice_axis(Axis(axis), Slice::from(0..da)).to_owned());
                let gb = to_std(g.slice_axis(Axis(axis), Slice::from(da..)).to_owned());
                acc(grads, *a, ga, self);
                acc(grads, *b, gb, self);
            }
            Op::SliceLast(x, start, end) => {
                let axis = self.shape(*x).len() - 1;
                self.scatter_slice(grads, *x, axis, *start, *end, &g, &acc);
            }
            Op::SliceAxis(x, axis, start, end) => {
                self.scatter_slice(grads, *x, *axis, *start, *end, &g, &acc);
            }
            Op::TileFirst(x, reps) => {
                let xs = self.shape(*x);
                let mut block = vec![*reps];
                block.extend_from_slice(xs);
                let gx = reshaped(&g, &block).sum_axis(Axis(0));
                acc(grads, *x, to_std(gx), self);
            }

            Op::SumAll(x) => {
                let gv = g[[0]];
                acc(grads, *x, Tensor::from_elem(self.value(*x).raw_dim(), gv), self);
            }
            Op::SumLast(x) => {
                let gx = g
                    .broadcast(self.value(*x).raw_dim())
                    .expect("sum_last broadcast")
                    .to_owned();
                acc(grads, *x, gx, self);
            }
            Op::MeanMid(x) => {
                let xs = self.shape(*x);
                let n = xs[1] as f64;
                let gx = g
                    .insert_axis(Axis(1))
                    .broadcast(self.value(*x).raw_dim())
                    .expect("mean_mid broadcast")
                    .to_owned()
                    .mapv(|e| e / n);
                acc(grads, *x, gx, self);
            }

            Op::SoftmaxLast(x) => {
                // gx = y * (g - sum(g * y)) lane by lane.
                let y = &self.nodes[id].value;
                let mut gx = to_std(&g * y);
                let axis = gx.ndim() - 1;
                for (mut lane, ylane) in gx
                    .lanes_mut(Axis(axis))
                    .into_iter()
                    .zip(y.lanes(Axis(axis)))
                {
                    let s: f64 = lane.sum();
                    for (e, yv) in lane.iter_mut().zip(ylane.iter()) {
                        *e -= s * yv;
                    }
                }
                acc(grads, *x, gx, self);
            }
            Op::LogSumExpLast(x) => {
                // gx = g * softmax(x), with g broadcast over the last axis.
                let xv = &self.nodes[x.0].value;
                let lse = &self.nodes[id].value;
                let mut gx = xv.clone();
                let axis = gx.ndim() - 1;
                for ((mut lane, &l), &gi) in gx
                    .lanes_mut(Axis(axis))
                    .into_iter()
                    .zip(lse.iter())
                    .zip(g.iter())
                {
                    for e in lane.iter_mut() {
                        *e = gi * (*e - l).exp();
                    }
                }
                acc(grads, *x, gx, self);
            }
            Op::LayerNorm { x, inv_std } => {
                // gx = inv_std * (g - mean(g) - xhat * mean(g * xhat))
                let xhat = &self.nodes[id].value;
                let m_g = mean_last_keep(&g);
                let m_gx = mean_last_keep(&to_std(&g * xhat));
                let centered = &(&g - &m_g) - &to_std(xhat * &m_gx);
                let gx = to_std(&centered * inv_std);
                acc(grads, *x, gx, self);
            }
            Op::BatchNormTrain {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = g.shape()[0] as f64;
                let gv = &self.nodes[gain.0].value;
                if self.needs(*bias) {
                    acc(grads, *bias, g.sum_axis(Axis(0)).into_dyn(), self);
                }
                if self.needs(*gain) {
                    acc(grads, *gain, (&g * xhat).sum_axis(Axis(0)).into_dyn(), self);
                }
                if self.needs(*x) {
                    // gx = inv_std/n * (n*ghat - sum(ghat) - xhat * sum(ghat*xhat))
                    // where ghat = g * gain; the sums run over the batch rows.
                    let ghat = to_std(&g * gv); // gain broadcasts per column
                    let sum_g = ghat.sum_axis(Axis(0));
                    let sum_gx = (&ghat * xhat).sum_axis(Axis(0));
                    let rows = g.shape()[0];
                    let cols = g.shape()[1];
                    let mut gx = Tensor::zeros(IxDyn(&[rows, cols]));
                    for i in 0..rows {
                        for j in 0..cols {
                            gx[[i, j]] = inv_std[j] / n
                                * (n * ghat[[i, j]] - sum_g[j] - xhat[[i, j]] * sum_gx[j]);
                        }
                    }
                    acc(grads, *x, gx, self);
                }
            }
            Op::BatchNormEval {
                x,
                gain,
                bias,
                xhat,
                scale,
            } => {
                if self.needs(*bias) {
                    acc(grads, *bias, g.sum_axis(Axis(0)).into_dyn(), self);
                }
                if self.needs(*gain) {
                    acc(grads, *gain, (&g * xhat).sum_axis(Axis(0)).into_dyn(), self);
                }
                if self.needs(*x) {
                    let gv = &self.nodes[gain.0].value;
                    let mut gx = to_std(&g * gv);
                    for mut row in gx.rows_mut() {
                        for (j, e) in row.iter_mut().enumerate() {
                            *e *= scale[j];
                        }
                    }
                    acc(grads, *x, gx, self);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn scatter_slice(
        &self,
        grads: &mut [Option<Tensor>],
        x: Var,
        axis: usize,
        start: usize,
        end: usize,
        g: &Tensor,
        acc: &AccumulateFn,
    ) {
        let mut gx = Tensor::zeros(self.value(x).raw_dim());
        gx.slice_axis_mut(Axis(axis), Slice::from(start..end))
            .assign(g);
        acc(grads, x, gx, self);
    }
}

/// out[i] = a[i] . b[i] (or a[i] . b[i]^T when `transpose_b`).
fn batched_mm(a: &Tensor, b: &Tensor, transpose_b: bool) -> Tensor {
    let g = a.shape()[0];
    let n = a.shape()[1];
    let m = if transpose_b { b.shape()[1] } else { b.shape()[2] };
    let mut out = Tensor::zeros(IxDyn(&[g, n, m]));
    for i in 0..g {
        let ai = a
            .index_axis(Axis(0), i)
            .into_dimensionality::<Ix2>()
            .unwrap();
        let bi = b
            .index_axis(Axis(0), i)
            .into_dimensionality::<Ix2>()
            .unwrap();
        let prod = if transpose_b {
            ai.dot(&bi.t())
        } else {
            ai.dot(&bi)
        };
        out.index_axis_mut(Axis(0), i).assign(&prod);
    }
    out
}

/// out[i] = a[i]^T . b[i].
fn batched_mm_ta(a: &Tensor, b: &Tensor) -> Tensor {
    let g = a.shape()[0];
    let k = a.shape()[2];
    let m = b.shape()[2];
    let mut out = Tensor::zeros(IxDyn(&[g, k, m]));
    for i in 0..g {
        let ai = a
            .index_axis(Axis(0), i)
            .into_dimensionality::<Ix2>()
            .unwrap();
        let bi = b
            .index_axis(Axis(0), i)
            .into_dimensionality::<Ix2>()
            .unwrap();
        out.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&bi));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(IxDyn(shape));
        for v in t.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }

    /// Central-difference check of d(loss)/d(input) for every input element.
    fn fd_check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let loss = build(&mut tape, &vars);
        assert_eq!(tape.value(loss).len(), 1, "loss must be scalar");
        let grads = tape.backward(loss);

        let eval = |xs: &[Tensor]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.param(x.clone())).collect();
            let l = build(&mut t, &vs);
            t.value(l)[[0]]
        };

        let eps = 1e-6;
        let mut xs: Vec<Tensor> = inputs.to_vec();
        for (i, x) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[i], x.shape());
            for j in 0..x.len() {
                let orig = xs[i].as_slice().unwrap()[j];
                xs[i].as_slice_mut().unwrap()[j] = orig + eps;
                let fp = eval(&xs);
                xs[i].as_slice_mut().unwrap()[j] = orig - eps;
                let fm = eval(&xs);
                xs[i].as_slice_mut().unwrap()[j] = orig;
                let fd = (fp - fm) / (2.0 * eps);
                let an = analytic.as_slice().unwrap()[j];
                let denom = an.abs().max(fd.abs()).max(1e-3);
                assert!(
                    (an - fd).abs() / denom < 1e-5,
                    "input {i} element {j}: analytic {an} vs finite diff {fd}"
                );
            }
        }
    }

    #[test]
    fn add_sub_mul_div_values() {
        let mut t = Tape::new();
        let a = t.param(arr1(&[1.0, 2.0, 3.0]).into_dyn());
        let b = t.param(arr1(&[4.0, 5.0, 6.0]).into_dyn());
        let add = t.add(a, b);
        let sub = t.sub(a, b);
        let mul = t.mul(a, b);
        let div = t.div(a, b);
        assert_eq!(t.value(add).as_slice().unwrap(), &[5.0, 7.0, 9.0]);
        assert_eq!(t.value(sub).as_slice().unwrap(), &[-3.0, -3.0, -3.0]);
        assert_eq!(t.value(mul).as_slice().unwrap(), &[4.0, 10.0, 18.0]);
        assert_eq!(t.value(div).as_slice().unwrap(), &[0.25, 0.4, 0.5]);
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[2, 3]);
        let b = randn(&mut rng, &[2, 3]).mapv(|v| v + 2.5); // keep divisors away from 0
        fd_check(&[a.clone(), b.clone()], |t, v| {
            let s = t.add(v[0], v[1]);
            let m = t.mul(s, v[0]);
            let d = t.div(m, v[1]);
            let sc = t.scale(d, 0.7);
            t.sum_all(sc)
        });
    }

    #[test]
    fn mul_with_shared_operand_accumulates_both_paths() {
        // d(x*x)/dx = 2x: both operands are the same node.
        let mut t = Tape::new();
        let x = t.param(arr1(&[3.0]).into_dyn());
        let sq = t.mul(x, x);
        let loss = t.sum_all(sq);
        let g = t.backward(loss);
        assert!((g.get(x).unwrap()[[0]] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn sqrt_relu_gelu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, &[3, 4]).mapv(|v| v + 1.6); // positive for sqrt
        fd_check(&[x], |t, v| {
            let s = t.sqrt(v[0]);
            t.sum_all(s)
        });
        let y = randn(&mut rng, &[3, 4]).mapv(|v| v * 2.0 + 0.05); // away from the relu kink
        fd_check(std::slice::from_ref(&y), |t, v| {
            let r = t.relu(v[0]);
            t.sum_all(r)
        });
        fd_check(&[y], |t, v| {
            let gel = t.gelu(v[0]);
            t.sum_all(gel)
        });
    }

    #[test]
    fn sqrt_at_zero_keeps_gradient_finite() {
        let mut t = Tape::new();
        let x = t.param(arr1(&[0.0, 4.0]).into_dyn());
        let s = t.sqrt(x);
        let loss = t.sum_all(s);
        let g = t.backward(loss);
        let gx = g.get(x).unwrap();
        assert_eq!(gx[[0]], 0.0, "subgradient at 0 must be 0, not inf");
        assert!((gx[[1]] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn gelu_matches_reference_points() {
        // Spot values of the tanh-form gelu.
        assert!((gelu_scalar(0.0) - 0.0).abs() < 1e-15);
        assert!((gelu_scalar(1.0) - 0.841_191_990_607_477_3).abs() < 1e-9);
        assert!((gelu_scalar(-1.0) + 0.158_808_009_392_522_74).abs() < 1e-9);
    }

    #[test]
    fn bias_and_broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, &[2, 3, 4]);
        let b = randn(&mut rng, &[4]);
        let bb = randn(&mut rng, &[3, 4]);
        fd_check(&[x.clone(), b, bb], |t, v| {
            let h = t.add_bias(v[0], v[1]);
            let h = t.mul_bias(h, v[1]);
            let h = t.add_bias(h, v[2]); // rank-2 trailing bias
            t.sum_all(h)
        });
        let s = randn(&mut rng, &[2, 3, 1]);
        fd_check(&[x.clone(), s], |t, v| {
            let h = t.mul_broadcast_last(v[0], v[1]);
            let h = t.add_broadcast_last(h, v[1]);
            t.sum_all(h)
        });
        let k = randn(&mut rng, &[1]).mapv(|v| v + 2.0);
        fd_check(&[x, k], |t, v| {
            let h = t.scale_by(v[0], v[1]);
            t.sum_all(h)
        });
    }

    #[test]
    fn const_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, &[2, 3, 4]);
        let mask = {
            let mut m = Tensor::zeros(IxDyn(&[2, 3, 1]));
            m[[0, 1, 0]] = 1.0;
            m[[1, 2, 0]] = 1.0;
            m
        };
        let noise = randn(&mut rng, &[2, 3, 4]);
        fd_check(&[x], |t, v| {
            let keep = mask.mapv(|m| 1.0 - m);
            let h = t.mul_const(v[0], keep);
            let h = t.add_const(h, noise.clone());
            t.sum_all(h)
        });
    }

    #[test]
    fn matmul_value_and_gradients() {
        let mut t = Tape::new();
        let a = t.param(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = t.param(arr2(&[[5.0, 6.0], [7.0, 8.0]]).into_dyn());
        let c = t.matmul(a, b);
        assert_eq!(
            t.value(c).as_slice().unwrap(),
            &[19.0, 22.0, 43.0, 50.0],
            "hand-checked 2x2 product"
        );

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[3, 4]);
        let w = randn(&mut rng, &[4, 2]);
        fd_check(&[x, w], |t, v| {
            let y = t.matmul(v[0], v[1]);
            t.sum_all(y)
        });
    }

    #[test]
    fn bmm_matches_per_group_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = randn(&mut rng, &[3, 2, 4]);
        let b = randn(&mut rng, &[3, 4, 5]);
        let mut t = Tape::new();
        let va = t.constant(a.clone());
        let vb = t.constant(b.clone());
        let out = t.bmm(va, vb);
        for i in 0..3 {
            let ai = a.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
            let bi = b.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
            let want = ai.dot(&bi);
            let got = t.value(out).index_axis(Axis(0), i).to_owned();
            assert!(want
                .iter()
                .zip(got.iter())
                .all(|(w, g)| (w - g).abs() < 1e-12));
        }

        fd_check(&[a.clone(), b], |t, v| {
            let y = t.bmm(v[0], v[1]);
            t.sum_all(y)
        });
        let bt = randn(&mut rng, &[3, 5, 4]);
        fd_check(&[a, bt], |t, v| {
            let y = t.bmm_nt(v[0], v[1]);
            t.sum_all(y)
        });
    }

    #[test]
    fn matmul_const_left_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = arr2(&[[0.5, 0.5, 0.0], [0.0, 1.0, 0.0], [0.25, 0.25, 0.5]]);
        let x = randn(&mut rng, &[2, 3, 4]);
        fd_check(&[x], |t, v| {
            let y = t.matmul_const_left(c.clone(), v[0]);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        });
    }

    #[test]
    fn reshape_permute_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, &[2, 3, 4]);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let p = t.permute(v, &[2, 0, 1]);
        assert_eq!(t.shape(p), &[4, 2, 3]);
        assert_eq!(t.value(p)[[1, 0, 2]], x[[0, 2, 1]]);
        let back = t.permute(p, &[1, 2, 0]);
        assert_eq!(t.value(back), &x);

        fd_check(&[x], |t, v| {
            let p = t.permute(v[0], &[2, 0, 1]);
            let r = t.reshape(p, &[4, 6]);
            let sq = t.mul(r, r);
            t.sum_all(sq)
        });
    }

    #[test]
    fn concat_slice_tile_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = randn(&mut rng, &[2, 3]);
        let b = randn(&mut rng, &[2, 2]);
        fd_check(&[a.clone(), b], |t, v| {
            let c = t.concat_last(v[0], v[1]);
            let left = t.slice_last(c, 0, 2);
            let sq = t.mul(left, left);
            t.sum_all(sq)
        });
        let x = randn(&mut rng, &[2, 4, 3]);
        fd_check(std::slice::from_ref(&x), |t, v| {
            let head = t.slice_axis(v[0], 1, 0, 3);
            let tail = t.slice_axis(v[0], 1, 1, 4);
            let d = t.sub(tail, head);
            let sq = t.mul(d, d);
            t.sum_all(sq)
        });
        fd_check(&[x], |t, v| {
            let tiled = t.tile_first(v[0], 3);
            let sq = t.mul(tiled, tiled);
            t.sum_all(sq)
        });
    }

    #[test]
    fn tile_first_stacks_copies() {
        let mut t = Tape::new();
        let x = t.constant(arr2(&[[1.0, 2.0]]).into_dyn());
        let tiled = t.tile_first(x, 3);
        assert_eq!(t.shape(tiled), &[3, 2]);
        assert_eq!(
            t.value(tiled).as_slice().unwrap(),
            &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]
        );
    }

    #[test]
    fn reduction_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = randn(&mut rng, &[2, 3, 4]);
        fd_check(std::slice::from_ref(&x), |t, v| {
            let s = t.sum_last(v[0]);
            let sq = t.mul(s, s);
            t.sum_all(sq)
        });
        fd_check(&[x], |t, v| {
            let m = t.mean_mid(v[0]);
            let sq = t.mul(m, m);
            t.sum_all(sq)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&mut rng, &[2, 3, 5]).mapv(|v| v * 3.0);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let y = t.softmax_last(v);
        for lane in t.value(y).lanes(Axis(2)) {
            let s: f64 = lane.sum();
            assert!((s - 1.0).abs() < 1e-12, "softmax row sums to {s}");
            assert!(lane.iter().all(|&e| e > 0.0));
        }

        fd_check(std::slice::from_ref(&x), |t, v| {
            let y = t.softmax_last(v[0]);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        });
        fd_check(&[x], |t, v| {
            let l = t.logsumexp_last(v[0]);
            let sq = t.mul(l, l);
            t.sum_all(sq)
        });
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut t = Tape::new();
        let v = t.constant(arr1(&[1000.0, 1001.0, 999.0]).into_dyn());
        let y = t.softmax_last(v);
        assert!(t.value(y).iter().all(|e| e.is_finite()));
        let s: f64 = t.value(y).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_centers_and_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = randn(&mut rng, &[3, 7]).mapv(|v| v * 4.0 + 2.0);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let y = t.layer_norm(v);
        for lane in t.value(y).lanes(Axis(1)) {
            let d = lane.len() as f64;
            let mean = lane.sum() / d;
            let var = lane.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / d;
            assert!(mean.abs() < 1e-12, "lane mean {mean}");
            assert!((var - 1.0).abs() < 1e-9, "lane variance {var}");
        }

        // The sum of squares of a normalized lane is constant, so its
        // gradient must vanish; the weighted test below is the informative one.
        fd_check(&[x], |t, v| {
            let y = t.layer_norm(v[0]);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        });
    }

    #[test]
    fn layer_norm_gradient_with_weighted_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = randn(&mut rng, &[2, 5]);
        let w = randn(&mut rng, &[2, 5]);
        fd_check(&[x], |t, v| {
            let y = t.layer_norm(v[0]);
            let weighted = t.mul_const(y, w.clone());
            t.sum_all(weighted)
        });
    }

    #[test]
    fn batch_norm_train_statistics_and_gradient() {
        let x = arr2(&[[1.0, 10.0], [3.0, 10.0], [5.0, 16.0]]).into_dyn();
        let mut t = Tape::new();
        let xv = t.param(x.clone());
        let gain = t.param(arr1(&[1.0, 1.0]).into_dyn());
        let bias = t.param(arr1(&[0.0, 0.0]).into_dyn());
        let (y, stats) = t.batch_norm_train(xv, gain, bias);
        assert!((stats.mean[[0]] - 3.0).abs() < 1e-12);
        assert!((stats.mean[[1]] - 12.0).abs() < 1e-12);
        assert!((stats.var_biased[[0]] - 8.0 / 3.0).abs() < 1e-12);
        assert!((stats.var_unbiased[[0]] - 4.0).abs() < 1e-12);
        assert!((stats.var_unbiased[[1]] - 12.0).abs() < 1e-12);
        // Normalized columns have zero mean and unit (biased) variance.
        let col0: Vec<f64> = (0..3).map(|i| t.value(y)[[i, 0]]).collect();
        let mean0: f64 = col0.iter().sum::<f64>() / 3.0;
        assert!(mean0.abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = randn(&mut rng, &[5, 3]);
        let g = randn(&mut rng, &[3]).mapv(|v| v + 1.5);
        let b = randn(&mut rng, &[3]);
        let w = randn(&mut rng, &[5, 3]);
        fd_check(&[x, g, b], |t, v| {
            let (y, _) = t.batch_norm_train(v[0], v[1], v[2]);
            let weighted = t.mul_const(y, w.clone());
            t.sum_all(weighted)
        });
    }

    #[test]
    fn batch_norm_eval_uses_frozen_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = randn(&mut rng, &[4, 3]);
        let g = randn(&mut rng, &[3]).mapv(|v| v + 1.5);
        let b = randn(&mut rng, &[3]);
        let mean = arr1(&[0.1, -0.2, 0.3]).into_dyn();
        let var = arr1(&[1.5, 0.7, 2.0]).into_dyn();
        let w = randn(&mut rng, &[4, 3]);
        fd_check(&[x.clone(), g.clone(), b.clone()], |t, v| {
            let y = t.batch_norm_eval(v[0], v[1], v[2], &mean, &var);
            let weighted = t.mul_const(y, w.clone());
            t.sum_all(weighted)
        });

        // Identical rows are fine in eval mode: statistics are frozen.
        let mut t = Tape::new();
        let same = t.constant(Tensor::ones(IxDyn(&[1, 3])));
        let gv = t.constant(g);
        let bv = t.constant(b.clone());
        let y = t.batch_norm_eval(same, gv, bv, &mean, &var);
        assert!(t.value(y).iter().all(|e| e.is_finite()));
    }

    #[test]
    fn backward_keeps_leaf_gradients_only() {
        let mut t = Tape::new();
        let x = t.param(arr1(&[2.0]).into_dyn());
        let c = t.constant(arr1(&[5.0]).into_dyn());
        let w = t.mul(x, c);
        let loss = t.sum_all(w);
        let g = t.backward(loss);
        assert!((g.get(x).unwrap()[[0]] - 5.0).abs() < 1e-12);
        assert!(g.get(c).is_none(), "constants carry no gradient");
        assert!(g.get(w).is_none(), "intermediate gradients are dropped");
    }

    #[test]
    fn off_path_leaf_has_no_gradient() {
        let mut t = Tape::new();
        let x = t.param(arr1(&[1.0]).into_dyn());
        let unused = t.param(arr1(&[9.0]).into_dyn());
        let loss = t.sum_all(x);
        let g = t.backward(loss);
        assert!(g.get(unused).is_none());
        assert_eq!(g.get_or_zeros(unused, &[1])[[0]], 0.0);
    }

    #[test]
    fn attention_shaped_composite_gradient() {
        // A miniature attention pattern: softmax(q k^T / sqrt(d)) v.
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let q = randn(&mut rng, &[2, 3, 4]);
        let k = randn(&mut rng, &[2, 3, 4]);
        let v = randn(&mut rng, &[2, 3, 4]);
        fd_check(&[q, k, v], |t, vs| {
            let scores = t.bmm_nt(vs[0], vs[1]);
            let scaled = t.scale(scores, 0.5);
            let attn = t.softmax_last(scaled);
            let out = t.bmm(attn, vs[2]);
            let sq = t.mul(out, out);
            t.sum_all(sq)
        });
    }
}
