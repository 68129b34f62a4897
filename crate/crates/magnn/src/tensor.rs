//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The engine is a Wengert tape: every forward operation appends a node to a
//! [`Tape`] (an append-only arena) and returns a [`NodeId`] handle. Calling
//! [`Tape::backward`] on a scalar node replays the recorded operations in
//! reverse, accumulating adjoints. Persistent values — model parameters that
//! must outlive any single forward pass — live in [`Tensor`] and are copied
//! onto the tape as leaves at the start of each pass; gradients are harvested
//! back afterwards with [`Tensor::accumulate_grad`], where they accumulate
//! until the caller zeroes them.
//!
//! Everything is f64. All stored values are checked finite on entry to the
//! tape; a NaN or infinity is a hard error, never a silent propagation.
//! Broadcasting is restricted to the handful of patterns the model needs
//! (bias over length inside conv, scalar times tensor, row vector times
//! matrix) rather than a general rule.

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Pooling flavor for [`Tape::pool1d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// A persistent tensor: shape, data, and an optional accumulated gradient.
///
/// Parameters are `Tensor`s owned by the model; the tape never stores
/// references into them. `grad` accumulates across backward passes until
/// [`Tensor::zero_grad`] is called, which is the optimizer-step contract.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub track_grad: bool,
}

impl Tensor {
    /// Builds a tensor from parts, rejecting shape/length mismatch and
    /// non-finite values.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>, track_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                msg: format!("shape wants {numel} elements, data has {}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            track_grad,
        })
    }

    /// All-zeros tensor that tracks gradients.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            grad: None,
            track_grad: true,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Adds `g` into the persistent gradient buffer (allocated on first use).
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v;
        }
        Ok(())
    }

    /// Clears the accumulated gradient (start-of-step contract).
    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// One recorded operation. Inputs are stored as node ids; anything the
/// backward rule needs beyond inputs and the node's own output (strides,
/// masks, pooling argmaxes) is captured here at forward time.
#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    MulRowVec { a: NodeId, v: NodeId },
    MulScalarT { a: NodeId, s: NodeId },
    Scale { a: NodeId, c: f64 },
    MaskMul { a: NodeId, mask: Vec<f64> },
    Relu { a: NodeId },
    Tanh { a: NodeId },
    Sigmoid { a: NodeId },
    Rsqrt { a: NodeId },
    SoftmaxRows { a: NodeId },
    Sum { a: NodeId },
    RowSum { a: NodeId },
    RowSlice { a: NodeId, r: usize },
    Select { a: NodeId, i: usize },
    Transpose { a: NodeId },
    Reshape { a: NodeId },
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad_l: usize,
        dilation: usize,
    },
    Pool1d {
        x: NodeId,
        kernel: usize,
        stride: usize,
        kind: PoolKind,
        /// Flat input index chosen per output element (max pooling only).
        argmax: Vec<usize>,
    },
    TimeSlice { x: NodeId, t: usize },
    StackTime { xs: Vec<NodeId> },
    ConcatCols { xs: Vec<NodeId> },
}

#[derive(Debug)]
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    track: bool,
    op: Op,
}

/// Append-only computation tape. Build one per forward pass; drop it after
/// harvesting gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn is_tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].track
    }

    /// Gradient of the last `backward` target with respect to node `id`.
    /// `None` if backward has not run or the node is untracked/unreached.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Distance of the closest ReLU input to its kink at 0, over every ReLU
    /// recorded on the tape (infinity if there are none). Finite-difference
    /// gradient checks use this to reject ill-conditioned evaluation points.
    /// Inputs exactly at 0.0 are skipped: they come from identically-zero
    /// paths (an antisymmetric diagonal, sums of already-clipped terms) that
    /// stay zero under perturbation, so they are not conditioning hazards —
    /// the hazards are small nonzero inputs that a perturbation can push
    /// across the kink.
    pub fn relu_kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            if let Op::Relu { a } = node.op {
                for v in &self.nodes[a.0].data {
                    if *v != 0.0 {
                        margin = margin.min(v.abs());
                    }
                }
            }
        }
        margin
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, track: bool, op: Op) -> Result<NodeId> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name(&op) });
        }
        self.nodes.push(Node {
            data,
            shape,
            track,
            op,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Copies a persistent tensor onto the tape as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Result<NodeId> {
        self.leaf_parts(t.shape.clone(), t.data.clone(), t.track_grad)
    }

    /// Leaf from raw parts.
    pub fn leaf_parts(&mut self, shape: Vec<usize>, data: Vec<f64>, track: bool) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "leaf",
                shape,
                msg: format!("shape wants {numel} elements, data has {}", data.len()),
            });
        }
        self.push(shape, data, track, Op::Leaf)
    }

    /// Untracked leaf: constants and input windows.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        self.leaf_parts(shape, data, false)
    }

    fn t(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op,
                shape: s.to_vec(),
                msg: "expected a 2-D tensor".into(),
            });
        }
        Ok((s[0], s[1]))
    }

    // ── Core algebra ────────────────────────────────────────────────────

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = matmul_nn(self.value(a), self.value(b), m, ka, n);
        let track = self.t(a).track || self.t(b).track;
        self.push(vec![m, n], out, track, Op::MatMul { a, b })
    }

    fn binary_same_shape(
        &mut self,
        a: NodeId,
        b: NodeId,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let track = self.t(a).track || self.t(b).track;
        self.push(self.shape(a).to_vec(), out, track, op)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    /// Elementwise difference of two same-shape tensors.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    /// Row-vector broadcast product: `[n,m] * [m] -> [n,m]`, the vector
    /// multiplying every row.
    pub fn mul_row_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (n, m) = self.dims2(a, "mul_row_vec")?;
        if self.shape(v) != [m] {
            return Err(Error::ShapeMismatch {
                op: "mul_row_vec",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        let av = self.value(a);
        let vv = self.value(v);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = av[i * m + j] * vv[j];
            }
        }
        let track = self.t(a).track || self.t(v).track;
        self.push(vec![n, m], out, track, Op::MulRowVec { a, v })
    }

    /// Product with a single-element tensor (a learnable scalar).
    pub fn mul_scalar_tensor(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(Error::InvalidShape {
                op: "mul_scalar_tensor",
                shape: self.shape(s).to_vec(),
                msg: "scalar operand must have exactly one element".into(),
            });
        }
        let sv = self.value(s)[0];
        let out: Vec<f64> = self.value(a).iter().map(|x| x * sv).collect();
        let track = self.t(a).track || self.t(s).track;
        self.push(self.shape(a).to_vec(), out, track, Op::MulScalarT { a, s })
    }

    /// Product with a compile-time constant (no gradient for the constant).
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let track = self.t(a).track;
        self.push(self.shape(a).to_vec(), out, track, Op::Scale { a, c })
    }

    /// Elementwise product with a constant mask of the same length. Gradients
    /// flow only where the mask is nonzero — this is both top-k sparsification
    /// (0/1 mask) and inverted dropout (0 or 1/(1-p) mask).
    pub fn mask_mul(&mut self, a: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        if mask.len() != self.value(a).len() {
            return Err(Error::ShapeMismatch {
                op: "mask_mul",
                lhs: self.shape(a).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let track = self.t(a).track;
        self.push(self.shape(a).to_vec(), out, track, Op::MaskMul { a, mask })
    }

    // ── Elementwise nonlinearities ──────────────────────────────────────

    fn unary(
        &mut self,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let out: Vec<f64> = self.value(a).iter().map(|x| f(*x)).collect();
        let track = self.t(a).track;
        self.push(self.shape(a).to_vec(), out, track, op)
    }

    /// max(x, 0). The subgradient at exactly zero is taken as zero.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, f64::tanh, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid { a })
    }

    /// x^(-1/2) elementwise; inputs must be strictly positive.
    pub fn rsqrt(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).iter().any(|x| *x <= 0.0) {
            return Err(Error::Contract(
                "rsqrt requires strictly positive inputs".into(),
            ));
        }
        self.unary(a, |x| 1.0 / x.sqrt(), Op::Rsqrt { a })
    }

    /// Row-wise softmax of a 2-D tensor, computed with per-row max
    /// subtraction so large magnitudes cannot overflow.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, m) = self.dims2(a, "softmax_rows")?;
        if m == 0 {
            return Err(Error::InvalidShape {
                op: "softmax_rows",
                shape: self.shape(a).to_vec(),
                msg: "rows must be non-empty".into(),
            });
        }
        let av = self.value(a);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &av[i * m..(i + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..m {
                let e = (row[j] - mx).exp();
                out[i * m + j] = e;
                z += e;
            }
            for j in 0..m {
                out[i * m + j] /= z;
            }
        }
        let track = self.t(a).track;
        self.push(vec![n, m], out, track, Op::SoftmaxRows { a })
    }

    // ── Reductions, slicing, reshaping ──────────────────────────────────

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).iter().sum();
        let track = self.t(a).track;
        self.push(vec![1], vec![s], track, Op::Sum { a })
    }

    /// Row sums of a 2-D tensor: `[n,m] -> [n]`.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, m) = self.dims2(a, "row_sum")?;
        let av = self.value(a);
        let out: Vec<f64> = (0..n).map(|i| av[i * m..(i + 1) * m].iter().sum()).collect();
        let track = self.t(a).track;
        self.push(vec![n], out, track, Op::RowSum { a })
    }

    /// Extracts row `r` of a 2-D tensor as a `[m]` vector.
    pub fn row_slice(&mut self, a: NodeId, r: usize) -> Result<NodeId> {
        let (n, m) = self.dims2(a, "row_slice")?;
        if r >= n {
            return Err(Error::InvalidShape {
                op: "row_slice",
                shape: self.shape(a).to_vec(),
                msg: format!("row {r} out of bounds for {n} rows"),
            });
        }
        let out = self.value(a)[r * m..(r + 1) * m].to_vec();
        let track = self.t(a).track;
        self.push(vec![m], out, track, Op::RowSlice { a, r })
    }

    /// Extracts flat element `i` as a `[1]` tensor.
    pub fn select(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let len = self.value(a).len();
        if i >= len {
            return Err(Error::InvalidShape {
                op: "select",
                shape: self.shape(a).to_vec(),
                msg: format!("flat index {i} out of bounds for {len} elements"),
            });
        }
        let out = vec![self.value(a)[i]];
        let track = self.t(a).track;
        self.push(vec![1], out, track, Op::Select { a, i })
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, m) = self.dims2(a, "transpose")?;
        let av = self.value(a);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = av[i * m + j];
            }
        }
        let track = self.t(a).track;
        self.push(vec![m, n], out, track, Op::Transpose { a })
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape,
                msg: format!("element count must stay {}", self.value(a).len()),
            });
        }
        let out = self.value(a).to_vec();
        let track = self.t(a).track;
        self.push(shape, out, track, Op::Reshape { a })
    }

    // ── Convolution and pooling ─────────────────────────────────────────

    /// 1-D convolution along the last axis.
    ///
    /// `x` is `[C_in, L]` or batched `[N, C_in, L]` (the batch axis is the
    /// variable axis in this crate — kernels are shared across it). `w` is
    /// `[C_out, C_in, k]`, `b` is `[C_out]` and is broadcast over batch and
    /// length. Zero padding is explicit and asymmetric; `dilation` spaces the
    /// kernel taps. Output length is
    /// `floor((L + pad_l + pad_r - ((k-1)*dilation + 1)) / stride) + 1`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad_l: usize,
        pad_r: usize,
        dilation: usize,
    ) -> Result<NodeId> {
        if stride == 0 || dilation == 0 {
            return Err(Error::Contract(
                "conv1d stride and dilation must be >= 1".into(),
            ));
        }
        let xs = self.shape(x).to_vec();
        let (batched, n, c_in, l) = match xs.len() {
            2 => (false, 1, xs[0], xs[1]),
            3 => (true, xs[0], xs[1], xs[2]),
            _ => {
                return Err(Error::InvalidShape {
                    op: "conv1d",
                    shape: xs,
                    msg: "input must be [C_in, L] or [N, C_in, L]".into(),
                })
            }
        };
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (c_out, k) = (ws[0], ws[2]);
        if self.shape(b) != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: ws,
                rhs: self.shape(b).to_vec(),
            });
        }
        let span = (k - 1) * dilation + 1;
        let padded = l + pad_l + pad_r;
        if padded < span {
            return Err(Error::InvalidShape {
                op: "conv1d",
                shape: vec![l],
                msg: format!("padded length {padded} shorter than kernel span {span}"),
            });
        }
        let l_out = (padded - span) / stride + 1;

        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut out = vec![0.0; n * c_out * l_out];
        for bi in 0..n {
            for co in 0..c_out {
                for t in 0..l_out {
                    let mut acc = bv[co];
                    let base = t * stride;
                    for ci in 0..c_in {
                        let xrow = &xv[(bi * c_in + ci) * l..(bi * c_in + ci + 1) * l];
                        let wrow = &wv[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
                        for j in 0..k {
                            let pos = base + j * dilation;
                            if pos >= pad_l && pos - pad_l < l {
                                acc += xrow[pos - pad_l] * wrow[j];
                            }
                        }
                    }
                    out[(bi * c_out + co) * l_out + t] = acc;
                }
            }
        }
        let shape = if batched {
            vec![n, c_out, l_out]
        } else {
            vec![c_out, l_out]
        };
        let track = self.t(x).track || self.t(w).track || self.t(b).track;
        self.push(
            shape,
            out,
            track,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_l,
                dilation,
            },
        )
    }

    /// 1-D max or average pooling along the last axis of `[C, L]` or
    /// `[N, C, L]`. No padding; output length `floor((L - kernel)/stride)+1`.
    /// Max ties resolve to the earliest position.
    pub fn pool1d(
        &mut self,
        x: NodeId,
        kernel: usize,
        stride: usize,
        kind: PoolKind,
    ) -> Result<NodeId> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Contract(
                "pool1d kernel and stride must be >= 1".into(),
            ));
        }
        let xs = self.shape(x).to_vec();
        let (batched, rows, l) = match xs.len() {
            2 => (false, xs[0], xs[1]),
            3 => (true, xs[0] * xs[1], xs[2]),
            _ => {
                return Err(Error::InvalidShape {
                    op: "pool1d",
                    shape: xs,
                    msg: "input must be [C, L] or [N, C, L]".into(),
                })
            }
        };
        if l < kernel {
            return Err(Error::InvalidShape {
                op: "pool1d",
                shape: xs,
                msg: format!("length {l} shorter than pooling kernel {kernel}"),
            });
        }
        let l_out = (l - kernel) / stride + 1;
        let xv = self.value(x);
        let mut out = vec![0.0; rows * l_out];
        let mut argmax = Vec::new();
        if kind == PoolKind::Max {
            argmax.reserve(rows * l_out);
        }
        for r in 0..rows {
            let row = &xv[r * l..(r + 1) * l];
            for t in 0..l_out {
                let start = t * stride;
                let win = &row[start..start + kernel];
                match kind {
                    PoolKind::Max => {
                        let mut best = 0;
                        for j in 1..kernel {
                            if win[j] > win[best] {
                                best = j;
                            }
                        }
                        out[r * l_out + t] = win[best];
                        argmax.push(r * l + start + best);
                    }
                    PoolKind::Avg => {
                        out[r * l_out + t] = win.iter().sum::<f64>() / kernel as f64;
                    }
                }
            }
        }
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = l_out;
        let _ = batched;
        let track = self.t(x).track;
        self.push(
            shape,
            out,
            track,
            Op::Pool1d {
                x,
                kernel,
                stride,
                kind,
                argmax,
            },
        )
    }

    /// Extracts timestep `t` from `[N, C, L]` as an `[N, C]` matrix.
    pub fn time_slice(&mut self, x: NodeId, t: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::InvalidShape {
                op: "time_slice",
                shape: xs,
                msg: "input must be [N, C, L]".into(),
            });
        }
        let (n, c, l) = (xs[0], xs[1], xs[2]);
        if t >= l {
            return Err(Error::InvalidShape {
                op: "time_slice",
                shape: xs,
                msg: format!("timestep {t} out of bounds for length {l}"),
            });
        }
        let xv = self.value(x);
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] = xv[(i * c + j) * l + t];
            }
        }
        let track = self.t(x).track;
        self.push(vec![n, c], out, track, Op::TimeSlice { x, t })
    }

    /// Stacks `L` matrices of shape `[N, C]` into `[N, C, L]`, input `t`
    /// becoming timestep `t`.
    pub fn stack_time(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Contract("stack_time needs at least one input".into()));
        }
        let (n, c) = self.dims2(xs[0], "stack_time")?;
        for &x in xs {
            if self.shape(x) != [n, c] {
                return Err(Error::ShapeMismatch {
                    op: "stack_time",
                    lhs: vec![n, c],
                    rhs: self.shape(x).to_vec(),
                });
            }
        }
        let l = xs.len();
        let mut out = vec![0.0; n * c * l];
        let mut track = false;
        for (t, &x) in xs.iter().enumerate() {
            track |= self.t(x).track;
            let xv = self.value(x);
            for i in 0..n {
                for j in 0..c {
                    out[(i * c + j) * l + t] = xv[i * c + j];
                }
            }
        }
        self.push(vec![n, c, l], out, track, Op::StackTime { xs: xs.to_vec() })
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Contract("concat_cols needs at least one input".into()));
        }
        let (n, _) = self.dims2(xs[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        let mut total = 0;
        let mut track = false;
        for &x in xs {
            let (rows, cols) = self.dims2(x, "concat_cols")?;
            if rows != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(xs[0]).to_vec(),
                    rhs: self.shape(x).to_vec(),
                });
            }
            widths.push(cols);
            total += cols;
            track |= self.t(x).track;
        }
        let mut out = vec![0.0; n * total];
        let mut off = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let xv = self.value(x);
            for i in 0..n {
                out[i * total + off..i * total + off + w]
                    .copy_from_slice(&xv[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push(vec![n, total], out, track, Op::ConcatCols { xs: xs.to_vec() })
    }

    // ── Reverse pass ────────────────────────────────────────────────────

    /// Reverse-mode sweep from scalar node `loss`.
    ///
    /// Adjoints are recomputed from scratch on every call, so repeated calls
    /// over the same tape produce bit-identical gradients; accumulation
    /// across optimizer steps happens in [`Tensor::accumulate_grad`], not
    /// here. Gradients are propagated only into tracked subgraphs.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar {
                shape: self.shape(loss).to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].track {
            grads[loss.0] = Some(vec![1.0]);
        }

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    // Leaves keep their adjoint for harvesting.
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul { a, b } => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let nn = self.nodes[b.0].shape[1];
                    if self.nodes[a.0].track {
                        let da = matmul_nt(&g, &self.nodes[b.0].data, m, nn, k);
                        acc(&mut grads[a.0], &da);
                    }
                    if self.nodes[b.0].track {
                        let db = matmul_tn(&self.nodes[a.0].data, &g, m, k, nn);
                        acc(&mut grads[b.0], &db);
                    }
                }
                Op::Add { a, b } => {
                    if self.nodes[a.0].track {
                        acc(&mut grads[a.0], &g);
                    }
                    if self.nodes[b.0].track {
                        acc(&mut grads[b.0], &g);
                    }
                }
                Op::Sub { a, b } => {
                    if self.nodes[a.0].track {
                        acc(&mut grads[a.0], &g);
                    }
                    if self.nodes[b.0].track {
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        acc(&mut grads[b.0], &neg);
                    }
                }
                Op::Mul { a, b } => {
                    if self.nodes[a.0].track {
                        let da: Vec<f64> = g
                            .iter()
                            .zip(&self.nodes[b.0].data)
                            .map(|(gv, bv)| gv * bv)
                            .collect();
                        acc(&mut grads[a.0], &da);
                    }
                    if self.nodes[b.0].track {
                        let db: Vec<f64> = g
                            .iter()
                            .zip(&self.nodes[a.0].data)
                            .map(|(gv, av)| gv * av)
                            .collect();
                        acc(&mut grads[b.0], &db);
                    }
                }
                Op::MulRowVec { a, v } => {
                    let (rows, cols) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    if self.nodes[a.0].track {
                        let vv = &self.nodes[v.0].data;
                        let mut da = vec![0.0; rows * cols];
                        for i in 0..rows {
                            for j in 0..cols {
                                da[i * cols + j] = g[i * cols + j] * vv[j];
                            }
                        }
                        acc(&mut grads[a.0], &da);
                    }
                    if self.nodes[v.0].track {
                        let av = &self.nodes[a.0].data;
                        let mut dv = vec![0.0; cols];
                        for i in 0..rows {
                            for j in 0..cols {
                                dv[j] += g[i * cols + j] * av[i * cols + j];
                            }
                        }
                        acc(&mut grads[v.0], &dv);
                    }
                }
                Op::MulScalarT { a, s } => {
                    let sv = self.nodes[s.0].data[0];
                    if self.nodes[a.0].track {
                        let da: Vec<f64> = g.iter().map(|gv| gv * sv).collect();
                        acc(&mut grads[a.0], &da);
                    }
                    if self.nodes[s.0].track {
                        let ds: f64 = g
                            .iter()
                            .zip(&self.nodes[a.0].data)
                            .map(|(gv, av)| gv * av)
                            .sum();
                        acc(&mut grads[s.0], &[ds]);
                    }
                }
                Op::Scale { a, c } => {
                    if self.nodes[a.0].track {
                        let da: Vec<f64> = g.iter().map(|gv| gv * c).collect();
                        acc(&mut grads[a.0], &da);
                    }
                }
                Op::MaskMul { a, mask } => {
                    if self.nodes[a.0].track {
                        let da: Vec<f64> = g.iter().zip(mask).map(|(gv, m)| gv * m).collect();
                        acc(&mut grads[a.0], &da);
                    }
                }
                Op::Relu { a } => {
                    if self.nodes[a.0].track {
                        let da: Vec<f64> = g
                            .iter()
                            .zip(&self.nodes[a.0].data)
                            .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                            .collect();
                        acc(&mut grads[a.0], &da);
                    }
                }
                Op::Tanh { a } => {
                    if self.nodes[a.0].track {
                        let da: Vec<f64> = g
                            .iter()
                            .zip(&node.data)
                            .map(|(gv, y)| gv * (1.0 - y * y))
                            .collect();
                        acc(&mut grads[a.0], &da);
                    }
                }
                Op::Sigmoid { a } => {
                    if self.nodes[a.0].track {
                        let da: Vec<f64> = g
                            .iter()
                            .zip(&node.data)
                            .map(|(gv, y)| gv * y * (1.0 - y))
                            .collect();
                        acc(&mut grads[a.0], &da);
                    }
                }
                Op::Rsqrt { a } => {
                    if self.nodes[a.0].track {
                        let da: Vec<f64> = g
                            .iter()
                            .zip(&node.data)
                            .map(|(gv, y)| gv * (-0.5 * y * y * y))
                            .collect();
                        acc(&mut grads[a.0], &da);
                    }
                }
                Op::SoftmaxRows { a } => {
                    if self.nodes[a.0].track {
                        let (rows, cols) = (node.shape[0], node.shape[1]);
                        let y = &node.data;
                        let mut da = vec![0.0; rows * cols];
                        for i in 0..rows {
                            let dot: f64 = (0..cols)
                                .map(|j| g[i * cols + j] * y[i * cols + j])
                                .sum();
                            for j in 0..cols {
                                da[i * cols + j] = y[i * cols + j] * (g[i * cols + j] - dot);
                            }
                        }
                        acc(&mut grads[a.0], &da);
                    }
                }
                Op::Sum { a } => {
                    if self.nodes[a.0].track {
                        let da = vec![g[0]; self.nodes[a.0].data.len()];
                        acc(&mut grads[a.0], &da);
                    }
                }
                Op::RowSum { a } => {
                    if self.nodes[a.0].track {
                        let (rows, cols) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                        let mut da = vec![0.0; rows * cols];
                        for i in 0..rows {
                            for j in 0..cols {
                                da[i * cols + j] = g[i];
                            }
                        }
                        acc(&mut grads[a.0], &da);
                    }
                }
                Op::RowSlice { a, r } => {
                    if self.nodes[a.0].track {
                        let cols = self.nodes[a.0].shape[1];
                        let mut da = vec![0.0; self.nodes[a.0].data.len()];
                        da[r * cols..(r + 1) * cols].copy_from_slice(&g);
                        acc(&mut grads[a.0], &da);
                    }
                }
                Op::Select { a, i } => {
                    if self.nodes[a.0].track {
                        let mut da = vec![0.0; self.nodes[a.0].data.len()];
                        da[*i] = g[0];
                        acc(&mut grads[a.0], &da);
                    }
                }
                Op::Transpose { a } => {
                    if self.nodes[a.0].track {
                        let (rows, cols) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                        let mut da = vec![0.0; rows * cols];
                        for i in 0..rows {
                            for j in 0..cols {
                                da[i * cols + j] = g[j * rows + i];
                            }
                        }
                        acc(&mut grads[a.0], &da);
                    }
                }
                Op::Reshape { a } => {
                    if self.nodes[a.0].track {
                        acc(&mut grads[a.0], &g);
                    }
                }
                Op::Conv1d {
                    x,
                    w,
                    b,
                    stride,
                    pad_l,
                    dilation,
                } => {
                    let xs = &self.nodes[x.0].shape;
                    let (n, c_in, l) = if xs.len() == 2 {
                        (1, xs[0], xs[1])
                    } else {
                        (xs[0], xs[1], xs[2])
                    };
                    let ws = &self.nodes[w.0].shape;
                    let (c_out, k) = (ws[0], ws[2]);
                    let l_out = *node.shape.last().unwrap();
                    let track_x = self.nodes[x.0].track;
                    let track_w = self.nodes[w.0].track;
                    let track_b = self.nodes[b.0].track;
                    let xv = &self.nodes[x.0].data;
                    let wv = &self.nodes[w.0].data;
                    let mut dx = if track_x { vec![0.0; xv.len()] } else { Vec::new() };
                    let mut dw = if track_w { vec![0.0; wv.len()] } else { Vec::new() };
                    let mut db = if track_b { vec![0.0; c_out] } else { Vec::new() };
                    for bi in 0..n {
                        for co in 0..c_out {
                            for t in 0..l_out {
                                let gv = g[(bi * c_out + co) * l_out + t];
                                if gv == 0.0 {
                                    continue;
                                }
                                if track_b {
                                    db[co] += gv;
                                }
                                let base = t * stride;
                                for ci in 0..c_in {
                                    for j in 0..k {
                                        let pos = base + j * dilation;
                                        if pos >= *pad_l && pos - pad_l < l {
                                            let xi = (bi * c_in + ci) * l + (pos - pad_l);
                                            let wi = (co * c_in + ci) * k + j;
                                            if track_w {
                                                dw[wi] += gv * xv[xi];
                                            }
                                            if track_x {
                                                dx[xi] += gv * wv[wi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if track_x {
                        acc(&mut grads[x.0], &dx);
                    }
                    if track_w {
                        acc(&mut grads[w.0], &dw);
                    }
                    if track_b {
                        acc(&mut grads[b.0], &db);
                    }
                }
                Op::Pool1d {
                    x,
                    kernel,
                    stride,
                    kind,
                    argmax,
                } => {
                    if self.nodes[x.0].track {
                        let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                        match kind {
                            PoolKind::Max => {
                                for (o, &src) in argmax.iter().enumerate() {
                                    dx[src] += g[o];
                                }
                            }
                            PoolKind::Avg => {
                                let l = *self.nodes[x.0].shape.last().unwrap();
                                let l_out = *node.shape.last().unwrap();
                                let rows = dx.len() / l;
                                let inv = 1.0 / *kernel as f64;
                                for r in 0..rows {
                                    for t in 0..l_out {
                                        let gv = g[r * l_out + t] * inv;
                                        let start = t * stride;
                                        for j in 0..*kernel {
                                            dx[r * l + start + j] += gv;
                                        }
                                    }
                                }
                            }
                        }
                        acc(&mut grads[x.0], &dx);
                    }
                }
                Op::TimeSlice { x, t } => {
                    if self.nodes[x.0].track {
                        let xs = &self.nodes[x.0].shape;
                        let (n2, c, l) = (xs[0], xs[1], xs[2]);
                        let mut dx = vec![0.0; n2 * c * l];
                        for i in 0..n2 {
                            for j in 0..c {
                                dx[(i * c + j) * l + t] = g[i * c + j];
                            }
                        }
                        acc(&mut grads[x.0], &dx);
                    }
                }
                Op::StackTime { xs } => {
                    let (n2, c) = (node.shape[0], node.shape[1]);
                    let l = node.shape[2];
                    for (t, &xid) in xs.iter().enumerate() {
                        if !self.nodes[xid.0].track {
                            continue;
                        }
                        let mut dx = vec![0.0; n2 * c];
                        for i in 0..n2 {
                            for j in 0..c {
                                dx[i * c + j] = g[(i * c + j) * l + t];
                            }
                        }
                        acc(&mut grads[xid.0], &dx);
                    }
                }
                Op::ConcatCols { xs } => {
                    let n2 = node.shape[0];
                    let total = node.shape[1];
                    let mut off = 0;
                    for &xid in xs {
                        let w = self.nodes[xid.0].shape[1];
                        if self.nodes[xid.0].track {
                            let mut dx = vec![0.0; n2 * w];
                            for i in 0..n2 {
                                dx[i * w..(i + 1) * w]
                                    .copy_from_slice(&g[i * total + off..i * total + off + w]);
                            }
                            acc(&mut grads[xid.0], &dx);
                        }
                        off += w;
                    }
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}

/// Adds `v` into the adjoint buffer, allocating zeros on first touch.
fn acc(slot: &mut Option<Vec<f64>>, v: &[f64]) {
    match slot {
        Some(buf) => {
            for (b, x) in buf.iter_mut().zip(v) {
                *b += x;
            }
        }
        None => *slot = Some(v.to_vec()),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::MulRowVec { .. } => "mul_row_vec",
        Op::MulScalarT { .. } => "mul_scalar_tensor",
        Op::Scale { .. } => "scale",
        Op::MaskMul { .. } => "mask_mul",
        Op::Relu { .. } => "relu",
        Op::Tanh { .. } => "tanh",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Rsqrt { .. } => "rsqrt",
        Op::SoftmaxRows { .. } => "softmax_rows",
        Op::Sum { .. } => "sum",
        Op::RowSum { .. } => "row_sum",
        Op::RowSlice { .. } => "row_slice",
        Op::Select { .. } => "select",
        Op::Transpose { .. } => "transpose",
        Op::Reshape { .. } => "reshape",
        Op::Conv1d { .. } => "conv1d",
        Op::Pool1d { .. } => "pool1d",
        Op::TimeSlice { .. } => "time_slice",
        Op::StackTime { .. } => "stack_time",
        Op::ConcatCols { .. } => "concat_cols",
    }
}

/// `[m,k] x [k,n]`, both row-major.
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// `a x b^T` where `a` is `[m,n]` and `b` is `[k,n]`, giving `[m,k]`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for p in 0..n {
                s += arow[p] * brow[p];
            }
            out[i * k + j] = s;
        }
    }
    out
}

/// `a^T x b` where `a` is `[m,k]` and `b` is `[m,n]`, giving `[k,n]`.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for p in 0..m {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..k {
            let av = a[p * k + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{fd_grad, max_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        tape.leaf_parts(shape, data, true).unwrap()
    }

    #[test]
    fn test_matmul_identity() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let i = tape
            .constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])
            .unwrap();
        let out = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn test_matmul_vector_product() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![1, 2], vec![1.0, 2.0]);
        let b = leaf(&mut tape, vec![2, 1], vec![3.0, 4.0]);
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out), &[11.0]);
    }

    #[test]
    fn test_matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 3], vec![0.0; 6]);
        let b = leaf(&mut tape, vec![2, 2], vec![0.0; 4]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn test_backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 3], vec![5.0, -1.0, 0.5, 2.0, 9.0, -4.0]);
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn test_backward_of_sum_of_squares_is_two_x() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![1.0, -2.0, 0.5]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn test_backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::NotScalar { .. }));
    }

    #[test]
    fn test_backward_twice_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = leaf(&mut tape, vec![3, 4], data);
        let w = leaf(
            &mut tape,
            vec![4, 2],
            (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let y = tape.matmul(x, w).unwrap();
        let z = tape.tanh(y).unwrap();
        let loss = tape.sum(z).unwrap();
        tape.backward(loss).unwrap();
        let g1: Vec<f64> = tape.grad(w).unwrap().to_vec();
        tape.backward(loss).unwrap();
        let g2: Vec<f64> = tape.grad(w).unwrap().to_vec();
        assert_eq!(g1, g2);
    }

    #[test]
    fn test_relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![-1.0, 0.0, 2.0]);
        let y = tape.relu(x).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn test_sigmoid_gradient_at_zero_is_quarter() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![0.0]);
        let y = tape.sigmoid(x).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert!((tape.grad(x).unwrap()[0] - 0.25).abs() < 1e-8);
    }

    #[test]
    fn test_softmax_uniform_and_pinned_row() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 3], vec![4.0, 4.0, 4.0]);
        let y = tape.softmax_rows(x).unwrap();
        for v in tape.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        // softmax([0, ln 3]) = [0.25, 0.75]
        let x2 = leaf(&mut tape, vec![1, 2], vec![0.0, 3.0_f64.ln()]);
        let y2 = tape.softmax_rows(x2).unwrap();
        assert!((tape.value(y2)[0] - 0.25).abs() < 1e-12);
        assert!((tape.value(y2)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn test_softmax_shift_invariance_no_overflow() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 3], vec![1.0, 2.0, 3.0]);
        let xs = leaf(&mut tape, vec![1, 3], vec![1001.0, 1002.0, 1003.0]);
        let y = tape.softmax_rows(x).unwrap();
        let ys = tape.softmax_rows(xs).unwrap();
        for (a, b) in tape.value(y).iter().zip(tape.value(ys)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn test_conv1d_identity_kernel() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let w = tape.constant(vec![1, 1, 1], vec![1.0]).unwrap();
        let b = tape.constant(vec![1], vec![0.0]).unwrap();
        let y = tape.conv1d(x, w, b, 1, 0, 0, 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn test_conv1d_strided_pairwise_sums() {
        // kernel [1,1], stride 2 on [1,2,3,4] -> [3, 7]
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let w = tape.constant(vec![1, 1, 2], vec![1.0, 1.0]).unwrap();
        let b = tape.constant(vec![1], vec![0.0]).unwrap();
        let y = tape.conv1d(x, w, b, 2, 0, 0, 1).unwrap();
        assert_eq!(tape.value(y), &[3.0, 7.0]);
    }

    #[test]
    fn test_conv1d_output_length_formula() {
        // L=168, k=7, stride=2, pad 3+3 -> 84
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 168], vec![0.5; 168]);
        let w = tape.constant(vec![1, 1, 7], vec![0.1; 7]).unwrap();
        let b = tape.constant(vec![1], vec![0.0]).unwrap();
        let y = tape.conv1d(x, w, b, 2, 3, 3, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 84]);
    }

    #[test]
    fn test_conv1d_kernel_longer_than_padded_input_errors() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 3], vec![1.0, 2.0, 3.0]);
        let w = tape.constant(vec![1, 1, 5], vec![1.0; 5]).unwrap();
        let b = tape.constant(vec![1], vec![0.0]).unwrap();
        assert!(tape.conv1d(x, w, b, 1, 0, 0, 1).is_err());
    }

    #[test]
    fn test_max_pool_ties_take_earliest() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 4], vec![2.0, 2.0, 1.0, 5.0]);
        let y = tape.pool1d(x, 2, 2, PoolKind::Max).unwrap();
        assert_eq!(tape.value(y), &[2.0, 5.0]);
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        // tie in the first window routes gradient to the earlier element
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn test_leaf_rejects_non_finite() {
        let mut tape = Tape::new();
        let err = tape
            .leaf_parts(vec![2], vec![1.0, f64::NAN], true)
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn test_untracked_leaf_gets_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let w = leaf(&mut tape, vec![2], vec![3.0, 4.0]);
        let y = tape.mul(x, w).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 2.0]);
    }

    /// Central-difference check for one op: builds the graph through `f`,
    /// reduces with a fixed random weighting so every output element matters,
    /// and compares the tape gradient of the first leaf against FD.
    fn check_op_gradient(
        shape: Vec<usize>,
        seed: u64,
        tol: f64,
        sample: impl Fn(&mut ChaCha8Rng) -> f64,
        f: impl Fn(&mut Tape, NodeId) -> NodeId,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let numel: usize = shape.iter().product();
        let x0: Vec<f64> = (0..numel).map(|_| sample(&mut rng)).collect();
        let mut probe_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let mut weights: Option<Vec<f64>> = None;

        let mut eval = |x: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let xid = tape.leaf_parts(shape.clone(), x.to_vec(), true).unwrap();
            let out = f(&mut tape, xid);
            // weights are scaled down by the output size to keep the loss
            // magnitude (and with it the FD cancellation noise) small
            let w = weights.get_or_insert_with(|| {
                let numel = tape.value(out).len();
                (0..numel)
                    .map(|_| probe_rng.gen_range(0.2..1.0) / numel as f64)
                    .collect()
            });
            tape.value(out)
                .iter()
                .zip(w.iter())
                .map(|(o, wi)| o * wi)
                .sum()
        };

        let fd = fd_grad(&mut eval, &x0, 1e-5);

        let mut tape = Tape::new();
        let xid = tape.leaf_parts(shape.clone(), x0.clone(), true).unwrap();
        let out = f(&mut tape, xid);
        let w = weights.clone().unwrap();
        let wid = tape.constant(tape.shape(out).to_vec(), w).unwrap();
        let prod = tape.mul(out, wid).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        let ad = tape.grad(xid).unwrap();

        let err = max_rel_err(ad, &fd);
        assert!(err < tol, "gradient mismatch {err} for seed {seed}");
    }

    #[test]
    fn test_per_op_gradients_match_finite_differences() {
        for seed in 0..20u64 {
            // smooth ops at 1e-6
            check_op_gradient(vec![3, 4], seed, 1e-6, |r| r.gen_range(-2.0..2.0), |t, x| {
                t.tanh(x).unwrap()
            });
            check_op_gradient(vec![3, 4], seed, 1e-6, |r| r.gen_range(-2.0..2.0), |t, x| {
                t.sigmoid(x).unwrap()
            });
            check_op_gradient(vec![2, 5], seed, 1e-6, |r| r.gen_range(-2.0..2.0), |t, x| {
                t.softmax_rows(x).unwrap()
            });
            check_op_gradient(vec![6], seed, 1e-6, |r| r.gen_range(0.5..3.0), |t, x| {
                t.rsqrt(x).unwrap()
            });
            check_op_gradient(vec![3, 4], seed, 1e-6, |r| r.gen_range(-2.0..2.0), |t, x| {
                let w = t
                    .constant(vec![4, 2], (0..8).map(|i| 0.3 + 0.1 * i as f64).collect())
                    .unwrap();
                t.matmul(x, w).unwrap()
            });
            check_op_gradient(vec![3, 4], seed, 1e-6, |r| r.gen_range(-2.0..2.0), |t, x| {
                t.transpose(x).unwrap()
            });
            check_op_gradient(vec![4, 3], seed, 1e-6, |r| r.gen_range(-2.0..2.0), |t, x| {
                let v = t.constant(vec![3], vec![0.5, -1.5, 2.0]).unwrap();
                t.mul_row_vec(x, v).unwrap()
            });
            check_op_gradient(vec![2, 3, 8], seed, 1e-6, |r| r.gen_range(-2.0..2.0), |t, x| {
                let w = t
                    .constant(vec![2, 3, 3], (0..18).map(|i| 0.05 * (i as f64 - 9.0)).collect())
                    .unwrap();
                let b = t.constant(vec![2], vec![0.1, -0.2]).unwrap();
                t.conv1d(x, w, b, 2, 1, 0, 1).unwrap()
            });
            check_op_gradient(vec![2, 3, 8], seed, 1e-6, |r| r.gen_range(-2.0..2.0), |t, x| {
                let w = t
                    .constant(vec![3, 3, 2], (0..18).map(|i| 0.07 * (i as f64 - 8.0)).collect())
                    .unwrap();
                let b = t.constant(vec![3], vec![0.0, 0.1, 0.2]).unwrap();
                // dilated causal conv
                t.conv1d(x, w, b, 1, 2, 0, 2).unwrap()
            });
            check_op_gradient(vec![2, 6], seed, 1e-6, |r| r.gen_range(-2.0..2.0), |t, x| {
                t.pool1d(x, 2, 2, PoolKind::Avg).unwrap()
            });
            check_op_gradient(vec![2, 3, 5], seed, 1e-6, |r| r.gen_range(-2.0..2.0), |t, x| {
                t.time_slice(x, 3).unwrap()
            });
            // relu at 1e-4, sampled away from the kink (|x| > 1e-2)
            check_op_gradient(
                vec![3, 4],
                seed,
                1e-4,
                |r| {
                    let mag = r.gen_range(0.01_f64..2.0);
                    if r.gen_bool(0.5) {
                        mag
                    } else {
                        -mag
                    }
                },
                |t, x| t.relu(x).unwrap(),
            );
        }
    }

    #[test]
    fn test_fd_check_of_composite_matmul_graph() {
        // random 3x4 by 4x2, loss = sum: the spec's pinned composite example
        check_op_gradient(vec![3, 4], 42, 1e-6, |r| r.gen_range(-1.0..1.0), |t, x| {
            let w = t
                .constant(vec![4, 2], (0..8).map(|i| (i as f64) * 0.25 - 1.0).collect())
                .unwrap();
            let y = t.matmul(x, w).unwrap();
            t.relu(y).unwrap()
        });
    }

    #[test]
    fn test_grads_accumulate_on_persistent_tensor_until_zeroed() {
        let mut p = Tensor::from_vec(vec![2], vec![1.0, 2.0], true).unwrap();
        p.accumulate_grad(&[0.5, 0.5]).unwrap();
        p.accumulate_grad(&[1.0, -0.5]).unwrap();
        assert_eq!(p.grad.as_deref().unwrap(), &[1.5, 0.0]);
        p.zero_grad();
        assert!(p.grad.is_none());
    }

    #[test]
    fn test_stack_and_concat_round_trip() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut tape, vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let st = tape.stack_time(&[a, b]).unwrap();
        assert_eq!(tape.shape(st), &[2, 2, 2]);
        let t0 = tape.time_slice(st, 0).unwrap();
        assert_eq!(tape.value(t0), tape.value(a));
        let cc = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.shape(cc), &[2, 4]);
        assert_eq!(
            tape.value(cc),
            &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]
        );
    }
}
