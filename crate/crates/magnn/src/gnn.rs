//! Per-scale joint spatial/temporal modeling.
//!
//! Each timestep of a scale's feature sequence is propagated over the learned
//! variable graph in both edge directions — incoming information through the
//! adjacency, outgoing through its transpose — with a stack of degree-
//! normalized graph convolutions `ReLU(P·x·W)`, where
//! `P = D̃^{−1/2}(I+A)D̃^{−1/2}`. The resulting per-timestep node features
//! are then collapsed over time by a stack of dilated causal convolutions
//! (kernel 3, dilations doubling, left zero-padding), reading off the final
//! timestep as the scale representation.

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape};

/// Kernel width of every temporal convolution layer.
pub const TCN_KERNEL: usize = 3;

/// Whether node features propagate along both edge directions or one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GnnVariant {
    /// Incoming and outgoing GNNs, summed (the full method).
    Two,
    /// Incoming direction only.
    One,
}

/// Normalized propagation matrices for one scale. Input-independent, so they
/// are built once per tape and reused for every timestep and sample.
#[derive(Debug, Clone, Copy)]
pub struct Propagators {
    /// Normalization of A (incoming information).
    pub p_in: NodeId,
    /// Normalization of Aᵀ (outgoing information); absent in the
    /// one-direction variant.
    pub p_out: Option<NodeId>,
}

/// Inverted-dropout masks for one timestep, one per direction. Entries are
/// 0 or 1/(1−p); `None` means no dropout (evaluation mode).
#[derive(Debug, Clone, Default)]
pub struct StepMasks {
    pub incoming: Option<Vec<f64>>,
    pub outgoing: Option<Vec<f64>>,
}

/// `D̃^{−1/2}·Ã·D̃^{−1/2}` with `Ã = I + A`. Every row degree is ≥ 1, so the
/// inverse square root is always defined.
pub fn normalize_adjacency(tape: &mut Tape, a: NodeId) -> Result<NodeId> {
    let shape = tape.shape(a).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::InvalidShape {
            op: "normalize_adjacency",
            shape,
            msg: "adjacency must be square".into(),
        });
    }
    let n = shape[0];
    let mut eye = vec![0.0; n * n];
    for i in 0..n {
        eye[i * n + i] = 1.0;
    }
    let i_const = tape.constant(vec![n, n], eye)?;
    let a_tilde = tape.add(a, i_const)?;
    let deg = tape.row_sum(a_tilde)?;
    let r = tape.rsqrt(deg)?;
    let col = tape.reshape(r, vec![n, 1])?;
    let row = tape.reshape(r, vec![1, n])?;
    let outer = tape.matmul(col, row)?;
    tape.mul(a_tilde, outer)
}

/// One graph convolution: `ReLU(P·x·W)`.
pub fn graph_conv(tape: &mut Tape, x: NodeId, p: NodeId, w: NodeId) -> Result<NodeId> {
    let px = tape.matmul(p, x)?;
    let pxw = tape.matmul(px, w)?;
    tape.relu(pxw)
}

/// Composes `ws.len()` graph convolutions over the same propagation matrix.
pub fn stacked_graph_conv(tape: &mut Tape, x: NodeId, p: NodeId, ws: &[NodeId]) -> Result<NodeId> {
    let mut h = x;
    for w in ws {
        h = graph_conv(tape, h, p, *w)?;
    }
    Ok(h)
}

/// Builds the propagation matrices for one scale graph. The transpose is
/// taken before normalization, so each direction gets its own degrees.
pub fn build_propagators(tape: &mut Tape, a: NodeId, variant: GnnVariant) -> Result<Propagators> {
    let p_in = normalize_adjacency(tape, a)?;
    let p_out = match variant {
        GnnVariant::Two => {
            let at = tape.transpose(a)?;
            Some(normalize_adjacency(tape, at)?)
        }
        GnnVariant::One => None,
    };
    Ok(Propagators { p_in, p_out })
}

/// One timestep of joint propagation: the incoming-direction stack plus the
/// outgoing-direction stack (when present), with optional dropout applied
/// after each direction's stack.
pub fn mtg_step(
    tape: &mut Tape,
    x_t: NodeId,
    props: &Propagators,
    w_in: &[NodeId],
    w_out: Option<&[NodeId]>,
    masks: &StepMasks,
) -> Result<NodeId> {
    let mut h = stacked_graph_conv(tape, x_t, props.p_in, w_in)?;
    if let Some(m) = &masks.incoming {
        h = tape.mask_mul(h, m.clone())?;
    }
    if let Some(p_out) = props.p_out {
        let ws = w_out.ok_or_else(|| {
            Error::Contract("two-direction propagation requires outgoing weights".into())
        })?;
        let mut h_out = stacked_graph_conv(tape, x_t, p_out, ws)?;
        if let Some(m) = &masks.outgoing {
            h_out = tape.mask_mul(h_out, m.clone())?;
        }
        h = tape.add(h, h_out)?;
    }
    Ok(h)
}

/// Number of temporal layers needed so the dilated stack's receptive field
/// `1 + (kernel−1)(2^m − 1)` covers a sequence of length `len`; at least 1.
pub fn tcn_layer_count(len: usize, kernel: usize) -> usize {
    let mut m = 1usize;
    loop {
        let field = 1 + (kernel - 1) * ((1usize << m) - 1);
        if field >= len || m >= 32 {
            return m;
        }
        m += 1;
    }
}

/// Temporal convolution parameters for one scale: per-layer kernels
/// [d_s, d_s, TCN_KERNEL] and biases [d_s].
#[derive(Debug, Clone)]
pub struct TcnLeaves {
    pub ws: Vec<NodeId>,
    pub bs: Vec<NodeId>,
}

/// Runs the full dilated causal stack, keeping the time axis:
/// [N, d_s, L] → [N, d_s, L]. Layer j uses dilation 2^j and left padding
/// (kernel−1)·2^j, so output position t never depends on inputs after t.
pub fn tcn_stack(tape: &mut Tape, seq: NodeId, leaves: &TcnLeaves) -> Result<NodeId> {
    let mut h = seq;
    for (j, (w, b)) in leaves.ws.iter().zip(&leaves.bs).enumerate() {
        let dil = 1usize << j;
        let pad_l = (TCN_KERNEL - 1) * dil;
        let conv = tape.conv1d(h, *w, *b, 1, pad_l, 0, dil)?;
        h = tape.relu(conv)?;
    }
    Ok(h)
}

/// Collapses a per-timestep feature sequence to the scale representation:
/// causal temporal stack, then the final timestep. [N, d_s, L] → [N, d_s].
pub fn tcn_forward(tape: &mut Tape, seq: NodeId, leaves: &TcnLeaves) -> Result<NodeId> {
    let h = tcn_stack(tape, seq, leaves)?;
    let len = tape.shape(h)[2];
    tape.time_slice(h, len - 1)
}

/// Full per-scale pipeline: graph propagation at every timestep, then the
/// temporal stack. `x` is [N, c, L]; the result is [N, d_s].
#[allow(clippy::too_many_arguments)]
pub fn scale_representation(
    tape: &mut Tape,
    x: NodeId,
    props: &Propagators,
    w_in: &[NodeId],
    w_out: Option<&[NodeId]>,
    tcn: &TcnLeaves,
    masks: Option<&[StepMasks]>,
) -> Result<NodeId> {
    let len = tape.shape(x)[2];
    if let Some(ms) = masks {
        if ms.len() != len {
            return Err(Error::Contract(format!(
                "dropout masks cover {} timesteps but the sequence has {len}",
                ms.len()
            )));
        }
    }
    let default_masks = StepMasks::default();
    let mut steps = Vec::with_capacity(len);
    for t in 0..len {
        let x_t = tape.time_slice(x, t)?;
        let m = masks.map_or(&default_masks, |ms| &ms[t]);
        steps.push(mtg_step(tape, x_t, props, w_in, w_out, m)?);
    }
    let seq = tape.stack_time(&steps)?;
    tcn_forward(tape, seq, tcn)
}
