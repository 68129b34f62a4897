//! Merging the K scale representations into one multi-scale representation.
//!
//! The gated path mean-pools the scale representations, flattens the pooled
//! [N, d_s] matrix node-major (node 0's features first — W1's layout depends
//! on this order), pushes it through a two-layer network, and reads a
//! sigmoid importance score α_k per scale: `h_m = ReLU(Σ_k α_k·h^k)`. The
//! scores live in (0,1) independently; they are deliberately not normalized
//! to sum to 1.
//!
//! Ablation variants: `concat` joins the representations along the feature
//! axis (the output head widens to K·d_s), `mean_pool` replaces the learned
//! gate with a plain average (reported α is uniform).

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape};

/// How scale representations are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    /// Learned sigmoid importance per scale (the full method).
    Gated,
    /// Feature-axis concatenation, no importance scores.
    Concat,
    /// Unweighted mean of the scales; uniform scores reported.
    MeanPool,
}

/// Tape handles of the gate parameters: W1 [N·d_s, d_1], b1 [1, d_1],
/// W2 [d_1, K], b2 [1, K].
#[derive(Debug, Clone, Copy)]
pub struct FusionLeaves {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Result of [`fuse`]: the merged representation and, when the variant
/// defines them, the per-scale importance scores as a [1, K] row.
#[derive(Debug, Clone, Copy)]
pub struct Fused {
    pub h_m: NodeId,
    pub alpha: Option<NodeId>,
}

fn check_shapes(tape: &Tape, h_list: &[NodeId]) -> Result<(usize, usize)> {
    if h_list.is_empty() {
        return Err(Error::Contract("fuse needs at least one scale".into()));
    }
    let first = tape.shape(h_list[0]).to_vec();
    if first.len() != 2 {
        return Err(Error::InvalidShape {
            op: "fuse",
            shape: first,
            msg: "scale representations must be 2-D".into(),
        });
    }
    for h in h_list {
        if tape.shape(*h) != first.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "fuse",
                lhs: first,
                rhs: tape.shape(*h).to_vec(),
            });
        }
    }
    Ok((first[0], first[1]))
}

fn mean_of(tape: &mut Tape, h_list: &[NodeId]) -> Result<NodeId> {
    let mut acc = h_list[0];
    for h in &h_list[1..] {
        acc = tape.add(acc, *h)?;
    }
    tape.scale(acc, 1.0 / h_list.len() as f64)
}

fn gated_alpha(tape: &mut Tape, h_list: &[NodeId], leaves: &FusionLeaves) -> Result<NodeId> {
    let (n, d_s) = check_shapes(tape, h_list)?;
    let pooled = mean_of(tape, h_list)?;
    let flat = tape.reshape(pooled, vec![1, n * d_s])?;
    let z1 = tape.matmul(flat, leaves.w1)?;
    let z1 = tape.add(z1, leaves.b1)?;
    let z1 = tape.relu(z1)?;
    let z2 = tape.matmul(z1, leaves.w2)?;
    let z2 = tape.add(z2, leaves.b2)?;
    tape.sigmoid(z2)
}

/// The per-scale importance scores of the gated variant, exposed for
/// reporting. Errors on variants that have no learned scores.
pub fn fusion_weights(
    tape: &mut Tape,
    h_list: &[NodeId],
    variant: FusionVariant,
    leaves: Option<&FusionLeaves>,
) -> Result<NodeId> {
    match variant {
        FusionVariant::Gated => {
            let leaves = leaves.ok_or_else(|| {
                Error::Contract("gated fusion requires gate parameters".into())
            })?;
            gated_alpha(tape, h_list, leaves)
        }
        FusionVariant::Concat | FusionVariant::MeanPool => Err(Error::Contract(
            "fusion weights exist only for the gated variant".into(),
        )),
    }
}

/// Merges the K scale representations under the chosen variant.
pub fn fuse(
    tape: &mut Tape,
    h_list: &[NodeId],
    variant: FusionVariant,
    leaves: Option<&FusionLeaves>,
) -> Result<Fused> {
    let _ = check_shapes(tape, h_list)?;
    match variant {
        FusionVariant::Gated => {
            let leaves = leaves.ok_or_else(|| {
                Error::Contract("gated fusion requires gate parameters".into())
            })?;
            let alpha = gated_alpha(tape, h_list, leaves)?;
            let mut acc = None;
            for (k, h) in h_list.iter().enumerate() {
                let a_k = tape.select(alpha, k)?;
                let term = tape.mul_scalar_tensor(*h, a_k)?;
                acc = Some(match acc {
                    None => term,
                    Some(prev) => tape.add(prev, term)?,
                });
            }
            let h_m = tape.relu(acc.expect("nonempty list"))?;
            Ok(Fused {
                h_m,
                alpha: Some(alpha),
            })
        }
        FusionVariant::Concat => {
            let h_m = tape.concat_cols(h_list)?;
            Ok(Fused { h_m, alpha: None })
        }
        FusionVariant::MeanPool => {
            let pooled = mean_of(tape, h_list)?;
            let h_m = tape.relu(pooled)?;
            let k = h_list.len();
            let alpha = tape.constant(vec![1, k], vec![1.0 / k as f64; k])?;
            Ok(Fused {
                h_m,
                alpha: Some(alpha),
            })
        }
    }
}
