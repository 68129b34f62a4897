//! Adaptive per-scale graph learning from node and scale embeddings.
//!
//! Every variable gets a shared embedding row in E_nodes; every scale gets a
//! modulation row in E_scale. Their pointwise product is projected through
//! two learned scalar rates (θ^k receiver-side, φ^k sender-side) and a tanh,
//! and the directed raw adjacency is `ReLU(M1·M2ᵀ − M2·M1ᵀ)` — antisymmetric
//! before the ReLU, so at most one direction of each pair survives.
//!
//! Note on the construction: the source formulation as printed transposes M1
//! in a way that makes the product dimensionally inconsistent (d_e×N by
//! N×d_e is not N×N). This crate uses `M1·M2ᵀ − M2·M1ᵀ` with M1, M2 ∈
//! R^{N×d_e}, the receiver/sender reading that yields N×N and matches the
//! construction this design descends from.
//!
//! Edges are then normalized by a row-wise softmax and pruned to the τ
//! largest entries per row (ties keep the lower column index, survivors are
//! not renormalized). The top-k step is a constant mask on the tape:
//! gradients flow straight through kept entries and not at all through
//! pruned ones.

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape};

/// Which graph-learning ablation to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphVariant {
    /// Per-scale directed graphs (the full method).
    Standard,
    /// One graph learned at scale 1 and shared by all scales.
    SharedOne,
    /// Symmetric graphs from M1 alone: sparsify(ReLU(M1·M1ᵀ)) averaged with
    /// its transpose. Exactly symmetric; row sparsity may reach 2τ and row
    /// sums may exceed 1, which the downstream degree normalization absorbs.
    Symmetric,
    /// No top-k pruning: softmax output used as-is.
    Full,
}

/// Tape handles of the graph-learning parameters.
#[derive(Debug, Clone, Copy)]
pub struct GraphLeaves {
    /// [N, d_e] node embeddings, shared across scales.
    pub e_nodes: NodeId,
    /// [K, d_e] scale embeddings.
    pub e_scale: NodeId,
    /// [K] receiver rates θ.
    pub theta: NodeId,
    /// [K] sender rates φ.
    pub phi: NodeId,
}

/// Output of [`learn_graphs`]: the usable graphs plus the intermediate
/// stages (pre-softmax and post-softmax), kept for diagnostics and for
/// conditioning checks in gradient tests.
#[derive(Debug, Clone)]
pub struct LearnedGraphs {
    /// K adjacency nodes, each [N, N].
    pub graphs: Vec<NodeId>,
    /// ReLU'd pre-softmax adjacencies.
    pub raw: Vec<NodeId>,
    /// Softmax outputs before pruning.
    pub softmax: Vec<NodeId>,
}

/// E_spec^k = E_nodes ⊙ (row k of E_scale broadcast over rows).
pub fn scale_specific_embedding(
    tape: &mut Tape,
    leaves: &GraphLeaves,
    k: usize,
) -> Result<NodeId> {
    let row = tape.row_slice(leaves.e_scale, k)?;
    tape.mul_row_vec(leaves.e_nodes, row)
}

/// Directed raw adjacency `ReLU(M1·M2ᵀ − M2·M1ᵀ)` with
/// `M1 = tanh(θ_k·E_spec)`, `M2 = tanh(φ_k·E_spec)`.
pub fn raw_adjacency(
    tape: &mut Tape,
    e_spec: NodeId,
    theta_k: NodeId,
    phi_k: NodeId,
) -> Result<NodeId> {
    let m1 = tape.mul_scalar_tensor(e_spec, theta_k)?;
    let m1 = tape.tanh(m1)?;
    let m2 = tape.mul_scalar_tensor(e_spec, phi_k)?;
    let m2 = tape.tanh(m2)?;
    let m2t = tape.transpose(m2)?;
    let m1t = tape.transpose(m1)?;
    let fwd = tape.matmul(m1, m2t)?;
    let bwd = tape.matmul(m2, m1t)?;
    let s = tape.sub(fwd, bwd)?;
    tape.relu(s)
}

/// 0/1 keep-mask of the τ largest entries per row of a [rows, cols] matrix;
/// ties keep the lower column index.
pub fn topk_mask(values: &[f64], rows: usize, cols: usize, tau: usize) -> Vec<f64> {
    let mut mask = vec![0.0; rows * cols];
    let keep = tau.min(cols);
    let mut order: Vec<usize> = Vec::with_capacity(cols);
    for i in 0..rows {
        let row = &values[i * cols..(i + 1) * cols];
        order.clear();
        order.extend(0..cols);
        // stable sort by value descending preserves ascending column order
        // among equals, which is exactly the stated tie-break
        order.sort_by(|a, b| row[*b].partial_cmp(&row[*a]).unwrap());
        for &j in order.iter().take(keep) {
            mask[i * cols + j] = 1.0;
        }
    }
    mask
}

/// Row-wise softmax followed by per-row top-τ pruning (no renormalization).
/// Returns (softmax node, pruned node).
pub fn sparsify(tape: &mut Tape, a_full: NodeId, tau: usize) -> Result<(NodeId, NodeId)> {
    let shape = tape.shape(a_full).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::InvalidShape {
            op: "sparsify",
            shape,
            msg: "adjacency must be square".into(),
        });
    }
    let n = shape[0];
    if tau == 0 {
        return Err(Error::Contract("sparsify requires tau >= 1".into()));
    }
    let sm = tape.softmax_rows(a_full)?;
    if tau >= n {
        return Ok((sm, sm));
    }
    let mask = topk_mask(tape.value(sm), n, n, tau);
    let pruned = tape.mask_mul(sm, mask)?;
    Ok((sm, pruned))
}

/// Learns the K scale graphs under the chosen variant.
pub fn learn_graphs(
    tape: &mut Tape,
    leaves: &GraphLeaves,
    k_scales: usize,
    tau: usize,
    variant: GraphVariant,
) -> Result<LearnedGraphs> {
    let n = tape.shape(leaves.e_nodes)[0];
    if tau == 0 || tau > n {
        return Err(Error::Config(format!(
            "tau must be in [1, N]; got tau={tau}, N={n}"
        )));
    }
    let mut graphs = Vec::with_capacity(k_scales);
    let mut raw = Vec::with_capacity(k_scales);
    let mut softmax = Vec::with_capacity(k_scales);

    let scales_to_compute = if variant == GraphVariant::SharedOne {
        1
    } else {
        k_scales
    };
    for k in 0..scales_to_compute {
        let e_spec = scale_specific_embedding(tape, leaves, k)?;
        let theta_k = tape.select(leaves.theta, k)?;
        let phi_k = tape.select(leaves.phi, k)?;
        let (a_raw, a) = match variant {
            GraphVariant::Standard | GraphVariant::SharedOne => {
                let a_raw = raw_adjacency(tape, e_spec, theta_k, phi_k)?;
                let (sm, pruned) = sparsify(tape, a_raw, tau)?;
                softmax.push(sm);
                (a_raw, pruned)
            }
            GraphVariant::Full => {
                let a_raw = raw_adjacency(tape, e_spec, theta_k, phi_k)?;
                let sm = tape.softmax_rows(a_raw)?;
                softmax.push(sm);
                (a_raw, sm)
            }
            GraphVariant::Symmetric => {
                // one-sided features only; symmetrize after pruning
                let m1 = tape.mul_scalar_tensor(e_spec, theta_k)?;
                let m1 = tape.tanh(m1)?;
                let m1t = tape.transpose(m1)?;
                let s = tape.matmul(m1, m1t)?;
                let a_raw = tape.relu(s)?;
                let (sm, pruned) = sparsify(tape, a_raw, tau)?;
                softmax.push(sm);
                let prunedt = tape.transpose(pruned)?;
                let sum = tape.add(pruned, prunedt)?;
                let symm = tape.scale(sum, 0.5)?;
                (a_raw, symm)
            }
        };
        raw.push(a_raw);
        graphs.push(a);
    }
    if variant == GraphVariant::SharedOne {
        let g = graphs[0];
        let r = raw[0];
        let s = softmax[0];
        graphs = vec![g; k_scales];
        raw = vec![r; k_scales];
        softmax = vec![s; k_scales];
    }
    Ok(LearnedGraphs {
        graphs,
        raw,
        softmax,
    })
}

/// Serializes one adjacency as CSV with a `# scale=k tau=τ` header line.
pub fn graph_to_csv(a: &[f64], n: usize, scale_index: usize, tau: usize) -> String {
    let mut out = format!("# scale={scale_index} tau={tau}\n");
    for i in 0..n {
        let row: Vec<String> = (0..n).map(|j| format!("{}", a[i * n + j])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
