//! Feature pyramid: turns a raw N×T window into K per-scale features
//! X^1…X^K by repeated time-axis downsampling.
//!
//! X^1 lifts the raw window to c channels with a 1×1 stride-1 convolution
//! (an interpretation — the first scale must keep full length T yet carry c
//! channels, and a channel-lifting conv is the minimal construction). Each
//! coarser scale is the pointwise sum of two branches computed from the
//! previous one:
//!
//! * a strided convolution branch (scale k uses kernel `kernels[k-2]`,
//!   stride 2 by default) under ReLU, and
//! * a parallel 1×1 convolution + ReLU + 1×2 pooling branch.
//!
//! Convolution runs along time only, kernels shared across variables, so
//! variables never mix here — cross-variable structure is the graph
//! module's job. Disabling `parallel_branch` drops the second branch, which
//! is the "without parallel CNNs" ablation.

use crate::error::{Error, Result};
use crate::tensor::{NodeId, PoolKind, Tape};

/// Static configuration of the pyramid.
#[derive(Debug, Clone)]
pub struct PyramidConfig {
    /// Number of scales K (≥ 1; K=1 means the lift conv only).
    pub k_scales: usize,
    /// K−1 kernel lengths for the strided branches, each ≥ 2.
    pub kernels: Vec<usize>,
    /// Downsampling factor between scales (≥ 2). The pooling branch uses
    /// kernel = stride so both branches land on floor(L/stride).
    pub stride: usize,
    /// Channel width c, uniform across scales.
    pub channels: usize,
    /// False switches off the 1×1-conv + pooling branch.
    pub parallel_branch: bool,
    /// Pooling flavor of the parallel branch (max by convention).
    pub pool: PoolKind,
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_scales == 0 {
            return Err(Error::Config("pyramid needs at least one scale".into()));
        }
        if self.kernels.len() + 1 != self.k_scales {
            return Err(Error::Config(format!(
                "pyramid with K={} scales needs {} kernels, got {}",
                self.k_scales,
                self.k_scales - 1,
                self.kernels.len()
            )));
        }
        if self.stride < 2 {
            return Err(Error::Config("pyramid stride must be >= 2".into()));
        }
        if let Some(k) = self.kernels.iter().find(|k| **k < 2) {
            return Err(Error::Config(format!(
                "pyramid kernels must be >= 2, got {k}"
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("pyramid channels must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-scale sequence lengths `[T, floor(T/s), floor(T/s^2), …]`.
///
/// Floor chains compose (`floor(floor(T/s)/s) == floor(T/s^2)`), so entry k
/// equals `floor(T / s^(k-1))` exactly.
pub fn scale_lengths(t_window: usize, k_scales: usize, stride: usize) -> Result<Vec<usize>> {
    let min = stride
        .checked_pow(k_scales.saturating_sub(1) as u32)
        .ok_or_else(|| Error::Config("stride^(K-1) overflows".into()))?;
    if t_window < min {
        return Err(Error::Config(format!(
            "window T={t_window} too short for K={k_scales} scales at stride {stride} (need >= {min})"
        )));
    }
    let mut lengths = Vec::with_capacity(k_scales);
    let mut l = t_window;
    for _ in 0..k_scales {
        lengths.push(l);
        l /= stride;
    }
    Ok(lengths)
}

/// Zero-padding for the strided branch: total `max(0, kernel - stride)`,
/// split left-heavy. This makes the strided conv emit exactly
/// `floor(L/stride)` positions, the same as the pooling branch.
pub fn pad_split(kernel: usize, stride: usize) -> (usize, usize) {
    let total = kernel.saturating_sub(stride);
    (total.div_ceil(2), total / 2)
}

/// Tape handles of the pyramid's parameters for one forward pass.
#[derive(Debug, Clone)]
pub struct PyramidLeaves {
    /// 1×1 lift: weight [c,1,1], bias [c].
    pub lift_w: NodeId,
    pub lift_b: NodeId,
    /// Strided branches, K−1 each: weight [c,c,kernel], bias [c].
    pub rec_w: Vec<NodeId>,
    pub rec_b: Vec<NodeId>,
    /// Parallel branches, K−1 each: weight [c,c,1], bias [c]. Empty when
    /// `parallel_branch` is off.
    pub norm_w: Vec<NodeId>,
    pub norm_b: Vec<NodeId>,
}

/// Runs the pyramid on a raw `[N, 1, T]` window node, returning K features
/// of shape `[N, c, L_k]` ordered fine to coarse.
pub fn pyramid_forward(
    tape: &mut Tape,
    x: NodeId,
    cfg: &PyramidConfig,
    leaves: &PyramidLeaves,
) -> Result<Vec<NodeId>> {
    cfg.validate()?;
    let mut features = Vec::with_capacity(cfg.k_scales);
    let mut current = tape.conv1d(x, leaves.lift_w, leaves.lift_b, 1, 0, 0, 1)?;
    features.push(current);
    for (i, &kernel) in cfg.kernels.iter().enumerate() {
        let (pad_l, pad_r) = pad_split(kernel, cfg.stride);
        let rec = tape.conv1d(
            current,
            leaves.rec_w[i],
            leaves.rec_b[i],
            cfg.stride,
            pad_l,
            pad_r,
            1,
        )?;
        let rec = tape.relu(rec)?;
        current = if cfg.parallel_branch {
            let norm = tape.conv1d(current, leaves.norm_w[i], leaves.norm_b[i], 1, 0, 0, 1)?;
            let norm = tape.relu(norm)?;
            let norm = tape.pool1d(norm, cfg.stride, cfg.stride, cfg.pool)?;
            tape.add(rec, norm)?
        } else {
            rec
        };
        features.push(current);
    }
    Ok(features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(k_scales: usize, kernels: Vec<usize>, channels: usize, parallel: bool) -> PyramidConfig {
        PyramidConfig {
            k_scales,
            kernels,
            stride: 2,
            channels,
            parallel_branch: parallel,
            pool: PoolKind::Max,
        }
    }

    /// Random leaves; optionally zeroed parallel-branch parameters.
    fn make_leaves(
        tape: &mut Tape,
        cfg: &PyramidConfig,
        rng: &mut ChaCha8Rng,
        zero_norm: bool,
        zero_bias: bool,
    ) -> PyramidLeaves {
        let c = cfg.channels;
        let mut randv = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
        };
        let lift_w = tape.leaf_parts(vec![c, 1, 1], randv(c), true).unwrap();
        let lift_bv = if zero_bias { vec![0.0; c] } else { randv(c) };
        let lift_b = tape.leaf_parts(vec![c], lift_bv, true).unwrap();
        let mut rec_w = Vec::new();
        let mut rec_b = Vec::new();
        let mut norm_w = Vec::new();
        let mut norm_b = Vec::new();
        for &k in &cfg.kernels {
            let wv = randv(c * c * k);
            rec_w.push(tape.leaf_parts(vec![c, c, k], wv, true).unwrap());
            let bv = if zero_bias { vec![0.0; c] } else { randv(c) };
            rec_b.push(tape.leaf_parts(vec![c], bv, true).unwrap());
            let nv = if zero_norm { vec![0.0; c * c] } else { randv(c * c) };
            norm_w.push(tape.leaf_parts(vec![c, c, 1], nv, true).unwrap());
            let nb = if zero_norm || zero_bias { vec![0.0; c] } else { randv(c) };
            norm_b.push(tape.leaf_parts(vec![c], nb, true).unwrap());
        }
        PyramidLeaves {
            lift_w,
            lift_b,
            rec_w,
            rec_b,
            norm_w,
            norm_b,
        }
    }

    #[test]
    fn test_scale_lengths_pinned_cases() {
        assert_eq!(scale_lengths(168, 4, 2).unwrap(), vec![168, 84, 42, 21]);
        assert_eq!(scale_lengths(32, 1, 2).unwrap(), vec![32]);
        assert_eq!(scale_lengths(33, 3, 2).unwrap(), vec![33, 16, 8]);
    }

    #[test]
    fn test_scale_lengths_rejects_short_window() {
        let err = scale_lengths(7, 4, 2).unwrap_err();
        assert!(err.to_string().contains("too short"), "{err}");
    }

    #[test]
    fn test_pad_split_rule() {
        assert_eq!(pad_split(7, 2), (3, 2));
        assert_eq!(pad_split(6, 2), (2, 2));
        assert_eq!(pad_split(3, 2), (1, 0));
        assert_eq!(pad_split(2, 2), (0, 0));
        assert_eq!(pad_split(2, 3), (0, 0));
    }

    #[test]
    fn test_forward_shapes_small_case() {
        // N=2, T=8, K=2, kernel 3 -> lengths [8, 4]
        let c = cfg(2, vec![3], 3, true);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape
            .leaf_parts(vec![2, 1, 8], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect(), false)
            .unwrap();
        let leaves = make_leaves(&mut tape, &c, &mut rng, false, false);
        let feats = pyramid_forward(&mut tape, x, &c, &leaves).unwrap();
        assert_eq!(feats.len(), 2);
        assert_eq!(tape.shape(feats[0]), &[2, 3, 8]);
        assert_eq!(tape.shape(feats[1]), &[2, 3, 4]);
    }

    #[test]
    fn test_zero_input_zero_bias_gives_zero_features() {
        let c = cfg(3, vec![7, 6], 4, true);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = tape.leaf_parts(vec![2, 1, 16], vec![0.0; 32], false).unwrap();
        let leaves = make_leaves(&mut tape, &c, &mut rng, false, true);
        let feats = pyramid_forward(&mut tape, x, &c, &leaves).unwrap();
        for f in feats {
            assert!(tape.value(f).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn test_no_parallel_equals_zeroed_norm_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xdata: Vec<f64> = (0..3 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // run with the parallel branch zeroed
        let cpar = cfg(3, vec![3, 2], 4, true);
        let mut tape1 = Tape::new();
        let x1 = tape1.leaf_parts(vec![3, 1, 16], xdata.clone(), false).unwrap();
        let mut rng1 = ChaCha8Rng::seed_from_u64(9);
        let leaves1 = make_leaves(&mut tape1, &cpar, &mut rng1, true, false);
        let f1 = pyramid_forward(&mut tape1, x1, &cpar, &leaves1).unwrap();

        // run without the branch, same seed so shared weights match
        let cnone = cfg(3, vec![3, 2], 4, false);
        let mut tape2 = Tape::new();
        let x2 = tape2.leaf_parts(vec![3, 1, 16], xdata, false).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        let leaves2 = make_leaves(&mut tape2, &cnone, &mut rng2, true, false);
        let f2 = pyramid_forward(&mut tape2, x2, &cnone, &leaves2).unwrap();

        for (a, b) in f1.iter().zip(&f2) {
            assert_eq!(tape1.value(*a), tape2.value(*b));
        }
    }

    #[test]
    fn test_branch_length_agreement_property() {
        // if the two branches disagreed in length, the pointwise add inside
        // pyramid_forward would fail; assert the full shape chain instead
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..40 {
            let t_window = rng.gen_range(16..=512);
            let k_scales = rng.gen_range(2..=4usize);
            let kernels: Vec<usize> = (0..k_scales - 1).map(|_| rng.gen_range(2..=9)).collect();
            let c = cfg(k_scales, kernels, 2, true);
            let mut tape = Tape::new();
            let x = tape
                .leaf_parts(
                    vec![2, 1, t_window],
                    (0..2 * t_window).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    false,
                )
                .unwrap();
            let mut lrng = ChaCha8Rng::seed_from_u64(5);
            let leaves = make_leaves(&mut tape, &c, &mut lrng, false, false);
            let feats = pyramid_forward(&mut tape, x, &c, &leaves).unwrap();
            let lengths = scale_lengths(t_window, k_scales, 2).unwrap();
            for (k, f) in feats.iter().enumerate() {
                assert_eq!(tape.shape(*f), &[2, 2, lengths[k]]);
            }
            // monotone length decay
            for w in lengths.windows(2) {
                assert!(w[0] > w[1]);
            }
        }
    }

    #[test]
    fn test_variable_independence() {
        let c = cfg(3, vec![5, 3], 3, true);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 4;
        let t_window = 24;
        let base: Vec<f64> = (0..n * t_window).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut poked = base.clone();
        let var = 2usize;
        for j in 0..t_window {
            poked[var * t_window + j] += 0.37;
        }

        let run = |xdata: Vec<f64>| -> Vec<Vec<f64>> {
            let mut tape = Tape::new();
            let x = tape.leaf_parts(vec![n, 1, t_window], xdata, false).unwrap();
            let mut lrng = ChaCha8Rng::seed_from_u64(7);
            let leaves = make_leaves(&mut tape, &c, &mut lrng, false, false);
            pyramid_forward(&mut tape, x, &c, &leaves)
                .unwrap()
                .into_iter()
                .map(|f| tape.value(f).to_vec())
                .collect()
        };

        let f_base = run(base);
        let f_poked = run(poked);
        let lengths = scale_lengths(t_window, 3, 2).unwrap();
        for (k, (a, b)) in f_base.iter().zip(&f_poked).enumerate() {
            let per_var = 3 * lengths[k];
            for v in 0..n {
                let rows_a = &a[v * per_var..(v + 1) * per_var];
                let rows_b = &b[v * per_var..(v + 1) * per_var];
                if v == var {
                    assert!(rows_a.iter().zip(rows_b).any(|(x, y)| x != y));
                } else {
                    assert_eq!(rows_a, rows_b);
                }
            }
        }
    }
}
