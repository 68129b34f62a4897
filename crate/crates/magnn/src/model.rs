//! Full model assembly: pyramid → per-scale graphs → per-scale joint
//! propagation → gated fusion → convolutional output head, plus the training
//! objective and checkpointing.
//!
//! A `ModelState` is a flat map of named f64 parameter tensors; the key set
//! is a pure function of `ModelConfig`, which is what makes checkpoints
//! verifiable. Forward passes are assembled on a fresh [`Tape`] per batch:
//! parameters are bound once, the K graphs and their normalizations are
//! built once (they do not depend on the input window), and each window in
//! the batch reuses them.

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{self, FusionLeaves, FusionVariant};
use crate::gnn::{self, GnnVariant, Propagators, StepMasks, TcnLeaves, TCN_KERNEL};
use crate::graph::{self, GraphLeaves, GraphVariant, LearnedGraphs};
use crate::pyramid::{self, PyramidConfig, PyramidLeaves};
use crate::tensor::{NodeId, PoolKind, Tape, Tensor};

/// Checkpoint container magic and format version.
pub const CHECKPOINT_MAGIC: &[u8; 9] = b"MAGNNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Every hyper-parameter of the model in one validated record.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Number of variables N.
    pub n_vars: usize,
    /// Input window length T.
    pub window: usize,
    /// Number of scales K.
    pub k_scales: usize,
    /// K−1 kernel lengths of the strided pyramid branches.
    pub kernels: Vec<usize>,
    /// Downsampling stride between scales.
    pub stride: usize,
    /// Channel width c of every scale feature.
    pub channels: usize,
    /// Embedding width d_e of node and scale embeddings.
    pub embed_dim: usize,
    /// Neighbors kept per row of each learned graph.
    pub tau: usize,
    /// Graph-convolution layers per direction.
    pub gnn_depth: usize,
    /// Width d_s of the per-scale representations.
    pub d_s: usize,
    /// Hidden width d_1 of the fusion gate.
    pub d_1: usize,
    /// Forecast horizon h (predict x_{T+h}).
    pub horizon: usize,
    /// Dropout probability after each graph-convolution stack (training
    /// only).
    pub dropout: f64,
    pub graph_variant: GraphVariant,
    pub gnn_variant: GnnVariant,
    pub fusion_variant: FusionVariant,
    /// False drops the pyramid's 1×1-conv + pooling branch.
    pub pyramid_parallel: bool,
    /// Seed for parameter initialization (and downstream shuffling).
    pub seed: u64,
}

/// Default strided-branch kernels: [7, 6, 3] for four scales, truncated for
/// fewer, extended with 3s for more.
pub fn default_kernels(k_scales: usize) -> Vec<usize> {
    let base = [7usize, 6, 3];
    (0..k_scales.saturating_sub(1))
        .map(|i| *base.get(i).unwrap_or(&3))
        .collect()
}

/// Default neighbor cap: the spread of dataset sizes calls for τ = 40 on
/// wide datasets and a small cap on narrow ones, never exceeding N.
pub fn default_tau(n_vars: usize) -> usize {
    if n_vars > 50 {
        40.min(n_vars)
    } else {
        8.min(n_vars)
    }
}

impl ModelConfig {
    /// Defaults for a dataset of `n_vars` variables at forecast horizon
    /// `horizon`.
    pub fn for_dataset(n_vars: usize, horizon: usize) -> Self {
        let k_scales = 4;
        ModelConfig {
            n_vars,
            window: 168,
            k_scales,
            kernels: default_kernels(k_scales),
            stride: 2,
            channels: 16,
            embed_dim: 16,
            tau: default_tau(n_vars),
            gnn_depth: 2,
            d_s: 16,
            d_1: 2 * k_scales,
            horizon,
            dropout: 0.1,
            graph_variant: GraphVariant::Standard,
            gnn_variant: GnnVariant::Two,
            fusion_variant: FusionVariant::Gated,
            pyramid_parallel: true,
            seed: 42,
        }
    }

    /// The pyramid slice of this config.
    pub fn pyramid(&self) -> PyramidConfig {
        PyramidConfig {
            k_scales: self.k_scales,
            kernels: self.kernels.clone(),
            stride: self.stride,
            channels: self.channels,
            parallel_branch: self.pyramid_parallel,
            pool: PoolKind::Max,
        }
    }

    /// Per-scale sequence lengths.
    pub fn scale_lengths(&self) -> Result<Vec<usize>> {
        pyramid::scale_lengths(self.window, self.k_scales, self.stride)
    }

    pub fn validate(&self) -> Result<()> {
        self.pyramid().validate()?;
        self.scale_lengths()?;
        for (field, v) in [
            ("n_vars", self.n_vars),
            ("window", self.window),
            ("embed_dim", self.embed_dim),
            ("gnn_depth", self.gnn_depth),
            ("d_s", self.d_s),
            ("d_1", self.d_1),
            ("horizon", self.horizon),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{field} must be at least 1")));
            }
        }
        if self.tau == 0 || self.tau > self.n_vars {
            return Err(Error::Config(format!(
                "tau must be in [1, N={}]; got {}",
                self.n_vars, self.tau
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1); got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Errors with the first differing field when `other` disagrees — used
    /// to reject checkpoints loaded under a different configuration.
    pub fn assert_same(&self, other: &ModelConfig) -> Result<()> {
        if self == other {
            return Ok(());
        }
        let a = serde_json::to_value(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let b = serde_json::to_value(other).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if let (serde_json::Value::Object(a), serde_json::Value::Object(b)) = (a, b) {
            for (key, va) in &a {
                if b.get(key) != Some(va) {
                    return Err(Error::Checkpoint(format!(
                        "config mismatch at {key}: {va} vs {}",
                        b.get(key).unwrap_or(&serde_json::Value::Null)
                    )));
                }
            }
        }
        Err(Error::Checkpoint("config mismatch".into()))
    }

    /// Width of the fused representation the output head consumes.
    fn head_width(&self) -> usize {
        match self.fusion_variant {
            FusionVariant::Concat => self.k_scales * self.d_s,
            _ => self.d_s,
        }
    }
}

enum Init {
    /// U[−0.5, 0.5] — embeddings.
    Embedding,
    /// U[−1, 1] — the scalar receiver/sender rates.
    Rate,
    /// U[±√(6/fan_in)] — weights feeding ReLU stacks (unit signal gain).
    FanIn(usize),
    /// Biases.
    Zero,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

/// The full parameter registry for a config, in a fixed order that doubles
/// as the RNG draw order during initialization. The key set (and every
/// shape) is a pure function of the config.
fn parameter_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let lengths = cfg.scale_lengths()?;
    let (n, c, d_s, d_e, k_scales) = (cfg.n_vars, cfg.channels, cfg.d_s, cfg.embed_dim, cfg.k_scales);
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| {
        specs.push(ParamSpec { name, shape, init });
    };

    push("pyr.k1.w".into(), vec![c, 1, 1], Init::FanIn(1));
    push("pyr.k1.b".into(), vec![c], Init::Zero);
    for (i, &kernel) in cfg.kernels.iter().enumerate() {
        let k = i + 2;
        push(
            format!("pyr.k{k}.rec.w"),
            vec![c, c, kernel],
            Init::FanIn(c * kernel),
        );
        push(format!("pyr.k{k}.rec.b"), vec![c], Init::Zero);
        if cfg.pyramid_parallel {
            push(format!("pyr.k{k}.norm.w"), vec![c, c, 1], Init::FanIn(c));
            push(format!("pyr.k{k}.norm.b"), vec![c], Init::Zero);
        }
    }

    push("graph.e_nodes".into(), vec![n, d_e], Init::Embedding);
    push("graph.e_scale".into(), vec![k_scales, d_e], Init::Embedding);
    push("graph.theta".into(), vec![k_scales], Init::Rate);
    push("graph.phi".into(), vec![k_scales], Init::Rate);

    for k in 1..=k_scales {
        for j in 1..=cfg.gnn_depth {
            let (rows, fan) = if j == 1 { (c, c) } else { (d_s, d_s) };
            push(
                format!("mtg.k{k}.in.l{j}.w"),
                vec![rows, d_s],
                Init::FanIn(fan),
            );
        }
        if cfg.gnn_variant == GnnVariant::Two {
            for j in 1..=cfg.gnn_depth {
                let (rows, fan) = if j == 1 { (c, c) } else { (d_s, d_s) };
                push(
                    format!("mtg.k{k}.out.l{j}.w"),
                    vec![rows, d_s],
                    Init::FanIn(fan),
                );
            }
        }
    }

    for (k, &len) in (1..=k_scales).zip(&lengths) {
        for j in 1..=gnn::tcn_layer_count(len, TCN_KERNEL) {
            push(
                format!("tcn.k{k}.l{j}.w"),
                vec![d_s, d_s, TCN_KERNEL],
                Init::FanIn(d_s * TCN_KERNEL),
            );
            push(format!("tcn.k{k}.l{j}.b"), vec![d_s], Init::Zero);
        }
    }

    if cfg.fusion_variant == FusionVariant::Gated {
        push(
            "fuse.w1".into(),
            vec![n * d_s, cfg.d_1],
            Init::FanIn(n * d_s),
        );
        push("fuse.b1".into(), vec![1, cfg.d_1], Init::Zero);
        push("fuse.w2".into(), vec![cfg.d_1, k_scales], Init::FanIn(cfg.d_1));
        push("fuse.b2".into(), vec![1, k_scales], Init::Zero);
    }

    let width = cfg.head_width();
    push("head.w1".into(), vec![d_s, 1, width], Init::FanIn(width));
    push("head.b1".into(), vec![d_s], Init::Zero);
    push("head.w2".into(), vec![1, d_s, 1], Init::FanIn(d_s));
    push("head.b2".into(), vec![1], Init::Zero);

    Ok(specs)
}

/// All trainable parameters, keyed by stable names.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub params: BTreeMap<String, Tensor>,
}

impl ModelState {
    /// Fresh parameters for `cfg`, drawn from a ChaCha stream seeded with
    /// `cfg.seed` in registry order.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        let specs = parameter_specs(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = BTreeMap::new();
        for spec in specs {
            let numel: usize = spec.shape.iter().product();
            let data: Vec<f64> = match spec.init {
                Init::Embedding => (0..numel).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                Init::Rate => (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                Init::FanIn(fan) => {
                    let bound = (6.0 / fan as f64).sqrt();
                    (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
                }
                Init::Zero => vec![0.0; numel],
            };
            params.insert(spec.name, Tensor::from_vec(spec.shape, data, true)?);
        }
        Ok(ModelState { params })
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.data.len()).sum()
    }

    /// Binds every parameter onto `tape`; `trainable` controls gradient
    /// tracking (false for evaluation tapes).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BTreeMap<String, NodeId>> {
        let mut bound = BTreeMap::new();
        for (name, tensor) in &self.params {
            let id = tape.leaf_parts(tensor.shape.clone(), tensor.data.clone(), trainable)?;
            bound.insert(name.clone(), id);
        }
        Ok(bound)
    }
}

fn bound_node(bound: &BTreeMap<String, NodeId>, name: &str) -> Result<NodeId> {
    bound
        .get(name)
        .copied()
        .ok_or_else(|| Error::Contract(format!("parameter {name} is not bound")))
}

/// The input-independent part of a forward pass: learned graphs and their
/// normalized propagation matrices, one per scale.
pub struct PreparedGraphs {
    pub learned: LearnedGraphs,
    pub props: Vec<Propagators>,
}

/// Learns the K graphs and normalizes them. Call once per tape; every
/// window forwarded on the tape reuses the result.
pub fn prepare_graphs(
    tape: &mut Tape,
    bound: &BTreeMap<String, NodeId>,
    cfg: &ModelConfig,
) -> Result<PreparedGraphs> {
    let leaves = GraphLeaves {
        e_nodes: bound_node(bound, "graph.e_nodes")?,
        e_scale: bound_node(bound, "graph.e_scale")?,
        theta: bound_node(bound, "graph.theta")?,
        phi: bound_node(bound, "graph.phi")?,
    };
    let learned = graph::learn_graphs(tape, &leaves, cfg.k_scales, cfg.tau, cfg.graph_variant)?;
    let mut props = Vec::with_capacity(cfg.k_scales);
    for a in &learned.graphs {
        props.push(gnn::build_propagators(tape, *a, cfg.gnn_variant)?);
    }
    Ok(PreparedGraphs { learned, props })
}

fn pyramid_leaves(bound: &BTreeMap<String, NodeId>, cfg: &ModelConfig) -> Result<PyramidLeaves> {
    let mut rec_w = Vec::new();
    let mut rec_b = Vec::new();
    let mut norm_w = Vec::new();
    let mut norm_b = Vec::new();
    for k in 2..=cfg.k_scales {
        rec_w.push(bound_node(bound, &format!("pyr.k{k}.rec.w"))?);
        rec_b.push(bound_node(bound, &format!("pyr.k{k}.rec.b"))?);
        if cfg.pyramid_parallel {
            norm_w.push(bound_node(bound, &format!("pyr.k{k}.norm.w"))?);
            norm_b.push(bound_node(bound, &format!("pyr.k{k}.norm.b"))?);
        }
    }
    Ok(PyramidLeaves {
        lift_w: bound_node(bound, "pyr.k1.w")?,
        lift_b: bound_node(bound, "pyr.k1.b")?,
        rec_w,
        rec_b,
        norm_w,
        norm_b,
    })
}

fn mtg_weights(
    bound: &BTreeMap<String, NodeId>,
    cfg: &ModelConfig,
    k: usize,
    direction: &str,
) -> Result<Vec<NodeId>> {
    (1..=cfg.gnn_depth)
        .map(|j| bound_node(bound, &format!("mtg.k{k}.{direction}.l{j}.w")))
        .collect()
}

fn tcn_leaves(
    bound: &BTreeMap<String, NodeId>,
    k: usize,
    len: usize,
) -> Result<TcnLeaves> {
    let layers = gnn::tcn_layer_count(len, TCN_KERNEL);
    let mut ws = Vec::with_capacity(layers);
    let mut bs = Vec::with_capacity(layers);
    for j in 1..=layers {
        ws.push(bound_node(bound, &format!("tcn.k{k}.l{j}.w"))?);
        bs.push(bound_node(bound, &format!("tcn.k{k}.l{j}.b"))?);
    }
    Ok(TcnLeaves { ws, bs })
}

fn fusion_leaves(
    bound: &BTreeMap<String, NodeId>,
    cfg: &ModelConfig,
) -> Result<Option<FusionLeaves>> {
    if cfg.fusion_variant != FusionVariant::Gated {
        return Ok(None);
    }
    Ok(Some(FusionLeaves {
        w1: bound_node(bound, "fuse.w1")?,
        b1: bound_node(bound, "fuse.b1")?,
        w2: bound_node(bound, "fuse.w2")?,
        b2: bound_node(bound, "fuse.b2")?,
    }))
}

/// One forwarded window: the [N] prediction node and, when the fusion
/// variant defines them, the [1, K] importance scores.
pub struct SampleForward {
    pub prediction: NodeId,
    pub alpha: Option<NodeId>,
}

/// Draws the per-timestep dropout masks for one window. Draw order is part
/// of the reproducibility contract: scales ascending, timesteps ascending,
/// incoming direction before outgoing.
fn draw_masks(
    cfg: &ModelConfig,
    lengths: &[usize],
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<StepMasks>> {
    let keep_scale = 1.0 / (1.0 - cfg.dropout);
    let size = cfg.n_vars * cfg.d_s;
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..size)
            .map(|_| {
                if rng.gen::<f64>() < cfg.dropout {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect()
    };
    lengths
        .iter()
        .map(|&len| {
            (0..len)
                .map(|_| StepMasks {
                    incoming: Some(draw(rng)),
                    outgoing: match cfg.gnn_variant {
                        GnnVariant::Two => Some(draw(rng)),
                        GnnVariant::One => None,
                    },
                })
                .collect()
        })
        .collect()
}

/// Forwards one scaled window (variable-major, N·T values) through the
/// model. `dropout_rng` enables training-mode dropout.
pub fn forward_sample(
    tape: &mut Tape,
    bound: &BTreeMap<String, NodeId>,
    cfg: &ModelConfig,
    prepared: &PreparedGraphs,
    window: &[f64],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<SampleForward> {
    if window.len() != cfg.n_vars * cfg.window {
        return Err(Error::InvalidShape {
            op: "forward",
            shape: vec![window.len()],
            msg: format!(
                "window must hold N·T = {}·{} values",
                cfg.n_vars, cfg.window
            ),
        });
    }
    let lengths = cfg.scale_lengths()?;
    let x = tape.constant(vec![cfg.n_vars, 1, cfg.window], window.to_vec())?;
    let pyr_cfg = cfg.pyramid();
    let pyr = pyramid_leaves(bound, cfg)?;
    let features = pyramid::pyramid_forward(tape, x, &pyr_cfg, &pyr)?;

    let masks = match dropout_rng {
        Some(rng) if cfg.dropout > 0.0 => Some(draw_masks(cfg, &lengths, rng)),
        _ => None,
    };

    let mut h_list = Vec::with_capacity(cfg.k_scales);
    for (idx, feature) in features.iter().enumerate() {
        let k = idx + 1;
        let w_in = mtg_weights(bound, cfg, k, "in")?;
        let w_out = match cfg.gnn_variant {
            GnnVariant::Two => Some(mtg_weights(bound, cfg, k, "out")?),
            GnnVariant::One => None,
        };
        let tcn = tcn_leaves(bound, k, lengths[idx])?;
        let h = gnn::scale_representation(
            tape,
            *feature,
            &prepared.props[idx],
            &w_in,
            w_out.as_deref(),
            &tcn,
            masks.as_ref().map(|m| m[idx].as_slice()),
        )?;
        h_list.push(h);
    }

    let fuse_leaves = fusion_leaves(bound, cfg)?;
    let fused = fusion::fuse(tape, &h_list, cfg.fusion_variant, fuse_leaves.as_ref())?;

    let width = cfg.head_width();
    let h_m = tape.reshape(fused.h_m, vec![cfg.n_vars, 1, width])?;
    let w1 = bound_node(bound, "head.w1")?;
    let b1 = bound_node(bound, "head.b1")?;
    let z = tape.conv1d(h_m, w1, b1, 1, 0, 0, 1)?;
    let z = tape.relu(z)?;
    let w2 = bound_node(bound, "head.w2")?;
    let b2 = bound_node(bound, "head.b2")?;
    let out = tape.conv1d(z, w2, b2, 1, 0, 0, 1)?;
    let prediction = tape.reshape(out, vec![cfg.n_vars])?;
    Ok(SampleForward {
        prediction,
        alpha: fused.alpha,
    })
}

/// Mean-over-batch of per-sample summed squared error, built on the tape:
/// `(1/B)·Σ_b Σ_j (pred_bj − target_bj)²`.
pub fn batch_loss(
    tape: &mut Tape,
    predictions: &[NodeId],
    targets: &[Vec<f64>],
) -> Result<NodeId> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "batch_loss",
            lhs: vec![predictions.len()],
            rhs: vec![targets.len()],
        });
    }
    let mut acc = None;
    for (pred, target) in predictions.iter().zip(targets) {
        let shape = tape.shape(*pred).to_vec();
        if shape.iter().product::<usize>() != target.len() {
            return Err(Error::ShapeMismatch {
                op: "batch_loss",
                lhs: shape,
                rhs: vec![target.len()],
            });
        }
        let t = tape.constant(shape, target.clone())?;
        let diff = tape.sub(*pred, t)?;
        let sq = tape.mul(diff, diff)?;
        let s = tape.sum(sq)?;
        acc = Some(match acc {
            None => s,
            Some(prev) => tape.add(prev, s)?,
        });
    }
    tape.scale(acc.expect("nonempty batch"), 1.0 / predictions.len() as f64)
}

/// Plain-arithmetic loss on flat B×N buffers, for reports and oracles.
pub fn loss_value(pred: &[f64], target: &[f64], batch: usize) -> Result<f64> {
    if pred.len() != target.len() || batch == 0 || pred.len() % batch != 0 {
        return Err(Error::ShapeMismatch {
            op: "loss",
            lhs: vec![pred.len()],
            rhs: vec![target.len()],
        });
    }
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(total / batch as f64)
}

/// Evaluation-mode predictions for a set of windows, chunked over fresh
/// tapes to bound memory. Deterministic: no dropout, no RNG.
pub fn predict(state: &ModelState, cfg: &ModelConfig, windows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(64) {
        let mut tape = Tape::new();
        let bound = state.bind(&mut tape, false)?;
        let prepared = prepare_graphs(&mut tape, &bound, cfg)?;
        for window in chunk {
            let fwd = forward_sample(&mut tape, &bound, cfg, &prepared, window, None)?;
            out.push(tape.value(fwd.prediction).to_vec());
        }
    }
    Ok(out)
}

/// Evaluation-mode fusion weights (mean α over the given windows) plus the
/// per-scale adjacency matrices, for reporting.
pub fn inspect(
    state: &ModelState,
    cfg: &ModelConfig,
    windows: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, Option<Vec<f64>>)> {
    let mut tape = Tape::new();
    let bound = state.bind(&mut tape, false)?;
    let prepared = prepare_graphs(&mut tape, &bound, cfg)?;
    let graphs: Vec<Vec<f64>> = prepared
        .learned
        .graphs
        .iter()
        .map(|g| tape.value(*g).to_vec())
        .collect();
    if windows.is_empty() {
        return Ok((graphs, None));
    }
    let mut mean_alpha: Option<Vec<f64>> = None;
    for window in windows {
        let fwd = forward_sample(&mut tape, &bound, cfg, &prepared, window, None)?;
        if let Some(alpha) = fwd.alpha {
            let av = tape.value(alpha);
            match &mut mean_alpha {
                None => mean_alpha = Some(av.to_vec()),
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(av) {
                        *a += v;
                    }
                }
            }
        }
    }
    if let Some(acc) = &mut mean_alpha {
        for a in acc.iter_mut() {
            *a /= windows.len() as f64;
        }
    }
    Ok((graphs, mean_alpha))
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serializes config and parameters into the self-describing container:
/// magic, version, config JSON, then named little-endian f64 blobs in key
/// order.
pub fn save_checkpoint(state: &ModelState, cfg: &ModelConfig, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg_json = serde_json::to_vec(cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
    put_u64(&mut buf, cfg_json.len() as u64);
    buf.extend_from_slice(&cfg_json);
    put_u64(&mut buf, state.params.len() as u64);
    for (name, tensor) in &state.params {
        put_u64(&mut buf, name.len() as u64);
        buf.extend_from_slice(name.as_bytes());
        put_u64(&mut buf, tensor.shape.len() as u64);
        for d in &tensor.shape {
            put_u64(&mut buf, *d as u64);
        }
        for v in &tensor.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated file reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Loads a checkpoint, verifying the container and that the parameter set
/// matches what the embedded config demands. Errors name the first
/// offending key.
pub fn load_checkpoint(path: &Path) -> Result<(ModelState, ModelConfig)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { buf: &bytes, pos: 0 };

    if r.take(CHECKPOINT_MAGIC.len(), "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a model checkpoint file".into()));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let cfg_len = r.u64("config length")? as usize;
    let cfg: ModelConfig = serde_json::from_slice(r.take(cfg_len, "config")?)
        .map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
    let specs = parameter_specs(&cfg)?;
    let expected: BTreeMap<&str, &[usize]> = specs
        .iter()
        .map(|s| (s.name.as_str(), s.shape.as_slice()))
        .collect();

    let count = r.u64("parameter count")? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u64("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let ndim = r.u64(&format!("rank of {name}"))? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64(&format!("shape of {name}"))? as usize);
        }
        match expected.get(name.as_str()) {
            None => {
                return Err(Error::Checkpoint(format!("unexpected parameter {name}")));
            }
            Some(want) if *want != shape.as_slice() => {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {shape:?} does not match config ({want:?})"
                )));
            }
            _ => {}
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8, &format!("data of {name}"))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::from_vec(shape, data, true)
            .map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?;
        if params.insert(name.clone(), tensor).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing data after parameters".into()));
    }
    for spec in &specs {
        if !params.contains_key(&spec.name) {
            return Err(Error::Checkpoint(format!("missing parameter {}", spec.name)));
        }
    }
    Ok((ModelState { params }, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{fd_grad, max_rel_err};

    /// A small but complete config that exercises every module quickly.
    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_vars: 3,
            window: 8,
            k_scales: 2,
            kernels: vec![3],
            stride: 2,
            channels: 2,
            embed_dim: 2,
            tau: 1,
            gnn_depth: 2,
            d_s: 2,
            d_1: 4,
            horizon: 1,
            dropout: 0.0,
            graph_variant: GraphVariant::Standard,
            gnn_variant: GnnVariant::Two,
            fusion_variant: FusionVariant::Gated,
            pyramid_parallel: true,
            seed: 42,
        }
    }

    fn random_window(cfg: &ModelConfig, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..cfg.n_vars * cfg.window)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect()
    }

    /// Redraws every parameter at magnitudes that keep the network away
    /// from its nonsmooth points, for gradient checks and reachability
    /// probes. Two failure modes of realistic initialization motivate this:
    /// tanh near zero makes the receiver and sender features collinear (the
    /// raw adjacency vanishes, parking the graph ReLUs on their kinks), and
    /// so does deep tanh saturation (both features collapse to the same
    /// sign pattern) — so the rates and embeddings are drawn in tanh's
    /// curvature zone with magnitudes bounded away from zero. Small fan-in
    /// weights likewise concentrate activations at tiny values, so weights
    /// and biases get healthy magnitudes.
    fn widen_params(state: &mut ModelState, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let signed = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> f64 {
            let mag = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        };
        let keys: Vec<String> = state.params.keys().cloned().collect();
        for key in keys {
            let t = state.params.get_mut(&key).expect("listed key");
            if key.starts_with("graph.e_") {
                for v in &mut t.data {
                    *v = signed(&mut rng, 0.7, 1.2);
                }
            } else if key.starts_with("graph.") {
                for v in &mut t.data {
                    *v = signed(&mut rng, 0.8, 1.6);
                }
            } else if key.ends_with(".b") || key.contains(".b") {
                for v in &mut t.data {
                    *v = signed(&mut rng, 0.05, 0.3);
                }
            } else {
                for v in &mut t.data {
                    *v = signed(&mut rng, 0.2, 0.9);
                }
            }
        }
    }

    #[test]
    fn test_default_config_kernels_and_tau() {
        let cfg = ModelConfig::for_dataset(8, 3);
        assert_eq!(cfg.kernels, vec![7, 6, 3]);
        assert_eq!(cfg.tau, 8);
        assert_eq!(cfg.d_1, 8);
        cfg.validate().unwrap();
        assert_eq!(default_kernels(1), Vec::<usize>::new());
        assert_eq!(default_kernels(6), vec![7, 6, 3, 3, 3]);
        assert_eq!(default_tau(5), 5);
        assert_eq!(default_tau(30), 8);
        assert_eq!(default_tau(100), 40);
        assert_eq!(default_tau(137), 40);
    }

    #[test]
    fn test_config_validation_errors() {
        let mut cfg = tiny_config();
        cfg.tau = 4; // > n_vars
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.window = 1; // too short for 2 scales
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.horizon = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn test_output_shape_and_eval_determinism_across_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let graphs = [
            GraphVariant::Standard,
            GraphVariant::SharedOne,
            GraphVariant::Symmetric,
            GraphVariant::Full,
        ];
        let gnns = [GnnVariant::Two, GnnVariant::One];
        let fusions = [
            FusionVariant::Gated,
            FusionVariant::Concat,
            FusionVariant::MeanPool,
        ];
        for round in 0..8 {
            let mut cfg = tiny_config();
            cfg.n_vars = rng.gen_range(2..5);
            cfg.window = rng.gen_range(8..20);
            cfg.tau = rng.gen_range(1..=cfg.n_vars);
            cfg.graph_variant = graphs[rng.gen_range(0..graphs.len())];
            cfg.gnn_variant = gnns[rng.gen_range(0..gnns.len())];
            cfg.fusion_variant = fusions[rng.gen_range(0..fusions.len())];
            cfg.pyramid_parallel = rng.gen_bool(0.5);
            cfg.seed = round;
            cfg.validate().unwrap();
            let state = ModelState::init(&cfg).unwrap();
            let window = random_window(&cfg, 100 + round);
            let p1 = predict(&state, &cfg, &[window.clone()]).unwrap();
            assert_eq!(p1.len(), 1);
            assert_eq!(p1[0].len(), cfg.n_vars, "round {round}");
            let p2 = predict(&state, &cfg, &[window]).unwrap();
            assert_eq!(p1, p2, "evaluation must be bit-deterministic");
        }
    }

    #[test]
    fn test_loss_pinned_example_and_oracle() {
        let mut tape = Tape::new();
        let pred = tape.leaf_parts(vec![2], vec![1.0, 2.0], true).unwrap();
        let loss = batch_loss(&mut tape, &[pred], &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(tape.value(loss), &[5.0]);
        assert_eq!(loss_value(&[1.0, 2.0], &[0.0, 0.0], 1).unwrap(), 5.0);

        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let (b, n) = (4, 3);
        let preds: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let targets: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();

        let mut tape = Tape::new();
        let pred_nodes: Vec<NodeId> = preds
            .iter()
            .map(|p| tape.leaf_parts(vec![n], p.clone(), true).unwrap())
            .collect();
        let loss = batch_loss(&mut tape, &pred_nodes, &targets).unwrap();

        // independent two-loop accumulation
        let mut expect = 0.0;
        for i in 0..b {
            for j in 0..n {
                let d = preds[i][j] - targets[i][j];
                expect += d * d;
            }
        }
        expect /= b as f64;
        assert!((tape.value(loss)[0] - expect).abs() < 1e-12);

        // batch permutation invariance
        let order = [2usize, 0, 3, 1];
        let mut tape2 = Tape::new();
        let perm_nodes: Vec<NodeId> = order
            .iter()
            .map(|i| tape2.leaf_parts(vec![n], preds[*i].clone(), true).unwrap())
            .collect();
        let perm_targets: Vec<Vec<f64>> = order.iter().map(|i| targets[*i].clone()).collect();
        let loss2 = batch_loss(&mut tape2, &perm_nodes, &perm_targets).unwrap();
        assert!((tape.value(loss)[0] - tape2.value(loss2)[0]).abs() < 1e-12);
    }

    #[test]
    fn test_full_model_gradients_match_finite_differences() {
        let cfg = tiny_config();
        let window = random_window(&cfg, 77);
        let mut wrng = ChaCha8Rng::seed_from_u64(78);
        let probe: Vec<f64> = (0..cfg.n_vars).map(|_| wrng.gen_range(0.3..1.0)).collect();

        // Find a seed whose evaluation point is well-conditioned: no ReLU
        // input near its kink and no near-tie straddling any top-τ cut.
        // The margin (1e-4) must dominate how far the FD probe (eps 1e-6)
        // can move any pre-activation; the tape holds hundreds of ReLU
        // inputs, so a wider margin is statistically unreachable.
        let mut chosen = None;
        for seed in 0..100u64 {
            let mut state = ModelState::init(&cfg).unwrap();
            widen_params(&mut state, 1000 + seed);
            let mut tape = Tape::new();
            let bound = state.bind(&mut tape, true).unwrap();
            let prepared = prepare_graphs(&mut tape, &bound, &cfg).unwrap();
            forward_sample(&mut tape, &bound, &cfg, &prepared, &window, None).unwrap();
            let relu_ok = tape.relu_kink_margin() > 1e-4;
            let mut topk_ok = true;
            for sm in &prepared.learned.softmax {
                let v = tape.value(*sm);
                let n = cfg.n_vars;
                for i in 0..n {
                    let mut row: Vec<f64> = v[i * n..(i + 1) * n].to_vec();
                    row.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    if cfg.tau < n && row[cfg.tau - 1] - row[cfg.tau] < 1e-3 {
                        topk_ok = false;
                    }
                }
            }
            if relu_ok && topk_ok {
                chosen = Some(state);
                break;
            }
        }
        let state = chosen.expect("no well-conditioned seed in 100 draws");

        // flatten parameters in key order
        let names: Vec<String> = state.params.keys().cloned().collect();
        let flat: Vec<f64> = names
            .iter()
            .flat_map(|n| state.params[n].data.clone())
            .collect();

        let rebuild = |values: &[f64]| -> ModelState {
            let mut s = state.clone();
            let mut pos = 0;
            for n in &names {
                let t = s.params.get_mut(n).unwrap();
                let len = t.data.len();
                t.data.copy_from_slice(&values[pos..pos + len]);
                pos += len;
            }
            s
        };

        let eval = |values: &[f64]| -> f64 {
            let s = rebuild(values);
            let out = predict(&s, &cfg, &[window.clone()]).unwrap();
            out[0].iter().zip(&probe).map(|(p, w)| p * w).sum()
        };
        let fd = fd_grad(eval, &flat, 1e-6);

        let mut tape = Tape::new();
        let bound = state.bind(&mut tape, true).unwrap();
        let prepared = prepare_graphs(&mut tape, &bound, &cfg).unwrap();
        let fwd = forward_sample(&mut tape, &bound, &cfg, &prepared, &window, None).unwrap();
        let probe_node = tape.constant(vec![cfg.n_vars], probe.clone()).unwrap();
        let weighted = tape.mul(fwd.prediction, probe_node).unwrap();
        let target = tape.sum(weighted).unwrap();
        tape.backward(target).unwrap();

        let mut ad = Vec::with_capacity(flat.len());
        for n in &names {
            let id = bound[n];
            match tape.grad(id) {
                Some(g) => ad.extend_from_slice(g),
                None => ad.extend(std::iter::repeat(0.0).take(state.params[n].data.len())),
            }
        }
        let err = max_rel_err(&ad, &fd);
        assert!(err < 1e-4, "full-model gradient mismatch: {err}");
    }

    #[test]
    fn test_checkpoint_round_trip_and_mismatch_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = tiny_config();
        let state = ModelState::init(&cfg).unwrap();
        save_checkpoint(&state, &cfg, &path).unwrap();
        let (loaded, loaded_cfg) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg, loaded_cfg);
        for (name, t) in &state.params {
            assert_eq!(t.data, loaded.params[name].data, "{name}");
            assert_eq!(t.shape, loaded.params[name].shape, "{name}");
        }
        let window = random_window(&cfg, 5);
        assert_eq!(
            predict(&state, &cfg, &[window.clone()]).unwrap(),
            predict(&loaded, &cfg, &[window]).unwrap()
        );

        // a different config must be rejected by the comparison helper
        let mut other = cfg.clone();
        other.tau = 2;
        let err = cfg.assert_same(&other).unwrap_err();
        assert!(err.to_string().contains("tau"), "{err}");

        // truncation errors
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));

        // a renamed parameter must be reported by name
        let mut broken = state.clone();
        let t = broken.params.remove("head.b2").unwrap();
        broken.params.insert("head.b3".into(), t);
        save_checkpoint(&broken, &cfg, &path).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("head.b3") || err.contains("head.b2"), "{err}");

        // wrong magic
        std::fs::write(&path, b"NOTACKPT").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn test_variant_reachability_each_flag_rewires_forward() {
        let mut cfg = tiny_config();
        cfg.n_vars = 5;
        cfg.window = 16;
        cfg.k_scales = 3;
        cfg.kernels = vec![3, 3];
        cfg.channels = 3;
        cfg.d_s = 3;
        cfg.embed_dim = 3;
        cfg.tau = 2;
        cfg.validate().unwrap();

        let mut base_state = ModelState::init(&cfg).unwrap();
        widen_params(&mut base_state, 55);
        let window = random_window(&cfg, 56);
        let base = predict(&base_state, &cfg, &[window.clone()]).unwrap();

        let variants: Vec<(&str, ModelConfig)> = vec![
            ("shared_one", {
                let mut c = cfg.clone();
                c.graph_variant = GraphVariant::SharedOne;
                c
            }),
            ("symmetric", {
                let mut c = cfg.clone();
                c.graph_variant = GraphVariant::Symmetric;
                c
            }),
            ("full", {
                let mut c = cfg.clone();
                c.graph_variant = GraphVariant::Full;
                c
            }),
            ("one_gnn", {
                let mut c = cfg.clone();
                c.gnn_variant = GnnVariant::One;
                c
            }),
            ("concat", {
                let mut c = cfg.clone();
                c.fusion_variant = FusionVariant::Concat;
                c
            }),
            ("mean_pool", {
                let mut c = cfg.clone();
                c.fusion_variant = FusionVariant::MeanPool;
                c
            }),
            ("no_parallel", {
                let mut c = cfg.clone();
                c.pyramid_parallel = false;
                c
            }),
        ];
        for (name, vcfg) in variants {
            // share every parameter the variant has in common with the
            // standard model, so a differing output proves rewiring rather
            // than a different random draw
            let mut vstate = ModelState::init(&vcfg).unwrap();
            widen_params(&mut vstate, 55);
            for (key, tensor) in &base_state.params {
                if let Some(slot) = vstate.params.get_mut(key) {
                    if slot.shape == tensor.shape {
                        slot.data.copy_from_slice(&tensor.data);
                    }
                }
            }
            let out = predict(&vstate, &vcfg, &[window.clone()]).unwrap();
            assert_ne!(base, out, "variant {name} did not change the forward output");
        }
    }

    #[test]
    fn test_param_count_is_deterministic_and_pinned_for_defaults() {
        let cfg = ModelConfig::for_dataset(8, 3);
        let state = ModelState::init(&cfg).unwrap();
        let again = ModelState::init(&cfg).unwrap();
        assert_eq!(state.param_count(), again.param_count());
        for (name, t) in &state.params {
            assert_eq!(t.data, again.params[name].data, "{name}");
        }
        // pinned for the default 8-variable config (computed once from the
        // registry, then frozen: pyramid 4992 + graph 200 + propagation
        // 4096 + temporal 17248 + gate 1068 + head 289)
        assert_eq!(state.param_count(), 27_893);
    }

    #[test]
    fn test_forward_rejects_wrong_window_length() {
        let cfg = tiny_config();
        let state = ModelState::init(&cfg).unwrap();
        let err = predict(&state, &cfg, &[vec![0.0; 5]]);
        assert!(err.is_err());
    }
}
