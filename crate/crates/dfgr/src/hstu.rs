//! HSTU blocks and the stacked encoder.
//!
//! A block projects its input through one fused linear layer into gating
//! weights `U`, values `V`, queries `Q`, and keys `K`, applies SiLU, runs
//! pointwise-SiLU attention with a relative position/time bias, then layer
//! norm, the `⊙ U` gate, and an output projection.
//!
//! Two forward modes share every weight:
//!
//! * the real flow (true action types) runs standard causal self-attention
//!   and donates its per-layer `K`/`V` activations, and
//! * the fake flow (action placeholders) attends those real `K`/`V` at
//!   strictly earlier allowed positions and substitutes its own `K`/`V`
//!   only at the current position.
//!
//! Masking is applied multiplicatively to the attention pre-activation,
//! `silu((Q·Kᵀ + rab) ⊙ mask)`; with a pointwise nonlinearity a disallowed
//! key then contributes an exact zero to the weighted value sum. Folding the
//! bias inside the mask keeps bias values from leaking through forbidden
//! entries (`silu(rab) ≠ 0` otherwise), which the per-target oracle
//! equivalence and the leakage checks depend on.

use crate::graph::{Graph, GraphError, Scalar, TensorId};
use crate::head::{bind_head, BoundHead, HeadParams};
use crate::masking::{self, MaskError, MaskMatrix};
use crate::sequence::{
    embed, EmbeddingTables, TokenBatch, UserSequence, FAKE_ACTION_ROW, TABLE_ACTION,
};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Layer-norm epsilon used throughout the encoder.
pub const LN_EPS: f64 = 1e-6;

/// Default relative-bias table sizes: clamped |Δposition| buckets and
/// log2-scaled time-delta buckets.
pub const DEFAULT_POS_BUCKETS: usize = 128;
pub const DEFAULT_TIME_BUCKETS: usize = 32;

#[derive(Debug, Error)]
pub enum HstuError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("model width {d_model} must equal heads {heads} x head_dim {head_dim}")]
    BadDims {
        d_model: usize,
        heads: usize,
        head_dim: usize,
    },
    #[error("positions must be non-decreasing: {prev} then {next}")]
    DecreasingPositions { prev: usize, next: usize },
    #[error("negative time delta between query {query} and earlier key {key}")]
    NegativeTimeDelta { query: usize, key: usize },
    #[error("flow cache holds {cache} positions, fake flow has {fake}")]
    CacheMismatch { cache: usize, fake: usize },
    #[error("real and fake batches disagree on {what}")]
    FlowMetadataMismatch { what: &'static str },
    #[error("mask is {mask}x{mask} but batch has {batch} tokens")]
    MaskSizeMismatch { mask: usize, batch: usize },
    #[error("oracle target {t} out of range 1..={n}")]
    OracleTargetOutOfRange { t: usize, n: usize },
}

/// Shared encoder dimensions; `d_model == heads * head_dim` always.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub layers: usize,
    pub pos_buckets: usize,
    pub time_buckets: usize,
}

impl Dims {
    pub fn new(d_model: usize, heads: usize, layers: usize) -> Result<Self, HstuError> {
        if heads == 0 || d_model == 0 || !d_model.is_multiple_of(heads) {
            return Err(HstuError::BadDims {
                d_model,
                heads,
                head_dim: if heads == 0 {
                    0
                } else {
                    d_model / heads.max(1)
                },
            });
        }
        Ok(Dims {
            d_model,
            heads,
            head_dim: d_model / heads,
            layers,
            pos_buckets: DEFAULT_POS_BUCKETS,
            time_buckets: DEFAULT_TIME_BUCKETS,
        })
    }
}

/// Per-layer weights. The fused projection output splits in `(U, V, Q, K)`
/// order, each `heads * head_dim` wide; head concatenation is head-major.
#[derive(Debug, Clone)]
pub struct HstuParams {
    /// `d_model × 4·heads·head_dim`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `heads·head_dim × d_model`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub norm_gain: Vec<f64>,
    pub norm_bias: Vec<f64>,
    /// `heads × pos_buckets`
    pub rab_pos: Vec<f64>,
    /// `heads × time_buckets`
    pub rab_time: Vec<f64>,
}

impl HstuParams {
    pub fn zeros(dims: &Dims) -> Self {
        let hd = dims.heads * dims.head_dim;
        HstuParams {
            w1: vec![0.0; dims.d_model * 4 * hd],
            b1: vec![0.0; 4 * hd],
            w2: vec![0.0; hd * dims.d_model],
            b2: vec![0.0; dims.d_model],
            norm_gain: vec![1.0; hd],
            norm_bias: vec![0.0; hd],
            rab_pos: vec![0.0; dims.heads * dims.pos_buckets],
            rab_time: vec![0.0; dims.heads * dims.time_buckets],
        }
    }
}

/// Stacked encoder: layer weights, embedding tables, and the prediction
/// head, with the two behavior flags that alter the forward pass.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub dims: Dims,
    /// Residual connection around each block (off = strict-equation mode).
    pub residual: bool,
    /// Divide attention scores by T for long-sequence stability; off by
    /// default to keep the per-target oracle exact.
    pub scale_scores: bool,
    pub layers: Vec<HstuParams>,
    pub tables: EmbeddingTables,
    pub head: HeadParams,
}

impl EncoderParams {
    pub fn new(dims: Dims, tables: EmbeddingTables, residual: bool) -> Self {
        assert_eq!(tables.dim, dims.d_model, "table width must match d_model");
        let layers = (0..dims.layers).map(|_| HstuParams::zeros(&dims)).collect();
        let head = HeadParams::zeros(dims.d_model);
        EncoderParams {
            dims,
            residual,
            scale_scores: false,
            layers,
            tables,
            head,
        }
    }

    /// Projection weights and embeddings from N(0, std²); relative-bias
    /// tables stay zero so early training is mask-dominated.
    pub fn random_init<R: Rng>(&mut self, rng: &mut R, std: f64) {
        let normal = Normal::new(0.0, std).unwrap();
        let mut fill = |v: &mut [f64]| {
            for x in v {
                *x = normal.sample(rng);
            }
        };
        fill(&mut self.tables.item.data);
        fill(&mut self.tables.action.data);
        for t in &mut self.tables.slots {
            fill(&mut t.data);
        }
        for t in &mut self.tables.profile_slots {
            fill(&mut t.data);
        }
        for layer in &mut self.layers {
            fill(&mut layer.w1);
            fill(&mut layer.w2);
        }
        self.head.random_init(rng, std);
    }

    /// Visit every parameter vector in the declared (checkpoint) order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("tables.item", &self.tables.item.data);
        f("tables.action", &self.tables.action.data);
        for (i, t) in self.tables.slots.iter().enumerate() {
            f(&format!("tables.slot{i}"), &t.data);
        }
        for (i, t) in self.tables.profile_slots.iter().enumerate() {
            f(&format!("tables.profile{i}"), &t.data);
        }
        for (l, layer) in self.layers.iter().enumerate() {
            f(&format!("layer{l}.w1"), &layer.w1);
            f(&format!("layer{l}.b1"), &layer.b1);
            f(&format!("layer{l}.w2"), &layer.w2);
            f(&format!("layer{l}.b2"), &layer.b2);
            f(&format!("layer{l}.norm_gain"), &layer.norm_gain);
            f(&format!("layer{l}.norm_bias"), &layer.norm_bias);
            f(&format!("layer{l}.rab_pos"), &layer.rab_pos);
            f(&format!("layer{l}.rab_time"), &layer.rab_time);
        }
        f("head.w1", &self.head.w1);
        f("head.b1", &self.head.b1);
        f("head.w2", &self.head.w2);
        f("head.b2", &self.head.b2);
    }

    /// Mutable companion of [`EncoderParams::visit`], same order.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        f("tables.item", &mut self.tables.item.data);
        f("tables.action", &mut self.tables.action.data);
        for (i, t) in self.tables.slots.iter_mut().enumerate() {
            f(&format!("tables.slot{i}"), &mut t.data);
        }
        for (i, t) in self.tables.profile_slots.iter_mut().enumerate() {
            f(&format!("tables.profile{i}"), &mut t.data);
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            f(&format!("layer{l}.w1"), &mut layer.w1);
            f(&format!("layer{l}.b1"), &mut layer.b1);
            f(&format!("layer{l}.w2"), &mut layer.w2);
            f(&format!("layer{l}.b2"), &mut layer.b2);
            f(&format!("layer{l}.norm_gain"), &mut layer.norm_gain);
            f(&format!("layer{l}.norm_bias"), &mut layer.norm_bias);
            f(&format!("layer{l}.rab_pos"), &mut layer.rab_pos);
            f(&format!("layer{l}.rab_time"), &mut layer.rab_time);
        }
        f("head.w1", &mut self.head.w1);
        f("head.b1", &mut self.head.b1);
        f("head.w2", &mut self.head.w2);
        f("head.b2", &mut self.head.b2);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, v| n += v.len());
        n
    }
}

/// Graph-bound weights of one layer.
#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
    pub norm_gain: TensorId,
    pub norm_bias: TensorId,
    pub rab_pos: TensorId,
    pub rab_time: TensorId,
}

/// The full encoder bound into one graph. `param_ids` lists every bound
/// parameter leaf in the declared order for optimizer updates.
#[derive(Debug)]
pub struct BoundEncoder {
    pub dims: Dims,
    pub residual: bool,
    pub scale_scores: bool,
    pub tables: Vec<TensorId>,
    pub layers: Vec<BoundLayer>,
    pub head: BoundHead,
    pub param_ids: Vec<(String, TensorId)>,
}

/// Bind every parameter as a graph leaf (trainable or constant).
pub fn bind<F: Scalar>(
    enc: &EncoderParams,
    g: &mut Graph<F>,
    trainable: bool,
) -> Result<BoundEncoder, HstuError> {
    let conv = |v: &[f64]| v.iter().map(|&x| F::from_f64(x)).collect::<Vec<F>>();
    let dims = enc.dims;
    let hd = dims.heads * dims.head_dim;
    let mut param_ids = Vec::new();

    let mut tables = Vec::new();
    for (name, t) in [
        ("tables.item".to_string(), &enc.tables.item),
        ("tables.action".to_string(), &enc.tables.action),
    ]
    .into_iter()
    .chain(
        enc.tables
            .slots
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("tables.slot{i}"), t)),
    )
    .chain(
        enc.tables
            .profile_slots
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("tables.profile{i}"), t)),
    ) {
        let id = g.leaf(vec![t.rows, t.dim], conv(&t.data), trainable)?;
        param_ids.push((name, id));
        tables.push(id);
    }

    let mut layers = Vec::new();
    for (l, layer) in enc.layers.iter().enumerate() {
        let w1 = g.leaf(vec![dims.d_model, 4 * hd], conv(&layer.w1), trainable)?;
        let b1 = g.leaf(vec![4 * hd], conv(&layer.b1), trainable)?;
        let w2 = g.leaf(vec![hd, dims.d_model], conv(&layer.w2), trainable)?;
        let b2 = g.leaf(vec![dims.d_model], conv(&layer.b2), trainable)?;
        let norm_gain = g.leaf(vec![hd], conv(&layer.norm_gain), trainable)?;
        let norm_bias = g.leaf(vec![hd], conv(&layer.norm_bias), trainable)?;
        let rab_pos = g.leaf(
            vec![dims.heads, dims.pos_buckets],
            conv(&layer.rab_pos),
            trainable,
        )?;
        let rab_time = g.leaf(
            vec![dims.heads, dims.time_buckets],
            conv(&layer.rab_time),
            trainable,
        )?;
        for (suffix, id) in [
            ("w1", w1),
            ("b1", b1),
            ("w2", w2),
            ("b2", b2),
            ("norm_gain", norm_gain),
            ("norm_bias", norm_bias),
            ("rab_pos", rab_pos),
            ("rab_time", rab_time),
        ] {
            param_ids.push((format!("layer{l}.{suffix}"), id));
        }
        layers.push(BoundLayer {
            w1,
            b1,
            w2,
            b2,
            norm_gain,
            norm_bias,
            rab_pos,
            rab_time,
        });
    }

    let head = bind_head(&enc.head, g, trainable)?;
    for (suffix, id) in [
        ("w1", head.w1),
        ("b1", head.b1),
        ("w2", head.w2),
        ("b2", head.b2),
    ] {
        param_ids.push((format!("head.{suffix}"), id));
    }

    Ok(BoundEncoder {
        dims,
        residual: enc.residual,
        scale_scores: enc.scale_scores,
        tables,
        layers,
        head,
        param_ids,
    })
}

/// Embed a token batch inside the graph so gradients reach the tables.
pub fn embed_batch<F: Scalar>(
    g: &mut Graph<F>,
    bound: &BoundEncoder,
    batch: &TokenBatch,
) -> Result<TensorId, HstuError> {
    Ok(g.sum_embed(&bound.tables, batch.lookups.clone(), bound.dims.d_model)?)
}

pub fn bucket_pos(delta: usize, pos_buckets: usize) -> usize {
    delta.min(pos_buckets - 1)
}

pub fn bucket_time(delta: u64, time_buckets: usize) -> usize {
    ((delta + 1).ilog2() as usize).min(time_buckets - 1)
}

/// Per-head flat indices into the rab tables for every (query, key) pair.
/// Entries above the diagonal are placeholders; they only ever feed masked
/// positions. Positions must be non-decreasing and time deltas for `j <= i`
/// non-negative.
struct RabIndices {
    /// `pos[h][i*t + j]` indexes `rab_pos`; same layout for `time`.
    pos: Vec<Vec<usize>>,
    time: Vec<Vec<usize>>,
    /// Diagonal-only indices, length `t`.
    pos_diag: Vec<Vec<usize>>,
    time_diag: Vec<Vec<usize>>,
}

fn rab_indices(
    positions: &[usize],
    timestamps: &[u64],
    dims: &Dims,
) -> Result<RabIndices, HstuError> {
    let t = positions.len();
    for w in positions.windows(2) {
        if w[1] < w[0] {
            return Err(HstuError::DecreasingPositions {
                prev: w[0],
                next: w[1],
            });
        }
    }
    let mut pos_base = vec![0usize; t * t];
    let mut time_base = vec![0usize; t * t];
    for i in 0..t {
        for j in 0..t {
            let dp = positions[i].abs_diff(positions[j]);
            pos_base[i * t + j] = bucket_pos(dp, dims.pos_buckets);
            if j <= i {
                if timestamps[j] > timestamps[i] {
                    return Err(HstuError::NegativeTimeDelta { query: i, key: j });
                }
                time_base[i * t + j] =
                    bucket_time(timestamps[i] - timestamps[j], dims.time_buckets);
            }
        }
    }
    let mut out = RabIndices {
        pos: Vec::with_capacity(dims.heads),
        time: Vec::with_capacity(dims.heads),
        pos_diag: Vec::with_capacity(dims.heads),
        time_diag: Vec::with_capacity(dims.heads),
    };
    for h in 0..dims.heads {
        let po = h * dims.pos_buckets;
        let to = h * dims.time_buckets;
        out.pos.push(pos_base.iter().map(|&b| po + b).collect());
        out.time.push(time_base.iter().map(|&b| to + b).collect());
        out.pos_diag
            .push((0..t).map(|i| po + pos_base[i * t + i]).collect());
        out.time_diag
            .push((0..t).map(|i| to + time_base[i * t + i]).collect());
    }
    Ok(out)
}

/// Dense relative attention bias `[heads × T × T]`:
/// `bias[h][i][j] = rab_pos[h][bucket(|pos_i - pos_j|)] + rab_time[h][bucket(ts_i - ts_j)]`.
pub fn rab(
    positions: &[usize],
    timestamps: &[u64],
    layer: &HstuParams,
    dims: &Dims,
) -> Result<Vec<f64>, HstuError> {
    let ix = rab_indices(positions, timestamps, dims)?;
    let t = positions.len();
    let mut out = vec![0.0; dims.heads * t * t];
    for h in 0..dims.heads {
        for e in 0..t * t {
            out[h * t * t + e] = layer.rab_pos[ix.pos[h][e]] + layer.rab_time[ix.time[h][e]];
        }
    }
    Ok(out)
}

/// Everything a layer needs that depends only on batch metadata: mask
/// multipliers and rab gather indices, shared across layers.
pub struct AttnContext {
    t: usize,
    mask: TensorId,
    mask_off_diag: TensorId,
    rab: RabIndices,
}

impl AttnContext {
    pub fn new<F: Scalar>(
        g: &mut Graph<F>,
        mask: &MaskMatrix,
        positions: &[usize],
        timestamps: &[u64],
        dims: &Dims,
    ) -> Result<Self, HstuError> {
        let t = positions.len();
        if mask.t() != t {
            return Err(HstuError::MaskSizeMismatch {
                mask: mask.t(),
                batch: t,
            });
        }
        let m = g.constant(vec![t, t], mask.scalars::<F>())?;
        let md = g.constant(vec![t, t], mask.scalars_off_diagonal::<F>())?;
        Ok(AttnContext {
            t,
            mask: m,
            mask_off_diag: md,
            rab: rab_indices(positions, timestamps, dims)?,
        })
    }
}

/// Split the fused projection into `(U, V, Q, K)`, each `heads·head_dim` wide.
pub fn project<F: Scalar>(
    g: &mut Graph<F>,
    x: TensorId,
    layer: &BoundLayer,
    dims: &Dims,
) -> Result<(TensorId, TensorId, TensorId, TensorId), HstuError> {
    let hd = dims.heads * dims.head_dim;
    let fused = g.matmul(x, layer.w1)?;
    let fused = g.add_row_vec(fused, layer.b1)?;
    let act = g.silu(fused);
    let u = g.slice_cols(act, 0, hd)?;
    let v = g.slice_cols(act, hd, hd)?;
    let q = g.slice_cols(act, 2 * hd, hd)?;
    let k = g.slice_cols(act, 3 * hd, hd)?;
    Ok((u, v, q, k))
}

fn rab_for_head<F: Scalar>(
    g: &mut Graph<F>,
    layer: &BoundLayer,
    ctx: &AttnContext,
    h: usize,
) -> Result<TensorId, HstuError> {
    let t = ctx.t;
    let p = g.gather(layer.rab_pos, ctx.rab.pos[h].clone(), vec![t, t])?;
    let q = g.gather(layer.rab_time, ctx.rab.time[h].clone(), vec![t, t])?;
    Ok(g.add(p, q)?)
}

fn finish_block<F: Scalar>(
    g: &mut Graph<F>,
    x: TensorId,
    head_outputs: &[TensorId],
    u: TensorId,
    layer: &BoundLayer,
    residual: bool,
) -> Result<TensorId, HstuError> {
    let merged = g.concat_cols(head_outputs)?;
    let normed = g.layer_norm(
        merged,
        layer.norm_gain,
        layer.norm_bias,
        F::from_f64(LN_EPS),
    )?;
    let gated = g.mul(normed, u)?;
    let proj = g.matmul(gated, layer.w2)?;
    let proj = g.add_row_vec(proj, layer.b2)?;
    Ok(if residual { g.add(x, proj)? } else { proj })
}

/// One real-flow block. Returns the output and the `(K, V)` cache entry the
/// fake flow substitutes at the same depth.
pub fn real_flow_layer<F: Scalar>(
    g: &mut Graph<F>,
    x: TensorId,
    ctx: &AttnContext,
    layer: &BoundLayer,
    dims: &Dims,
    residual: bool,
    scale_scores: bool,
) -> Result<(TensorId, (TensorId, TensorId)), HstuError> {
    let d = dims.head_dim;
    let (u, v, q, k) = project(g, x, layer, dims)?;
    let mut head_outputs = Vec::with_capacity(dims.heads);
    for h in 0..dims.heads {
        let qh = g.slice_cols(q, h * d, d)?;
        let kh = g.slice_cols(k, h * d, d)?;
        let vh = g.slice_cols(v, h * d, d)?;
        let mut scores = g.matmul_nt(qh, kh)?;
        if scale_scores {
            scores = g.scale(scores, F::from_f64(1.0 / ctx.t as f64));
        }
        let bias = rab_for_head(g, layer, ctx, h)?;
        let pre = g.add(scores, bias)?;
        let pre = g.mul(pre, ctx.mask)?;
        let attn = g.silu(pre);
        head_outputs.push(g.matmul(attn, vh)?);
    }
    let y = finish_block(g, x, &head_outputs, u, layer, residual)?;
    Ok((y, (k, v)))
}

/// One fake-flow block: the cross term attends the real flow's cached `K`/`V`
/// at allowed keys strictly before each position, and a per-position self
/// term uses the fake flow's own `K`/`V` at the current position.
///
/// `fault_keep_cross_diag` deliberately keeps the diagonal inside the cross
/// term (for oracle-failure demonstration); never set it in real use.
#[allow(clippy::too_many_arguments)]
pub fn fake_flow_layer<F: Scalar>(
    g: &mut Graph<F>,
    xf: TensorId,
    cache: (TensorId, TensorId),
    ctx: &AttnContext,
    layer: &BoundLayer,
    dims: &Dims,
    residual: bool,
    scale_scores: bool,
    fault_keep_cross_diag: bool,
) -> Result<TensorId, HstuError> {
    let d = dims.head_dim;
    let (kr, vr) = cache;
    let cache_t = g.shape(kr)[0];
    if cache_t != ctx.t {
        return Err(HstuError::CacheMismatch {
            cache: cache_t,
            fake: ctx.t,
        });
    }
    let (u, v, q, k) = project(g, xf, layer, dims)?;
    let mut head_outputs = Vec::with_capacity(dims.heads);
    for h in 0..dims.heads {
        let qh = g.slice_cols(q, h * d, d)?;
        let kh = g.slice_cols(k, h * d, d)?;
        let vh = g.slice_cols(v, h * d, d)?;
        let krh = g.slice_cols(kr, h * d, d)?;
        let vrh = g.slice_cols(vr, h * d, d)?;

        let mut scores = g.matmul_nt(qh, krh)?;
        if scale_scores {
            scores = g.scale(scores, F::from_f64(1.0 / ctx.t as f64));
        }
        let bias = rab_for_head(g, layer, ctx, h)?;
        let pre = g.add(scores, bias)?;
        let cross_mask = if fault_keep_cross_diag {
            ctx.mask
        } else {
            ctx.mask_off_diag
        };
        let pre = g.mul(pre, cross_mask)?;
        let attn = g.silu(pre);
        let cross = g.matmul(attn, vrh)?;

        let pdiag = g.gather(layer.rab_pos, ctx.rab.pos_diag[h].clone(), vec![ctx.t])?;
        let tdiag = g.gather(layer.rab_time, ctx.rab.time_diag[h].clone(), vec![ctx.t])?;
        let diag_bias = g.add(pdiag, tdiag)?;
        let qh_self = if scale_scores {
            g.scale(qh, F::from_f64(1.0 / ctx.t as f64))
        } else {
            qh
        };
        let own = g.diag_attention(qh_self, kh, vh, diag_bias)?;

        head_outputs.push(g.add(own, cross)?);
    }
    finish_block(g, xf, &head_outputs, u, layer, residual)
}

/// Per-layer real-flow `K`/`V` activations donated to the fake flow.
#[derive(Debug, Clone)]
pub struct FlowCache {
    pub entries: Vec<(TensorId, TensorId)>,
}

/// Debug/diagnostic switches for the dual-flow forward.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOpts {
    /// Corrupt the cross term by keeping its diagonal; used to demonstrate
    /// oracle failure detection.
    pub fault_keep_cross_diag: bool,
}

fn check_flow_pair(real: &TokenBatch, fake: &TokenBatch) -> Result<(), HstuError> {
    if real.len() != fake.len() {
        return Err(HstuError::FlowMetadataMismatch { what: "length" });
    }
    if real.positions != fake.positions {
        return Err(HstuError::FlowMetadataMismatch { what: "positions" });
    }
    if real.timestamps != fake.timestamps {
        return Err(HstuError::FlowMetadataMismatch { what: "timestamps" });
    }
    if real.session_ids != fake.session_ids {
        return Err(HstuError::FlowMetadataMismatch {
            what: "session ids",
        });
    }
    Ok(())
}

/// Dual-flow forward: the real flow advances independently and donates its
/// per-layer `K`/`V` to the fake flow. Returns the final fake-flow hidden
/// states (the only ones prediction heads consume) and the cache.
pub fn forward_dfgr<F: Scalar>(
    g: &mut Graph<F>,
    bound: &BoundEncoder,
    real: &TokenBatch,
    fake: &TokenBatch,
    mask: &MaskMatrix,
    opts: ForwardOpts,
) -> Result<(TensorId, FlowCache), HstuError> {
    check_flow_pair(real, fake)?;
    let ctx = AttnContext::new(g, mask, &real.positions, &real.timestamps, &bound.dims)?;
    let mut xr = embed_batch(g, bound, real)?;
    let mut xf = embed_batch(g, bound, fake)?;
    let mut cache = FlowCache {
        entries: Vec::with_capacity(bound.layers.len()),
    };
    for layer in &bound.layers {
        let (yr, kv) = real_flow_layer(
            g,
            xr,
            &ctx,
            layer,
            &bound.dims,
            bound.residual,
            bound.scale_scores,
        )?;
        let yf = fake_flow_layer(
            g,
            xf,
            kv,
            &ctx,
            layer,
            &bound.dims,
            bound.residual,
            bound.scale_scores,
            opts.fault_keep_cross_diag,
        )?;
        cache.entries.push(kv);
        xr = yr;
        xf = yf;
    }
    Ok((xf, cache))
}

/// Standard stacked single-flow pass (real-flow blocks) over one batch.
pub fn forward_single<F: Scalar>(
    g: &mut Graph<F>,
    bound: &BoundEncoder,
    batch: &TokenBatch,
    mask: &MaskMatrix,
) -> Result<TensorId, HstuError> {
    let ctx = AttnContext::new(g, mask, &batch.positions, &batch.timestamps, &bound.dims)?;
    let mut x = embed_batch(g, bound, batch)?;
    for layer in &bound.layers {
        let (y, _) = real_flow_layer(
            g,
            x,
            &ctx,
            layer,
            &bound.dims,
            bound.residual,
            bound.scale_scores,
        )?;
        x = y;
    }
    Ok(x)
}

/// Independent check of the dual-flow fake output at one labeled position:
/// run a plain single-flow pass over `user token + interactions 1..t-1 with
/// real actions + interaction t with the fake action`, under the session
/// mask of that prefix, and read the hidden state at the last position.
/// Because the attention nonlinearity is pointwise and masking isolates the
/// prefix, this equals the fake flow's output at `t`.
pub fn oracle_per_target(
    enc: &EncoderParams,
    seq: &UserSequence,
    t: usize,
) -> Result<Vec<f64>, HstuError> {
    let n = seq.len();
    if t < 1 || t > n {
        return Err(HstuError::OracleTargetOutOfRange { t, n });
    }
    let truncated = UserSequence::new(
        seq.user_id,
        seq.profile_slots.clone(),
        seq.interactions[..t].to_vec(),
    )
    .expect("prefix of a valid sequence is valid");
    let mut batch = embed(&truncated, &enc.tables, true);
    // swap the last interaction's action lookup for the placeholder
    for pair in &mut batch.lookups[t] {
        if pair.0 == TABLE_ACTION {
            pair.1 = FAKE_ACTION_ROW;
        }
    }
    let mask = masking::session_mask(&batch.session_ids)?;
    let mut g: Graph<f64> = Graph::new();
    let bound = bind(enc, &mut g, false)?;
    let out = forward_single(&mut g, &bound, &batch, &mask)?;
    let d = enc.dims.d_model;
    Ok(g.value(out)[t * d..(t + 1) * d].to_vec())
}

/// Dual-flow forward at the parameter level; returns the dense fake-flow
/// final states `[T×D]`.
pub fn forward_dfgr_dense(
    enc: &EncoderParams,
    seq: &UserSequence,
    opts: ForwardOpts,
) -> Result<Vec<f64>, HstuError> {
    let (real, fake) = crate::sequence::build_dfgr(seq, &enc.tables);
    let mask = masking::session_mask(&real.session_ids)?;
    let mut g: Graph<f64> = Graph::new();
    let bound = bind(enc, &mut g, false)?;
    let (yf, _) = forward_dfgr(&mut g, &bound, &real, &fake, &mask, opts)?;
    Ok(g.value(yf).to_vec())
}

/// One randomly drawn encoder and behavior sequence for equivalence sweeps:
/// `D ∈ {8,16}`, `H ∈ {1,2}`, `L ∈ {1,2,4}` (unless pinned), `n ≤ 64`,
/// residual alternating, nonzero bias tables, items with one category slot.
pub fn random_world(
    rng: &mut impl Rng,
    pin_layers: Option<usize>,
) -> (EncoderParams, UserSequence) {
    use crate::sequence::Interaction;

    let d_model = if rng.gen_bool(0.5) { 8 } else { 16 };
    let heads = if rng.gen_bool(0.5) { 1 } else { 2 };
    let layers = pin_layers.unwrap_or_else(|| [1, 2, 4][rng.gen_range(0..3)]);
    let residual = rng.gen_bool(0.5);

    let mut tables = EmbeddingTables::zeros(
        d_model,
        48,
        2,
        &[("category".into(), 8)],
        &[("segment".into(), 4)],
    );
    let normal = Normal::new(0.0, 0.3).unwrap();
    for table in [&mut tables.item, &mut tables.action]
        .into_iter()
        .chain(tables.slots.iter_mut())
        .chain(tables.profile_slots.iter_mut())
    {
        for v in &mut table.data {
            *v = normal.sample(rng);
        }
    }
    let dims = Dims::new(d_model, heads, layers).expect("static dims are valid");
    let mut enc = EncoderParams::new(dims, tables, residual);
    enc.random_init(rng, 0.2);
    let bias = Normal::new(0.0, 0.1).unwrap();
    for layer in &mut enc.layers {
        for v in layer.rab_pos.iter_mut().chain(layer.rab_time.iter_mut()) {
            *v = bias.sample(rng);
        }
    }

    let n = rng.gen_range(1..=64usize);
    let mut interactions = Vec::with_capacity(n);
    let mut ts = 1_000u64;
    let mut session = 0u64;
    let mut left_in_session = 0usize;
    for _ in 0..n {
        if left_in_session == 0 {
            session += 1;
            left_in_session = rng.gen_range(1..=6);
            ts += rng.gen_range(300..3_000);
        }
        ts += rng.gen_range(1..90);
        interactions.push(Interaction {
            item_id: rng.gen_range(0..48),
            action: rng.gen_range(0..2),
            timestamp: ts,
            session_id: session,
            slots: vec![rng.gen_range(0..8)],
        });
        left_in_session -= 1;
    }
    let seq = UserSequence::new(7, vec![rng.gen_range(0..4)], interactions)
        .expect("generated sequence is valid");
    (enc, seq)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct OracleFailure {
    pub config: usize,
    pub n: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub residual: bool,
    pub position: usize,
    pub diff: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct OracleSweepReport {
    pub configs: usize,
    pub positions_checked: usize,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub first_failure: Option<OracleFailure>,
}

impl OracleSweepReport {
    pub fn passed(&self) -> bool {
        self.first_failure.is_none()
    }
}

/// Compare the dual-flow fake outputs against the per-target oracle over
/// randomly drawn configurations. Stops at the first position exceeding the
/// tolerance.
pub fn oracle_sweep(
    num_configs: usize,
    tolerance: f64,
    seed: u64,
    opts: ForwardOpts,
    pin_layers: Option<usize>,
) -> Result<OracleSweepReport, HstuError> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut max_abs_diff = 0.0f64;
    let mut positions_checked = 0;
    for config in 0..num_configs {
        let (enc, seq) = random_world(&mut rng, pin_layers);
        let yf = forward_dfgr_dense(&enc, &seq, opts)?;
        let d = enc.dims.d_model;
        for t in 1..=seq.len() {
            let want = oracle_per_target(&enc, &seq, t)?;
            let diff = (0..d)
                .map(|j| (yf[t * d + j] - want[j]).abs())
                .fold(0.0f64, f64::max);
            max_abs_diff = max_abs_diff.max(diff);
            positions_checked += 1;
            if diff >= tolerance {
                return Ok(OracleSweepReport {
                    configs: config + 1,
                    positions_checked,
                    max_abs_diff,
                    tolerance,
                    first_failure: Some(OracleFailure {
                        config,
                        n: seq.len(),
                        d_model: enc.dims.d_model,
                        heads: enc.dims.heads,
                        layers: enc.dims.layers,
                        residual: enc.residual,
                        position: t,
                        diff,
                    }),
                });
            }
        }
    }
    Ok(OracleSweepReport {
        configs: num_configs,
        positions_checked,
        max_abs_diff,
        tolerance,
        first_failure: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph64;
    use crate::sequence::{
        build_dfgr, build_inference, build_sfgr_samples, CandidateItem, Interaction, Role,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tables_with(dim: usize, rng: &mut ChaCha8Rng) -> EmbeddingTables {
        let mut t = EmbeddingTables::zeros(
            dim,
            32,
            2,
            &[("category".into(), 8)],
            &[("segment".into(), 4)],
        );
        let normal = Normal::new(0.0, 0.3).unwrap();
        for v in t
            .item
            .data
            .iter_mut()
            .chain(t.action.data.iter_mut())
            .chain(t.slots.iter_mut().flat_map(|s| s.data.iter_mut()))
            .chain(t.profile_slots.iter_mut().flat_map(|s| s.data.iter_mut()))
        {
            *v = normal.sample(rng);
        }
        t
    }

    fn random_sequence(rng: &mut ChaCha8Rng, session_sizes: &[usize]) -> UserSequence {
        let mut interactions = Vec::new();
        let mut ts = 1_000u64;
        for (s, &size) in session_sizes.iter().enumerate() {
            for _ in 0..size {
                ts += rng.gen_range(1..120);
                interactions.push(Interaction {
                    item_id: rng.gen_range(0..32),
                    action: rng.gen_range(0..2),
                    timestamp: ts,
                    session_id: s as u64,
                    slots: vec![rng.gen_range(0..8)],
                });
            }
            ts += rng.gen_range(600..3_600);
        }
        UserSequence::new(1, vec![rng.gen_range(0..4)], interactions).unwrap()
    }

    fn random_encoder(
        rng: &mut ChaCha8Rng,
        d_model: usize,
        heads: usize,
        layers: usize,
        residual: bool,
    ) -> EncoderParams {
        let tables = tables_with(d_model, rng);
        let dims = Dims::new(d_model, heads, layers).unwrap();
        let mut enc = EncoderParams::new(dims, tables, residual);
        enc.random_init(rng, 0.2);
        // nonzero rab so bias handling is exercised
        let normal = Normal::new(0.0, 0.1).unwrap();
        for layer in &mut enc.layers {
            for v in layer.rab_pos.iter_mut().chain(layer.rab_time.iter_mut()) {
                *v = normal.sample(rng);
            }
        }
        enc
    }

    #[test]
    fn project_zero_weights_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut enc = random_encoder(&mut rng, 4, 2, 1, true);
        enc.layers[0].w1.iter_mut().for_each(|v| *v = 0.0);
        enc.layers[0].b1.iter_mut().for_each(|v| *v = 0.0);
        let mut g = Graph64::new();
        let bound = bind(&enc, &mut g, false).unwrap();
        let x = g.constant(vec![3, 4], vec![0.5; 12]).unwrap();
        let (u, v, q, k) = project(&mut g, x, &bound.layers[0], &enc.dims).unwrap();
        for id in [u, v, q, k] {
            assert!(g.value(id).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn project_identity_stack_replicates_silu() {
        // W1 = [I I I I] horizontally: every quarter reproduces silu(x)
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 4;
        let mut enc = random_encoder(&mut rng, d, 2, 1, true);
        let hd = 4;
        enc.layers[0].w1.iter_mut().for_each(|v| *v = 0.0);
        enc.layers[0].b1.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..d {
            for quarter in 0..4 {
                enc.layers[0].w1[i * 4 * hd + quarter * hd + i] = 1.0;
            }
        }
        let xs = vec![0.3, -1.2, 2.0, 0.0];
        let mut g = Graph64::new();
        let bound = bind(&enc, &mut g, false).unwrap();
        let x = g.constant(vec![1, d], xs.clone()).unwrap();
        let (u, v, q, k) = project(&mut g, x, &bound.layers[0], &enc.dims).unwrap();
        for id in [u, v, q, k] {
            for (got, &want) in g.value(id).iter().zip(&xs) {
                assert!((got - crate::graph::silu(want)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn project_matches_composition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = random_encoder(&mut rng, 6, 2, 1, true);
        let t = 3;
        let xs: Vec<f64> = (0..t * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph64::new();
        let bound = bind(&enc, &mut g, false).unwrap();
        let x = g.constant(vec![t, 6], xs.clone()).unwrap();
        let (u, _, _, k) = project(&mut g, x, &bound.layers[0], &enc.dims).unwrap();

        // independent plain-loop recomputation
        let hd = 6;
        let layer = &enc.layers[0];
        let mut fused = vec![0.0; t * 4 * hd];
        for i in 0..t {
            for j in 0..4 * hd {
                let mut s = layer.b1[j];
                for l in 0..6 {
                    s += xs[i * 6 + l] * layer.w1[l * 4 * hd + j];
                }
                fused[i * 4 * hd + j] = crate::graph::silu(s);
            }
        }
        for i in 0..t {
            for j in 0..hd {
                let want_u = fused[i * 4 * hd + j];
                let want_k = fused[i * 4 * hd + 3 * hd + j];
                assert!((g.value(u)[i * hd + j] - want_u).abs() < 1e-12);
                assert!((g.value(k)[i * hd + j] - want_k).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rab_zero_tables_and_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = random_encoder(&mut rng, 4, 2, 1, true);
        let dims = enc.dims;
        let positions = [0usize, 1, 2, 3];
        let timestamps = [10u64, 20, 21, 300];

        let zero = HstuParams::zeros(&dims);
        let bias = rab(&positions, &timestamps, &zero, &dims).unwrap();
        assert!(bias.iter().all(|&b| b == 0.0));

        let bias = rab(&positions, &timestamps, &enc.layers[0], &dims).unwrap();
        let t = positions.len();
        for h in 0..dims.heads {
            for i in 0..t {
                let want = enc.layers[0].rab_pos[h * dims.pos_buckets]
                    + enc.layers[0].rab_time[h * dims.time_buckets];
                assert_eq!(bias[h * t * t + i * t + i], want);
            }
        }
    }

    #[test]
    fn rab_candidates_share_bias_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = random_encoder(&mut rng, 4, 2, 1, true);
        let seq = random_sequence(&mut rng, &[3, 2]);
        let cands: Vec<CandidateItem> = (0..2)
            .map(|i| CandidateItem {
                item_id: i,
                slots: vec![0],
            })
            .collect();
        let batches = build_inference(&seq, &cands, &enc.tables, 4).unwrap();
        let b = &batches[0];
        let bias = rab(&b.positions, &b.timestamps, &enc.layers[0], &enc.dims).unwrap();
        let t = b.len();
        let (c1, c2) = (t - 2, t - 1);
        for h in 0..enc.dims.heads {
            for j in 0..t - 2 {
                assert_eq!(
                    bias[h * t * t + c1 * t + j],
                    bias[h * t * t + c2 * t + j],
                    "history key {j}"
                );
            }
        }
    }

    #[test]
    fn real_layer_zero_projection_is_residual_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut enc = random_encoder(&mut rng, 4, 2, 1, true);
        enc.layers[0].w1.iter_mut().for_each(|v| *v = 0.0);
        enc.layers[0].b1.iter_mut().for_each(|v| *v = 0.0);
        enc.layers[0].b2.iter_mut().for_each(|v| *v = 0.0);
        let xs: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph64::new();
        let bound = bind(&enc, &mut g, false).unwrap();
        let x = g.constant(vec![3, 4], xs.clone()).unwrap();
        let mask = masking::causal_mask(3);
        let ctx = AttnContext::new(&mut g, &mask, &[0, 1, 2], &[5, 6, 7], &enc.dims).unwrap();
        let (y, _) =
            real_flow_layer(&mut g, x, &ctx, &bound.layers[0], &enc.dims, true, false).unwrap();
        assert_eq!(g.value(y), &xs[..]);
    }

    #[test]
    fn real_layer_t1_matches_hand_chain() {
        // D = H = d = 1: the whole block is a scalar chain
        let dims = Dims::new(1, 1, 1).unwrap();
        let tables = EmbeddingTables::zeros(1, 2, 2, &[], &[]);
        let mut enc = EncoderParams::new(dims, tables, false);
        let w1 = [0.7, -0.3, 0.9, 0.4]; // u, v, q, k columns
        enc.layers[0].w1.copy_from_slice(&w1);
        enc.layers[0].b1.copy_from_slice(&[0.1, 0.2, -0.1, 0.05]);
        enc.layers[0].w2[0] = 1.3;
        enc.layers[0].b2[0] = -0.6;
        enc.layers[0].rab_pos[0] = 0.25;
        enc.layers[0].rab_time[0] = -0.15;

        let x0 = 0.8;
        let mut g = Graph64::new();
        let bound = bind(&enc, &mut g, false).unwrap();
        let x = g.constant(vec![1, 1], vec![x0]).unwrap();
        let mask = masking::causal_mask(1);
        let ctx = AttnContext::new(&mut g, &mask, &[0], &[100], &dims).unwrap();
        let (y, _) =
            real_flow_layer(&mut g, x, &ctx, &bound.layers[0], &dims, false, false).unwrap();

        let s = crate::graph::silu(x0 * w1[0] + 0.1); // u
        let v = crate::graph::silu(x0 * w1[1] + 0.2);
        let q = crate::graph::silu(x0 * w1[2] - 0.1);
        let k = crate::graph::silu(x0 * w1[3] + 0.05);
        let attn = crate::graph::silu(q * k + 0.25 - 0.15);
        let av = attn * v;
        // width-1 layer norm standardizes to zero, leaving the norm bias (0)
        let _ = av;
        let normed = 0.0;
        let want = normed * s * 1.3 - 0.6;
        assert!(
            (g.value(y)[0] - want).abs() < 1e-12,
            "{} vs {want}",
            g.value(y)[0]
        );
    }

    #[test]
    fn masked_key_has_exactly_zero_influence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let enc = random_encoder(&mut rng, 6, 2, 1, true);
        let run = |xs: &[f64], mask: &MaskMatrix| {
            let mut g = Graph64::new();
            let bound = bind(&enc, &mut g, false).unwrap();
            let x = g.constant(vec![3, 6], xs.to_vec()).unwrap();
            let ctx = AttnContext::new(&mut g, mask, &[0, 1, 2], &[5, 6, 9], &enc.dims).unwrap();
            let (y, _) =
                real_flow_layer(&mut g, x, &ctx, &bound.layers[0], &enc.dims, true, false).unwrap();
            g.value(y).to_vec()
        };
        let mask = masking::session_mask(&[0, 1, 1]).unwrap(); // row 2 cannot see key 1
        let xs: Vec<f64> = (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut perturbed = xs.clone();
        for v in &mut perturbed[6..12] {
            *v += rng.gen_range(0.5..2.0);
        }
        let base = run(&xs, &mask);
        let after = run(&perturbed, &mask);
        // row 2 is bit-invariant to key 1; row 1 (its own residual) changes
        assert_eq!(&base[12..18], &after[12..18]);
        assert_ne!(&base[6..12], &after[6..12]);
    }

    #[test]
    fn coinciding_flows_match_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for residual in [true, false] {
            let mut enc = random_encoder(&mut rng, 8, 2, 2, residual);
            enc.tables.action.data.iter_mut().for_each(|v| *v = 0.0);
            let seq = random_sequence(&mut rng, &[3, 2, 2]);
            let (real, fake) = build_dfgr(&seq, &enc.tables);
            assert_eq!(real.dense_x(&enc.tables), fake.dense_x(&enc.tables));
            let mask = masking::session_mask(&real.session_ids).unwrap();
            let mut g = Graph64::new();
            let bound = bind(&enc, &mut g, false).unwrap();
            let (yf, cache) =
                forward_dfgr(&mut g, &bound, &real, &fake, &mask, ForwardOpts::default()).unwrap();
            let single = forward_single(&mut g, &bound, &real, &mask).unwrap();
            assert_eq!(g.value(yf), g.value(single));
            assert_eq!(cache.entries.len(), enc.dims.layers);
            for &(k, v) in &cache.entries {
                assert_eq!(g.shape(k)[0], real.len());
                assert_eq!(g.shape(v)[0], real.len());
            }
        }
    }

    #[test]
    fn fake_layer_t1_ignores_cache_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = random_encoder(&mut rng, 4, 1, 1, true);
        let xf: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = |cache_vals: f64| {
            let mut g = Graph64::new();
            let bound = bind(&enc, &mut g, false).unwrap();
            let x = g.constant(vec![1, 4], xf.clone()).unwrap();
            let kc = g.constant(vec![1, 4], vec![cache_vals; 4]).unwrap();
            let vc = g.constant(vec![1, 4], vec![-cache_vals; 4]).unwrap();
            let mask = masking::causal_mask(1);
            let ctx = AttnContext::new(&mut g, &mask, &[0], &[50], &enc.dims).unwrap();
            let y = fake_flow_layer(
                &mut g,
                x,
                (kc, vc),
                &ctx,
                &bound.layers[0],
                &enc.dims,
                true,
                false,
                false,
            )
            .unwrap();
            g.value(y).to_vec()
        };
        assert_eq!(run(0.0), run(123.456));
    }

    #[test]
    fn dual_flow_matches_oracle_per_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for (d_model, heads, layers, residual) in
            [(4, 1, 1, true), (8, 2, 2, false), (8, 2, 3, true)]
        {
            let enc = random_encoder(&mut rng, d_model, heads, layers, residual);
            let seq = random_sequence(&mut rng, &[4, 3, 2]);
            let yf = forward_dfgr_dense(&enc, &seq, ForwardOpts::default()).unwrap();
            let d = enc.dims.d_model;
            for t in 1..=seq.len() {
                let want = oracle_per_target(&enc, &seq, t).unwrap();
                for j in 0..d {
                    let diff = (yf[t * d + j] - want[j]).abs();
                    assert!(
                        diff < 1e-10,
                        "cfg ({d_model},{heads},{layers},{residual}) t={t} j={j} diff={diff}"
                    );
                }
            }
        }
    }

    #[test]
    fn oracle_target_bounds_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = random_encoder(&mut rng, 4, 1, 1, true);
        let seq = random_sequence(&mut rng, &[2]);
        assert!(matches!(
            oracle_per_target(&enc, &seq, 0),
            Err(HstuError::OracleTargetOutOfRange { t: 0, n: 2 })
        ));
        assert!(matches!(
            oracle_per_target(&enc, &seq, 3),
            Err(HstuError::OracleTargetOutOfRange { t: 3, n: 2 })
        ));
    }

    #[test]
    fn injected_cross_diag_fault_breaks_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let enc = random_encoder(&mut rng, 8, 2, 2, true);
        let seq = random_sequence(&mut rng, &[3, 3]);
        let good = forward_dfgr_dense(&enc, &seq, ForwardOpts::default()).unwrap();
        let bad = forward_dfgr_dense(
            &enc,
            &seq,
            ForwardOpts {
                fault_keep_cross_diag: true,
            },
        )
        .unwrap();
        let d = enc.dims.d_model;
        let max_diff = (d..good.len())
            .map(|i| (good[i] - bad[i]).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 1e-8, "fault must be observable, got {max_diff}");
    }

    #[test]
    fn l_zero_encoder_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let enc = random_encoder(&mut rng, 4, 2, 0, true);
        let seq = random_sequence(&mut rng, &[2, 1]);
        let (real, fake) = build_dfgr(&seq, &enc.tables);
        let mask = masking::session_mask(&real.session_ids).unwrap();
        let mut g = Graph64::new();
        let bound = bind(&enc, &mut g, false).unwrap();
        let (yf, cache) =
            forward_dfgr(&mut g, &bound, &real, &fake, &mask, ForwardOpts::default()).unwrap();
        assert_eq!(g.value(yf), &fake.dense_x(&enc.tables)[..]);
        assert!(cache.entries.is_empty());
        let ys = forward_single(&mut g, &bound, &real, &mask).unwrap();
        assert_eq!(g.value(ys), &real.dense_x(&enc.tables)[..]);
    }

    #[test]
    fn no_future_dependence() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let enc = random_encoder(&mut rng, 8, 2, 2, true);
        let mut seq = random_sequence(&mut rng, &[3, 2, 3]);
        let base = forward_dfgr_dense(&enc, &seq, ForwardOpts::default()).unwrap();
        // perturb everything after position t = 5 (sessions stay contiguous)
        for it in &mut seq.interactions[5..] {
            it.item_id = (it.item_id + 7) % 32;
            it.action = 1 - it.action;
            it.slots[0] = (it.slots[0] + 3) % 8;
        }
        let after = forward_dfgr_dense(&enc, &seq, ForwardOpts::default()).unwrap();
        let d = enc.dims.d_model;
        for t in 0..=5 {
            assert_eq!(&base[t * d..(t + 1) * d], &after[t * d..(t + 1) * d]);
        }
        assert_ne!(&base[6 * d..7 * d], &after[6 * d..7 * d]);
    }

    #[test]
    fn weight_mutation_moves_coinciding_flows_together() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut enc = random_encoder(&mut rng, 4, 1, 2, true);
        enc.tables.action.data.iter_mut().for_each(|v| *v = 0.0);
        let seq = random_sequence(&mut rng, &[2, 2]);

        let outputs = |enc: &EncoderParams| {
            let (real, fake) = build_dfgr(&seq, &enc.tables);
            let mask = masking::session_mask(&real.session_ids).unwrap();
            let mut g = Graph64::new();
            let bound = bind(enc, &mut g, false).unwrap();
            let (yf, _) =
                forward_dfgr(&mut g, &bound, &real, &fake, &mask, ForwardOpts::default()).unwrap();
            let yr = forward_single(&mut g, &bound, &real, &mask).unwrap();
            (g.value(yf).to_vec(), g.value(yr).to_vec())
        };
        let (yf0, yr0) = outputs(&enc);
        assert_eq!(yf0, yr0);
        enc.layers[0].w1[3] += 0.5;
        let (yf1, yr1) = outputs(&enc);
        assert_eq!(yf1, yr1, "shared weights must move both flows identically");
        assert_ne!(yf0, yf1);
    }

    #[test]
    fn sfgr_candidate_slot_equals_dfgr_fake_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let enc = random_encoder(&mut rng, 8, 2, 2, true);
        let seq = random_sequence(&mut rng, &[3, 4, 2]);
        let yf = forward_dfgr_dense(&enc, &seq, ForwardOpts::default()).unwrap();
        let d = enc.dims.d_model;

        let samples = build_sfgr_samples(&seq, &enc.tables).unwrap();
        for sample in &samples {
            let mask = masking::candidate_block_mask(&sample.roles, &sample.session_ids).unwrap();
            let mut g = Graph64::new();
            let bound = bind(&enc, &mut g, false).unwrap();
            let out = forward_single(&mut g, &bound, sample, &mask).unwrap();
            for i in 0..sample.len() {
                if sample.roles[i] != Role::Candidate {
                    continue;
                }
                let t = sample.interaction_ids[i] as usize + 1;
                for j in 0..d {
                    let diff = (g.value(out)[i * d + j] - yf[t * d + j]).abs();
                    assert!(diff < 1e-10, "t={t} j={j} diff={diff}");
                }
            }
        }
    }

    #[test]
    fn candidate_permutation_permutes_hidden_states_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let enc = random_encoder(&mut rng, 8, 2, 2, true);
        let seq = random_sequence(&mut rng, &[3, 3]);
        let cands: Vec<CandidateItem> = (0..4)
            .map(|_| CandidateItem {
                item_id: rng.gen_range(0..32),
                slots: vec![rng.gen_range(0..8)],
            })
            .collect();
        let run = |cands: &[CandidateItem]| {
            let batch = build_inference(&seq, cands, &enc.tables, 8)
                .unwrap()
                .remove(0);
            let mask = masking::candidate_block_mask(&batch.roles, &batch.session_ids).unwrap();
            let mut g = Graph64::new();
            let bound = bind(&enc, &mut g, false).unwrap();
            let out = forward_single(&mut g, &bound, &batch, &mask).unwrap();
            let d = enc.dims.d_model;
            let first = batch.len() - cands.len();
            (0..cands.len())
                .map(|c| g.value(out)[(first + c) * d..(first + c + 1) * d].to_vec())
                .collect::<Vec<_>>()
        };
        let base = run(&cands);
        let mut shuffled: Vec<CandidateItem> = cands.clone();
        shuffled.reverse();
        let rev = run(&shuffled);
        for c in 0..cands.len() {
            assert_eq!(base[c], rev[cands.len() - 1 - c]);
        }
    }
}
