//! Analytic FLOP accounting for the three paradigms, and a wall-clock
//! companion that times real forward passes.
//!
//! The per-layer unit is `2*(4*B*T*D^2 + 2*B*H*T^2*d + B*T*D^2)`: the fused
//! projection, the two T×T attention products, and the output projection.
//! Training is modeled as 3x a forward pass (forward plus roughly 2x for
//! backward); that factor cancels in every paradigm ratio. Embedding and
//! head costs are excluded.

use crate::graph::Graph;
use crate::hstu::{bind, forward_single, Dims, EncoderParams};
use crate::masking;
use crate::sequence::{
    build_inference, build_metagr, CandidateItem, EmbeddingTables, Interaction, UserSequence,
};
use crate::trainer::Paradigm;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;
use thiserror::Error;

/// The per-layer cost expression in the symbols of the analysis
/// (`N` standing for the sequence length fed to the layer).
pub const LAYER_FLOPS_FORMULA: &str = "2*O(4*B*N*D^2 + 2*B*H*N^2*d + B*N*D^2)*L";

/// Training cost per forward-pass cost.
pub const TRAIN_FACTOR: f64 = 3.0;

#[derive(Debug, Error)]
pub enum FlopsError {
    #[error("invalid cost model: {0}")]
    InvalidModel(String),
}

/// Transformer shape the analysis is evaluated at. `session_len` is the
/// mean items per session (the microbatch size during scoring).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct CostModel {
    pub batch: usize,
    pub seq_len: usize,
    pub session_len: usize,
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub layers: usize,
}

impl CostModel {
    pub fn new(
        batch: usize,
        seq_len: usize,
        session_len: usize,
        d_model: usize,
        heads: usize,
        layers: usize,
    ) -> Result<Self, FlopsError> {
        if heads == 0 || d_model == 0 || !d_model.is_multiple_of(heads) {
            return Err(FlopsError::InvalidModel(format!(
                "d_model {d_model} must be a positive multiple of heads {heads}"
            )));
        }
        if batch == 0 || seq_len == 0 || session_len == 0 || layers == 0 {
            return Err(FlopsError::InvalidModel(
                "batch, seq_len, session_len, and layers must be positive".into(),
            ));
        }
        if session_len > seq_len {
            return Err(FlopsError::InvalidModel(format!(
                "session_len {session_len} exceeds seq_len {seq_len}"
            )));
        }
        Ok(CostModel {
            batch,
            seq_len,
            session_len,
            d_model,
            heads,
            head_dim: d_model / heads,
            layers,
        })
    }
}

/// Itemized cost of one quantity of work; the total is exactly the sum.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct FlopBreakdown {
    pub projection: f64,
    pub attention: f64,
    pub output: f64,
}

impl FlopBreakdown {
    pub const ZERO: FlopBreakdown = FlopBreakdown {
        projection: 0.0,
        attention: 0.0,
        output: 0.0,
    };

    pub fn total(&self) -> f64 {
        self.projection + self.attention + self.output
    }

    fn add(&mut self, other: &FlopBreakdown) {
        self.projection += other.projection;
        self.attention += other.attention;
        self.output += other.output;
    }

    fn scaled(&self, c: f64) -> FlopBreakdown {
        FlopBreakdown {
            projection: self.projection * c,
            attention: self.attention * c,
            output: self.output * c,
        }
    }
}

/// One layer of one flow at sequence length `t`.
pub fn layer_flops(t: usize, model: &CostModel) -> FlopBreakdown {
    let b = model.batch as f64;
    let tf = t as f64;
    let d2 = (model.d_model * model.d_model) as f64;
    FlopBreakdown {
        projection: 2.0 * 4.0 * b * tf * d2,
        attention: 2.0 * 2.0 * b * (model.heads as f64) * tf * tf * (model.head_dim as f64),
        output: 2.0 * b * tf * d2,
    }
}

fn stack(t: usize, model: &CostModel) -> FlopBreakdown {
    layer_flops(t, model).scaled(model.layers as f64)
}

/// Forward, training, and inference cost of one paradigm.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ParadigmCost {
    pub paradigm: Paradigm,
    /// Itemized forward cost of one training pass.
    pub forward: FlopBreakdown,
    pub training_flops: f64,
    /// One scoring pass over the history plus a `session_len` microbatch.
    pub inference_flops: f64,
}

/// Full comparison across the three paradigms at one configuration.
#[derive(Debug, Clone, serde::Serialize)]
pub struct FlopReport {
    pub model: CostModel,
    pub metagr: ParadigmCost,
    pub sfgr: ParadigmCost,
    pub dfgr: ParadigmCost,
}

impl FlopReport {
    pub fn train_ratio_vs_metagr(&self, paradigm: Paradigm) -> f64 {
        self.cost(paradigm).training_flops / self.metagr.training_flops
    }

    pub fn infer_ratio_vs_metagr(&self, paradigm: Paradigm) -> f64 {
        self.cost(paradigm).inference_flops / self.metagr.inference_flops
    }

    pub fn cost(&self, paradigm: Paradigm) -> &ParadigmCost {
        match paradigm {
            Paradigm::MetaGR => &self.metagr,
            Paradigm::SFGR => &self.sfgr,
            Paradigm::DFGR => &self.dfgr,
        }
    }
}

/// Evaluate the closed forms: the interleaved paradigm trains and scores at
/// length `2N`; the dual flow trains as two single flows at `N`; the
/// single-flow paradigm trains one sample per session (lengths `K, 2K, ...`)
/// and both score at `N + m` with `m = session_len` candidates appended.
pub fn paradigm_flops(model: &CostModel) -> FlopReport {
    let n = model.seq_len;
    let k = model.session_len;

    let metagr_fwd = stack(2 * n, model);
    let single_fwd = stack(n, model);
    let dfgr_fwd = single_fwd.scaled(2.0);

    let mut sfgr_fwd = FlopBreakdown::ZERO;
    for i in 1..=n / k {
        sfgr_fwd.add(&stack(i * k, model));
    }
    if !n.is_multiple_of(k) {
        // trailing partial session still pays for its full prefix
        sfgr_fwd.add(&stack(n, model));
    }

    let infer = stack(n + k, model).total();
    let metagr_infer = metagr_fwd.total();

    FlopReport {
        model: *model,
        metagr: ParadigmCost {
            paradigm: Paradigm::MetaGR,
            forward: metagr_fwd,
            training_flops: TRAIN_FACTOR * metagr_fwd.total(),
            inference_flops: metagr_infer,
        },
        sfgr: ParadigmCost {
            paradigm: Paradigm::SFGR,
            forward: sfgr_fwd,
            training_flops: TRAIN_FACTOR * sfgr_fwd.total(),
            inference_flops: infer,
        },
        dfgr: ParadigmCost {
            paradigm: Paradigm::DFGR,
            forward: dfgr_fwd,
            training_flops: TRAIN_FACTOR * dfgr_fwd.total(),
            inference_flops: infer,
        },
    }
}

/// CSV grid over configurations, one row per paradigm each.
pub fn grid_csv(models: &[CostModel]) -> String {
    let mut out = String::new();
    out.push_str(&format!("# layer cost: {LAYER_FLOPS_FORMULA}\n"));
    out.push_str(
        "paradigm,B,N,K,D,H,d,L,train_flops,infer_flops,train_ratio_vs_metagr,infer_ratio_vs_metagr\n",
    );
    for m in models {
        let report = paradigm_flops(m);
        for paradigm in [Paradigm::MetaGR, Paradigm::SFGR, Paradigm::DFGR] {
            let c = report.cost(paradigm);
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{:.6e},{:.6e},{:.6},{:.6}\n",
                paradigm,
                m.batch,
                m.seq_len,
                m.session_len,
                m.d_model,
                m.heads,
                m.head_dim,
                m.layers,
                c.training_flops,
                c.inference_flops,
                report.train_ratio_vs_metagr(paradigm),
                report.infer_ratio_vs_metagr(paradigm),
            ));
        }
    }
    out
}

/// Geometric N sweep at fixed K and D for the convergence columns.
pub fn default_grid() -> Vec<CostModel> {
    [512usize, 1024, 2048, 4096, 8192]
        .iter()
        .map(|&n| CostModel::new(1, n, 32, 64, 1, 1).expect("static grid is valid"))
        .collect()
}

/// Wall-clock measurement of one paradigm's scoring forward pass.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RuntimeReport {
    pub paradigm: Paradigm,
    pub trials: usize,
    pub times_seconds: Vec<f64>,
    pub median_seconds: Option<f64>,
    /// Analytic inference cost and its ratio against the interleaved
    /// paradigm, printed side-by-side with the measurement.
    pub analytic_inference_flops: f64,
    pub analytic_infer_ratio_vs_metagr: f64,
}

fn bench_world(model: &CostModel) -> (EncoderParams, UserSequence, Vec<CandidateItem>) {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let n = model.seq_len;
    let k = model.session_len;
    let mut interactions = Vec::with_capacity(n);
    let mut ts = 1_000u64;
    for i in 0..n {
        ts += rng.gen_range(1..60);
        interactions.push(Interaction {
            item_id: rng.gen_range(0..64),
            action: rng.gen_range(0..2),
            timestamp: ts,
            session_id: (i / k) as u64,
            slots: vec![],
        });
    }
    let seq = UserSequence::new(0, vec![], interactions).expect("bench sequence is valid");
    let tables = EmbeddingTables::zeros(model.d_model, 64, 2, &[], &[]);
    let dims = Dims::new(model.d_model, model.heads, model.layers).expect("validated model");
    let mut enc = EncoderParams::new(dims, tables, true);
    enc.random_init(&mut rng, 0.02);
    let candidates = (0..k)
        .map(|i| CandidateItem {
            item_id: i as u64,
            slots: vec![],
        })
        .collect();
    (enc, seq, candidates)
}

fn forward_once<F: crate::graph::Scalar>(
    enc: &EncoderParams,
    seq: &UserSequence,
    candidates: &[CandidateItem],
    paradigm: Paradigm,
) {
    match paradigm {
        Paradigm::MetaGR => {
            let batch = build_metagr(seq, &enc.tables);
            let mask = masking::causal_mask(batch.len());
            let mut g: Graph<F> = Graph::new();
            let bound = bind(enc, &mut g, false).expect("bind");
            let out = forward_single(&mut g, &bound, &batch, &mask).expect("forward");
            std::hint::black_box(g.value(out)[0]);
        }
        Paradigm::SFGR | Paradigm::DFGR => {
            let batch = build_inference(seq, candidates, &enc.tables, candidates.len())
                .expect("bench candidates")
                .remove(0);
            let mask =
                masking::candidate_block_mask(&batch.roles, &batch.session_ids).expect("mask");
            let mut g: Graph<F> = Graph::new();
            let bound = bind(enc, &mut g, false).expect("bind");
            let out = forward_single(&mut g, &bound, &batch, &mask).expect("forward");
            std::hint::black_box(g.value(out)[0]);
        }
    }
}

fn measure_with<F: crate::graph::Scalar>(
    model: &CostModel,
    paradigm: Paradigm,
    trials: usize,
) -> RuntimeReport {
    let report = paradigm_flops(model);
    let mut times = Vec::with_capacity(trials);
    if trials > 0 {
        let (enc, seq, candidates) = bench_world(model);
        for _ in 0..trials {
            let start = Instant::now();
            forward_once::<F>(&enc, &seq, &candidates, paradigm);
            times.push(start.elapsed().as_secs_f64());
        }
    }
    let median_seconds = median(&times);
    RuntimeReport {
        paradigm,
        trials,
        times_seconds: times,
        median_seconds,
        analytic_inference_flops: report.cost(paradigm).inference_flops,
        analytic_infer_ratio_vs_metagr: report.infer_ratio_vs_metagr(paradigm),
    }
}

/// Median wall time of the paradigm's scoring forward pass: the interleaved
/// layout at `2N + 1` tokens, or history plus a `session_len` microbatch for
/// the single/dual flow. Runs at the default 64-bit precision.
pub fn measure_runtime(
    model: &CostModel,
    paradigm: Paradigm,
    trials: usize,
) -> Result<RuntimeReport, FlopsError> {
    Ok(measure_with::<f64>(model, paradigm, trials))
}

/// Same measurement in the 32-bit speed mode.
pub fn measure_runtime_f32(
    model: &CostModel,
    paradigm: Paradigm,
    trials: usize,
) -> Result<RuntimeReport, FlopsError> {
    Ok(measure_with::<f32>(model, paradigm, trials))
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Some(if sorted.len().is_multiple_of(2) {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    })
}
