//! Training loop, Adam optimizer, learning-rate schedule, and ranking
//! metrics (AUC / G-AUC).
//!
//! One trainer owns the parameters for the whole run. Each step rebuilds a
//! fresh graph: bind parameters, run the paradigm's forward over a batch of
//! sequences, take the masked cross-entropy over all labeled positions,
//! backward, Adam update. Everything is seeded, so identical configs produce
//! bit-identical parameters and metrics.

use crate::datagen::{time_split, DatagenError, Dataset};
use crate::graph::{Graph, GraphError, Scalar, TensorId};
use crate::head;
use crate::hstu::{
    bind, forward_dfgr, forward_single, BoundEncoder, Dims, EncoderParams, ForwardOpts, HstuError,
};
use crate::masking::{self, MaskError, MaskMatrix};
use crate::sequence::{
    build_dfgr, build_metagr, build_sfgr_samples, EmbeddingTables, Role, SequenceError, TokenBatch,
    UserSequence,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Hstu(#[from] HstuError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error(transparent)]
    Data(#[from] DatagenError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },
    #[error("no training sequences with labeled positions")]
    NoTrainingData,
}

/// The three sequence paradigms the harness can train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Paradigm {
    MetaGR,
    SFGR,
    DFGR,
}

impl std::str::FromStr for Paradigm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "METAGR" => Ok(Paradigm::MetaGR),
            "SFGR" => Ok(Paradigm::SFGR),
            "DFGR" => Ok(Paradigm::DFGR),
            other => Err(format!(
                "unknown paradigm {other:?}; valid values: METAGR, SFGR, DFGR"
            )),
        }
    }
}

impl std::fmt::Display for Paradigm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Paradigm::MetaGR => "METAGR",
            Paradigm::SFGR => "SFGR",
            Paradigm::DFGR => "DFGR",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainConfig {
    pub paradigm: Paradigm,
    pub batch_size: usize,
    pub steps: usize,
    pub base_lr: f64,
    /// Learning-rate decrease per 1000 steps once decay starts.
    pub decay_per_1k: f64,
    /// First step of the decay phase; `usize::MAX` keeps the rate constant.
    pub decay_start_step: usize,
    pub seed: u64,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub residual: bool,
    /// Session-aware masking (cross-triangle) for the single/dual flows;
    /// plain causal when off.
    pub session_mask: bool,
    /// Deviation knob: apply the paired session rule to the interleaved
    /// paradigm too (its default mask is plain causal).
    pub metagr_session_mask: bool,
    pub scale_scores: bool,
    pub eval_every: usize,
    /// Sequences longer than this lose whole sessions from the front.
    pub max_seq: usize,
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            paradigm: Paradigm::DFGR,
            batch_size: 8,
            steps: 1000,
            base_lr: 5e-4,
            decay_per_1k: 5e-6,
            decay_start_step: usize::MAX,
            seed: 7,
            d_model: 16,
            heads: 2,
            layers: 2,
            residual: true,
            session_mask: true,
            metagr_session_mask: false,
            scale_scores: false,
            eval_every: 250,
            max_seq: 64,
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.base_lr <= 0.0 {
            return Err(TrainError::InvalidConfig("base_lr must be positive".into()));
        }
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(TrainError::InvalidConfig(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.max_seq == 0 {
            return Err(TrainError::InvalidConfig(
                "batch_size, eval_every, and max_seq must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Piecewise-linear schedule: constant at `base_lr`, then a linear decay of
/// `decay_per_1k` per 1000 steps, clamped at 1e-6. No warmup segment.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.decay_start_step {
        cfg.base_lr
    } else {
        let elapsed = (step - cfg.decay_start_step) as f64;
        (cfg.base_lr - cfg.decay_per_1k * elapsed / 1000.0).max(1e-6)
    }
}

/// Probability that a random positive outranks a random negative, ties
/// counted half (rank-sum form). `None` when either class is missing.
pub fn auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let n = scores.len();
    let pos = labels.iter().filter(|&&l| l > 0.5).count();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j share the average rank
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            if labels[k] > 0.5 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let pos_f = pos as f64;
    Some((rank_sum_pos - pos_f * (pos_f + 1.0) / 2.0) / (pos_f * neg as f64))
}

/// Impression-weighted mean of per-user AUC over users whose impressions
/// contain both classes; users lacking both classes are excluded from the
/// numerator and the denominator. `None` when no user qualifies.
pub fn gauc(scores: &[f64], labels: &[f64], user_ids: &[u64]) -> Option<f64> {
    let mut by_user: BTreeMap<u64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((&s, &l), &u) in scores.iter().zip(labels).zip(user_ids) {
        let e = by_user.entry(u).or_default();
        e.0.push(s);
        e.1.push(l);
    }
    let mut weighted = 0.0;
    let mut weight = 0.0;
    for (s, l) in by_user.values() {
        if let Some(a) = auc(s, l) {
            weighted += a * s.len() as f64;
            weight += s.len() as f64;
        }
    }
    if weight == 0.0 {
        None
    } else {
        Some(weighted / weight)
    }
}

/// Adam with bias correction; state vectors follow the declared parameter
/// order of [`EncoderParams::visit`].
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(enc: &EncoderParams) -> Self {
        let mut m = Vec::new();
        enc.visit(&mut |_, data| m.push(vec![0.0; data.len()]));
        let v = m.clone();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    /// One update; `grads` must align with the declared parameter order.
    pub fn apply(&mut self, enc: &mut EncoderParams, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut idx = 0;
        enc.visit_mut(&mut |_, data| {
            let g = &grads[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            idx += 1;
        });
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub auc: Option<f64>,
    pub gauc: Option<f64>,
}

/// Metrics of one run. The eval timestamp is the validation split point
/// (data time, not wall clock, so reruns are byte-identical).
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub auc: Option<f64>,
    pub gauc: Option<f64>,
    pub loss_curve: Vec<f64>,
    pub eval_rows: Vec<EvalRow>,
    pub eval_timestamp: u64,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss,auc,gauc\n");
        for r in &self.eval_rows {
            let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
            out.push_str(&format!(
                "{},{:.8},{:.6},{},{}\n",
                r.step,
                r.lr,
                r.loss,
                fmt(r.auc),
                fmt(r.gauc)
            ));
        }
        out
    }

    pub fn summary_json(&self, cfg: &TrainConfig) -> serde_json::Value {
        serde_json::json!({
            "config": cfg,
            "auc": self.auc,
            "gauc": self.gauc,
            "final_loss": self.loss_curve.last(),
            "steps": self.loss_curve.len(),
            "eval_timestamp": self.eval_timestamp,
        })
    }
}

/// Input of a run: the full dataset plus an optional time split. With a
/// split, training sees `ts <= split` and evaluation scores positions with
/// `ts > split` given their full preceding history.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub dataset: Dataset,
    pub split_ts: Option<u64>,
}

/// One forward/loss unit: a dual-flow pair or a single-flow batch.
enum Unit {
    Dual {
        real: TokenBatch,
        fake: TokenBatch,
        mask: MaskMatrix,
    },
    Single {
        batch: TokenBatch,
        mask: MaskMatrix,
    },
}

impl Unit {
    fn labeled(&self) -> usize {
        match self {
            Unit::Dual { fake, .. } => fake.labeled_count(),
            Unit::Single { batch, .. } => batch.labeled_count(),
        }
    }
}

struct EvalUnit {
    unit: Unit,
    /// Token indices that produce validation scores.
    positions: Vec<usize>,
    user: u64,
}

/// Keep at most `max` interactions by dropping whole sessions from the
/// front; a single oversized session is kept intact.
fn cap_front(seq: &UserSequence, max: usize) -> UserSequence {
    if seq.len() <= max {
        return seq.clone();
    }
    let sessions = seq.sessions();
    let mut start = seq.len();
    let mut kept = 0;
    for r in sessions.iter().rev() {
        if kept > 0 && kept + r.len() > max {
            break;
        }
        kept += r.len();
        start = r.start;
    }
    UserSequence::new(
        seq.user_id,
        seq.profile_slots.clone(),
        seq.interactions[start..].to_vec(),
    )
    .expect("suffix of whole sessions is valid")
}

fn dual_mask(batch: &TokenBatch, session_flag: bool) -> Result<MaskMatrix, MaskError> {
    if session_flag {
        masking::session_mask(&batch.session_ids)
    } else {
        Ok(masking::causal_mask(batch.len()))
    }
}

fn metagr_mask(batch: &TokenBatch, session_flag: bool) -> Result<MaskMatrix, MaskError> {
    if session_flag {
        masking::interleaved_session_mask(&batch.session_ids, &batch.interaction_ids)
    } else {
        Ok(masking::causal_mask(batch.len()))
    }
}

fn sfgr_mask(batch: &TokenBatch, session_flag: bool) -> Result<MaskMatrix, MaskError> {
    if session_flag {
        masking::candidate_block_mask(&batch.roles, &batch.session_ids)
    } else {
        // causal plus candidate-candidate blinding
        let mut m = masking::causal_mask(batch.len());
        for i in 0..batch.len() {
            if batch.roles[i] != Role::Candidate {
                continue;
            }
            for j in 0..i {
                if batch.roles[j] == Role::Candidate {
                    m.forbid(i, j);
                }
            }
        }
        Ok(m)
    }
}

fn build_train_units(
    cfg: &TrainConfig,
    tables: &EmbeddingTables,
    sequences: &[UserSequence],
) -> Result<Vec<Unit>, TrainError> {
    let mut units = Vec::new();
    for seq in sequences {
        let seq = cap_front(seq, cfg.max_seq);
        if seq.is_empty() {
            continue;
        }
        match cfg.paradigm {
            Paradigm::DFGR => {
                let (real, fake) = build_dfgr(&seq, tables);
                let mask = dual_mask(&real, cfg.session_mask)?;
                units.push(Unit::Dual { real, fake, mask });
            }
            Paradigm::MetaGR => {
                let batch = build_metagr(&seq, tables);
                let mask = metagr_mask(&batch, cfg.metagr_session_mask)?;
                units.push(Unit::Single { batch, mask });
            }
            Paradigm::SFGR => {
                for batch in build_sfgr_samples(&seq, tables)? {
                    let mask = sfgr_mask(&batch, cfg.session_mask)?;
                    units.push(Unit::Single { batch, mask });
                }
            }
        }
    }
    units.retain(|u| u.labeled() > 0);
    if units.is_empty() {
        return Err(TrainError::NoTrainingData);
    }
    Ok(units)
}

fn build_eval_units(
    cfg: &TrainConfig,
    tables: &EmbeddingTables,
    sequences: &[UserSequence],
    split: u64,
) -> Result<Vec<EvalUnit>, TrainError> {
    let mut units = Vec::new();
    for seq in sequences {
        let seq = cap_front(seq, cfg.max_seq);
        if seq.is_empty() || seq.interactions.iter().all(|it| it.timestamp <= split) {
            continue;
        }
        match cfg.paradigm {
            Paradigm::DFGR => {
                let (real, fake) = build_dfgr(&seq, tables);
                let positions: Vec<usize> = (0..fake.len())
                    .filter(|&i| fake.roles[i] == Role::History && fake.timestamps[i] > split)
                    .collect();
                let mask = dual_mask(&real, cfg.session_mask)?;
                units.push(EvalUnit {
                    unit: Unit::Dual { real, fake, mask },
                    positions,
                    user: seq.user_id,
                });
            }
            Paradigm::MetaGR => {
                let batch = build_metagr(&seq, tables);
                let positions: Vec<usize> = (0..batch.len())
                    .filter(|&i| batch.roles[i] == Role::Item && batch.timestamps[i] > split)
                    .collect();
                let mask = metagr_mask(&batch, cfg.metagr_session_mask)?;
                units.push(EvalUnit {
                    unit: Unit::Single { batch, mask },
                    positions,
                    user: seq.user_id,
                });
            }
            Paradigm::SFGR => {
                for batch in build_sfgr_samples(&seq, tables)? {
                    let positions: Vec<usize> = (0..batch.len())
                        .filter(|&i| {
                            batch.roles[i] == Role::Candidate && batch.timestamps[i] > split
                        })
                        .collect();
                    if positions.is_empty() {
                        continue;
                    }
                    let mask = sfgr_mask(&batch, cfg.session_mask)?;
                    units.push(EvalUnit {
                        unit: Unit::Single { batch, mask },
                        positions,
                        user: seq.user_id,
                    });
                }
            }
        }
    }
    Ok(units)
}

/// Forward one unit and return its mean masked loss plus label count.
fn unit_loss<F: Scalar>(
    g: &mut Graph<F>,
    bound: &BoundEncoder,
    unit: &Unit,
) -> Result<(TensorId, usize), TrainError> {
    let (hidden, labels) = match unit {
        Unit::Dual { real, fake, mask } => {
            let (yf, _) = forward_dfgr(g, bound, real, fake, mask, ForwardOpts::default())?;
            (yf, fake)
        }
        Unit::Single { batch, mask } => (forward_single(g, bound, batch, mask)?, batch),
    };
    let logits = head::score(g, hidden, &bound.head)?;
    let labels_f: Vec<F> = labels.labels.iter().map(|&l| F::from_f64(l)).collect();
    let loss = head::masked_bce(g, logits, &labels_f, &labels.label_mask)?;
    Ok((loss, labels.labeled_count()))
}

fn batch_loss<F: Scalar>(
    g: &mut Graph<F>,
    bound: &BoundEncoder,
    units: &[&Unit],
) -> Result<TensorId, TrainError> {
    let mut parts = Vec::with_capacity(units.len());
    let mut total = 0usize;
    for unit in units {
        let (loss, count) = unit_loss(g, bound, unit)?;
        parts.push((loss, count));
        total += count;
    }
    // weight each per-unit mean by its share of labeled positions
    let mut acc: Option<TensorId> = None;
    for (loss, count) in parts {
        let scaled = g.scale(loss, F::from_f64(count as f64 / total as f64));
        acc = Some(match acc {
            Some(a) => g.add(a, scaled)?,
            None => scaled,
        });
    }
    Ok(acc.expect("at least one unit per batch"))
}

/// Loss of a batch of sequences under the dual-flow paradigm, with analytic
/// gradients in declared parameter order. Used by gradient checks.
pub fn dfgr_loss_and_grads(
    enc: &EncoderParams,
    seqs: &[UserSequence],
) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
    let cfg = TrainConfig {
        paradigm: Paradigm::DFGR,
        ..TrainConfig::default()
    };
    let units = build_train_units(&cfg, &enc.tables, seqs)?;
    let refs: Vec<&Unit> = units.iter().collect();
    let mut g: Graph<f64> = Graph::new();
    let bound = bind(enc, &mut g, true)?;
    let loss = batch_loss(&mut g, &bound, &refs)?;
    g.backward(loss)?;
    let grads = bound
        .param_ids
        .iter()
        .map(|&(_, id)| g.grad(id).expect("trainable leaf has a gradient").to_vec())
        .collect();
    Ok((g.value(loss)[0], grads))
}

/// Same loss, value only (no gradients); the finite-difference side.
pub fn dfgr_loss_value(enc: &EncoderParams, seqs: &[UserSequence]) -> Result<f64, TrainError> {
    let cfg = TrainConfig {
        paradigm: Paradigm::DFGR,
        ..TrainConfig::default()
    };
    let units = build_train_units(&cfg, &enc.tables, seqs)?;
    let refs: Vec<&Unit> = units.iter().collect();
    let mut g: Graph<f64> = Graph::new();
    let bound = bind(enc, &mut g, false)?;
    let loss = batch_loss(&mut g, &bound, &refs)?;
    Ok(g.value(loss)[0])
}

/// Validation metrics: ranking quality plus the mean cross-entropy over the
/// scored positions.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EvalSummary {
    pub auc: Option<f64>,
    pub gauc: Option<f64>,
    pub scored: usize,
    pub mean_bce: f64,
}

fn evaluate(enc: &EncoderParams, units: &[EvalUnit]) -> Result<EvalSummary, TrainError> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut users = Vec::new();
    for eu in units {
        let mut g: Graph<f64> = Graph::new();
        let bound = bind(enc, &mut g, false)?;
        let (hidden, batch) = match &eu.unit {
            Unit::Dual { real, fake, mask } => {
                let (yf, _) =
                    forward_dfgr(&mut g, &bound, real, fake, mask, ForwardOpts::default())?;
                (yf, fake)
            }
            Unit::Single { batch, mask } => (forward_single(&mut g, &bound, batch, mask)?, batch),
        };
        let logits = head::score(&mut g, hidden, &bound.head)?;
        let zs = g.value(logits);
        for &p in &eu.positions {
            scores.push(zs[p]);
            labels.push(batch.labels[p]);
            users.push(eu.user);
        }
    }
    let mut bce = 0.0;
    for (&z, &y) in scores.iter().zip(&labels) {
        bce += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    }
    Ok(EvalSummary {
        auc: auc(&scores, &labels),
        gauc: gauc(&scores, &labels, &users),
        scored: scores.len(),
        mean_bce: if scores.is_empty() {
            0.0
        } else {
            bce / scores.len() as f64
        },
    })
}

/// Run one training job. Deterministic given the seed: identical configs
/// and data produce bit-identical parameters and metrics.
pub fn train(
    cfg: &TrainConfig,
    data: &TrainData,
) -> Result<(EncoderParams, MetricsReport), TrainError> {
    train_with_init(cfg, data, None)
}

/// Training with an optional warm start (continuation from a checkpoint).
/// The optimizer state starts fresh; only the parameters carry over.
pub fn train_with_init(
    cfg: &TrainConfig,
    data: &TrainData,
    init: Option<&EncoderParams>,
) -> Result<(EncoderParams, MetricsReport), TrainError> {
    cfg.validate()?;
    let dataset = &data.dataset;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut enc = match init {
        Some(start) => start.clone(),
        None => {
            let slot_vocabs: Vec<(String, usize)> = dataset
                .slot_names
                .iter()
                .cloned()
                .zip(dataset.slot_vocabs.iter().copied())
                .collect();
            let profile_vocabs: Vec<(String, usize)> = dataset
                .profile_slot_names
                .iter()
                .cloned()
                .zip(dataset.profile_vocabs.iter().copied())
                .collect();
            let tables = EmbeddingTables::zeros(
                cfg.d_model,
                dataset.item_vocab,
                dataset.action_vocab,
                &slot_vocabs,
                &profile_vocabs,
            );
            let dims = Dims::new(cfg.d_model, cfg.heads, cfg.layers)?;
            let mut enc = EncoderParams::new(dims, tables, cfg.residual);
            enc.scale_scores = cfg.scale_scores;
            enc.random_init(&mut rng, 0.02);
            enc
        }
    };

    let (train_sequences, eval_units) = match data.split_ts {
        Some(split) => {
            let (train_part, _) = time_split(dataset, split)?;
            let evals = build_eval_units(cfg, &enc.tables, &dataset.sequences, split)?;
            (train_part.sequences, evals)
        }
        None => (dataset.sequences.clone(), Vec::new()),
    };
    let units = build_train_units(cfg, &enc.tables, &train_sequences)?;

    let mut adam = Adam::new(&enc);
    let mut order: Vec<usize> = (0..units.len()).collect();
    let mut cursor = units.len(); // forces an initial shuffle
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    let mut eval_rows = Vec::new();
    let mut last_eval: (Option<f64>, Option<f64>) = (None, None);

    for step in 0..cfg.steps {
        let mut picked = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(&units[order[cursor]]);
            cursor += 1;
        }

        let mut g: Graph<f64> = Graph::new();
        let bound = bind(&enc, &mut g, true)?;
        let loss = batch_loss(&mut g, &bound, &picked)?;
        let loss_value = g.value(loss)[0];
        if !loss_value.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        g.backward(loss)?;
        let grads: Vec<Vec<f64>> = bound
            .param_ids
            .iter()
            .map(|&(_, id)| g.grad(id).expect("trainable leaf has a gradient").to_vec())
            .collect();
        drop(g);

        let lr = lr_at(step, cfg);
        adam.apply(&mut enc, &grads, lr);
        loss_curve.push(loss_value);

        let done = step + 1;
        if done % cfg.eval_every == 0 && !eval_units.is_empty() {
            let summary = evaluate(&enc, &eval_units)?;
            last_eval = (summary.auc, summary.gauc);
            if cfg.verbose {
                eprintln!(
                    "step {done}: lr {lr:.2e} loss {loss_value:.4} auc {:?} gauc {:?} ({} scored)",
                    summary.auc, summary.gauc, summary.scored
                );
            }
            eval_rows.push(EvalRow {
                step: done,
                lr,
                loss: loss_value,
                auc: summary.auc,
                gauc: summary.gauc,
            });
        }
    }

    // final metrics: reuse the last eval if it landed on the final step
    let (final_auc, final_gauc) = if eval_rows.last().is_some_and(|r| r.step == cfg.steps) {
        last_eval
    } else if !eval_units.is_empty() {
        let summary = evaluate(&enc, &eval_units)?;
        (summary.auc, summary.gauc)
    } else {
        (None, None)
    };

    let report = MetricsReport {
        auc: final_auc,
        gauc: final_gauc,
        loss_curve,
        eval_rows,
        eval_timestamp: data.split_ts.unwrap_or(0),
    };
    Ok((enc, report))
}

/// Score validation positions with an already-trained encoder (the
/// evaluation half of [`train`], reusable from the CLI).
pub fn evaluate_encoder(
    cfg: &TrainConfig,
    enc: &EncoderParams,
    dataset: &Dataset,
    split: u64,
) -> Result<EvalSummary, TrainError> {
    let units = build_eval_units(cfg, &enc.tables, &dataset.sequences, split)?;
    evaluate(enc, &units)
}
