//! User behavior logs and the paradigm-specific token sequences built from
//! them: interleaved (MetaGR), per-session single-flow samples (SFGR), and
//! the real/fake dual-flow pair (DFGR).
//!
//! Slot values are positional: every `Interaction` carries its side-slot
//! values in the order declared by the [`EmbeddingTables`] schema, and user
//! profile slots likewise. Row 0 of every table is the out-of-vocabulary
//! row; the action table additionally reserves row 1 for the fake action
//! placeholder.

use thiserror::Error;

/// Session id of tokens that belong to no session (the user profile token).
/// Such positions follow the plain causal attention rule.
pub const NO_SESSION: u64 = u64::MAX;

/// Marker for tokens not backed by an interaction.
pub const NO_INTERACTION: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum SequenceError {
    #[error("user {user}: timestamp decreases at interaction {position}")]
    NonMonotoneTimestamps { user: u64, position: usize },
    #[error("user {user}: session {session} reappears at interaction {position} after being interrupted")]
    InterleavedSessions {
        user: u64,
        session: u64,
        position: usize,
    },
    #[error("user {user}: sequence has no sessions")]
    EmptySequence { user: u64 },
    #[error("microbatch size must be at least 1")]
    InvalidMicrobatch,
}

/// One logged user/item event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub item_id: u64,
    /// Action label; `{0,1}` in CTR mode, small categorical otherwise.
    pub action: u32,
    /// Seconds; non-decreasing within a sequence.
    pub timestamp: u64,
    pub session_id: u64,
    /// Side-slot values in schema order (see [`EmbeddingTables::slot_names`]).
    pub slots: Vec<u64>,
}

impl Interaction {
    /// Binary label used by the CTR loss.
    pub fn label(&self) -> f64 {
        if self.action > 0 {
            1.0
        } else {
            0.0
        }
    }
}

/// Chronological, session-segmented container of one user's interactions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user_id: u64,
    /// Profile slot values in schema order.
    pub profile_slots: Vec<u64>,
    pub interactions: Vec<Interaction>,
}

impl UserSequence {
    /// Validates the container invariants: non-decreasing timestamps and
    /// contiguous, non-interleaved session blocks.
    pub fn new(
        user_id: u64,
        profile_slots: Vec<u64>,
        interactions: Vec<Interaction>,
    ) -> Result<Self, SequenceError> {
        let mut seen = Vec::new();
        for (i, w) in interactions.windows(2).enumerate() {
            if w[1].timestamp < w[0].timestamp {
                return Err(SequenceError::NonMonotoneTimestamps {
                    user: user_id,
                    position: i + 1,
                });
            }
        }
        for (i, it) in interactions.iter().enumerate() {
            match seen.last() {
                Some(&last) if last == it.session_id => {}
                _ => {
                    if seen.contains(&it.session_id) {
                        return Err(SequenceError::InterleavedSessions {
                            user: user_id,
                            session: it.session_id,
                            position: i,
                        });
                    }
                    seen.push(it.session_id);
                }
            }
        }
        Ok(UserSequence {
            user_id,
            profile_slots,
            interactions,
        })
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    /// Index ranges of the session blocks, in order.
    pub fn sessions(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.interactions.len() {
            if i == self.interactions.len()
                || self.interactions[i].session_id != self.interactions[start].session_id
            {
                out.push(start..i);
                start = i;
            }
        }
        out
    }
}

/// One embedding table: `rows × dim`, row-major, row 0 reserved for OOV.
#[derive(Debug, Clone)]
pub struct Table {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Table {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Table {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }
}

/// Row index of the fake-action placeholder in the action table.
pub const FAKE_ACTION_ROW: u32 = 1;

/// One table per categorical slot family. Ids resolve to `1 + id` (or
/// `2 + id` for actions, past the fake row); anything out of range lands on
/// the reserved OOV row 0.
#[derive(Debug, Clone)]
pub struct EmbeddingTables {
    pub dim: usize,
    pub item: Table,
    pub action: Table,
    pub slot_names: Vec<String>,
    pub slots: Vec<Table>,
    pub profile_slot_names: Vec<String>,
    pub profile_slots: Vec<Table>,
}

impl EmbeddingTables {
    pub fn zeros(
        dim: usize,
        item_vocab: usize,
        action_vocab: usize,
        slot_vocabs: &[(String, usize)],
        profile_vocabs: &[(String, usize)],
    ) -> Self {
        EmbeddingTables {
            dim,
            item: Table::zeros(item_vocab + 1, dim),
            action: Table::zeros(action_vocab + 2, dim),
            slot_names: slot_vocabs.iter().map(|(n, _)| n.clone()).collect(),
            slots: slot_vocabs
                .iter()
                .map(|&(_, v)| Table::zeros(v + 1, dim))
                .collect(),
            profile_slot_names: profile_vocabs.iter().map(|(n, _)| n.clone()).collect(),
            profile_slots: profile_vocabs
                .iter()
                .map(|&(_, v)| Table::zeros(v + 1, dim))
                .collect(),
        }
    }

    pub fn item_row(&self, id: u64) -> u32 {
        let r = 1 + id as usize;
        if r < self.item.rows {
            r as u32
        } else {
            0
        }
    }

    pub fn action_row(&self, action: u32) -> u32 {
        let r = 2 + action as usize;
        if r < self.action.rows {
            r as u32
        } else {
            0
        }
    }

    pub fn slot_row(&self, slot: usize, value: u64) -> u32 {
        let r = 1 + value as usize;
        if r < self.slots[slot].rows {
            r as u32
        } else {
            0
        }
    }

    pub fn profile_row(&self, slot: usize, value: u64) -> u32 {
        let r = 1 + value as usize;
        if r < self.profile_slots[slot].rows {
            r as u32
        } else {
            0
        }
    }

    /// Canonical table ordering used by token lookups and checkpointing:
    /// item, action, side slots, profile slots.
    pub fn table_list(&self) -> Vec<&Table> {
        let mut out = vec![&self.item, &self.action];
        out.extend(self.slots.iter());
        out.extend(self.profile_slots.iter());
        out
    }
}

/// Table index within [`EmbeddingTables::table_list`].
pub const TABLE_ITEM: u32 = 0;
pub const TABLE_ACTION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    User,
    History,
    Candidate,
    /// Interleaved paradigm only: item half of an interaction.
    Item,
    /// Interleaved paradigm only: action half of an interaction.
    Action,
}

/// One embedded input sequence plus per-position metadata. The embedded
/// matrix `X[T×D]` is realized lazily from `lookups`, either densely
/// ([`TokenBatch::dense_x`]) or as graph nodes, so gradients can flow back
/// into the tables.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    /// Per position: `(table, row)` pairs summed into the token vector.
    pub lookups: Vec<Vec<(u32, u32)>>,
    pub roles: Vec<Role>,
    pub positions: Vec<usize>,
    pub timestamps: Vec<u64>,
    pub session_ids: Vec<u64>,
    /// Which interaction (index into `UserSequence::interactions`) each token
    /// came from; `NO_INTERACTION` for the user token.
    pub interaction_ids: Vec<u32>,
    /// True where the position participates in the loss.
    pub label_mask: Vec<bool>,
    /// Binary label per position; meaningful only where `label_mask` is true.
    pub labels: Vec<f64>,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.lookups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lookups.is_empty()
    }

    fn with_capacity(t: usize) -> Self {
        TokenBatch {
            lookups: Vec::with_capacity(t),
            roles: Vec::with_capacity(t),
            positions: Vec::with_capacity(t),
            timestamps: Vec::with_capacity(t),
            session_ids: Vec::with_capacity(t),
            interaction_ids: Vec::with_capacity(t),
            label_mask: Vec::with_capacity(t),
            labels: Vec::with_capacity(t),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        lookups: Vec<(u32, u32)>,
        role: Role,
        position: usize,
        timestamp: u64,
        session_id: u64,
        interaction_id: u32,
        labeled: bool,
        label: f64,
    ) {
        self.lookups.push(lookups);
        self.roles.push(role);
        self.positions.push(position);
        self.timestamps.push(timestamp);
        self.session_ids.push(session_id);
        self.interaction_ids.push(interaction_id);
        self.label_mask.push(labeled);
        self.labels.push(label);
    }

    /// Materialize `X[T×D]` without a graph (inspection and tests).
    pub fn dense_x(&self, tables: &EmbeddingTables) -> Vec<f64> {
        let list = tables.table_list();
        let d = tables.dim;
        let mut x = vec![0.0; self.len() * d];
        for (t, refs) in self.lookups.iter().enumerate() {
            for &(ti, row) in refs {
                let src = list[ti as usize].row(row as usize);
                for j in 0..d {
                    x[t * d + j] += src[j];
                }
            }
        }
        x
    }

    pub fn labeled_count(&self) -> usize {
        self.label_mask.iter().filter(|&&m| m).count()
    }
}

fn user_token(seq: &UserSequence, tables: &EmbeddingTables) -> Vec<(u32, u32)> {
    assert!(
        seq.profile_slots.len() <= tables.profile_slots.len(),
        "sequence has {} profile slots, tables declare {}",
        seq.profile_slots.len(),
        tables.profile_slots.len()
    );
    let base = 2 + tables.slots.len() as u32;
    seq.profile_slots
        .iter()
        .enumerate()
        .map(|(s, &v)| (base + s as u32, tables.profile_row(s, v)))
        .collect()
}

fn item_lookups(
    it: &Interaction,
    tables: &EmbeddingTables,
    action_row: Option<u32>,
) -> Vec<(u32, u32)> {
    assert!(
        it.slots.len() <= tables.slots.len(),
        "interaction has {} side slots, tables declare {}",
        it.slots.len(),
        tables.slots.len()
    );
    let mut refs = Vec::with_capacity(2 + it.slots.len());
    refs.push((TABLE_ITEM, tables.item_row(it.item_id)));
    if let Some(row) = action_row {
        refs.push((TABLE_ACTION, row));
    }
    for (s, &v) in it.slots.iter().enumerate() {
        refs.push((2 + s as u32, tables.slot_row(s, v)));
    }
    refs
}

/// Embed one sequence as a single flow: user profile token at position 0,
/// then one token per interaction carrying item, side slots, and either the
/// real action or the fake placeholder. No loss positions are set.
pub fn embed(seq: &UserSequence, tables: &EmbeddingTables, use_real_action: bool) -> TokenBatch {
    let n = seq.len();
    let mut batch = TokenBatch::with_capacity(n + 1);
    let first_ts = seq.interactions.first().map_or(0, |it| it.timestamp);
    batch.push(
        user_token(seq, tables),
        Role::User,
        0,
        first_ts,
        NO_SESSION,
        NO_INTERACTION,
        false,
        0.0,
    );
    for (i, it) in seq.interactions.iter().enumerate() {
        let action_row = if use_real_action {
            tables.action_row(it.action)
        } else {
            FAKE_ACTION_ROW
        };
        batch.push(
            item_lookups(it, tables, Some(action_row)),
            Role::History,
            i + 1,
            it.timestamp,
            it.session_id,
            i as u32,
            false,
            it.label(),
        );
    }
    batch
}

/// Interleaved sample `(u, v1, a1, ..., vn, an)`: one item token and one
/// action token per interaction, `T = 2n + 1`. The loss attaches to item
/// positions (each predicts its own action); action-token outputs never
/// enter the loss.
pub fn build_metagr(seq: &UserSequence, tables: &EmbeddingTables) -> TokenBatch {
    let n = seq.len();
    let mut batch = TokenBatch::with_capacity(2 * n + 1);
    let first_ts = seq.interactions.first().map_or(0, |it| it.timestamp);
    batch.push(
        user_token(seq, tables),
        Role::User,
        0,
        first_ts,
        NO_SESSION,
        NO_INTERACTION,
        false,
        0.0,
    );
    for (i, it) in seq.interactions.iter().enumerate() {
        // Item token carries item + side slots only; the action rides in its
        // own token right after.
        batch.push(
            item_lookups(it, tables, None),
            Role::Item,
            2 * i + 1,
            it.timestamp,
            it.session_id,
            i as u32,
            true,
            it.label(),
        );
        batch.push(
            vec![(TABLE_ACTION, tables.action_row(it.action))],
            Role::Action,
            2 * i + 2,
            it.timestamp,
            it.session_id,
            i as u32,
            false,
            0.0,
        );
    }
    batch
}

/// Per-session single-flow samples: for each session, the prefix (user token
/// plus all earlier interactions with real actions) followed by the session's
/// interactions with the fake action, which alone carry the loss.
/// Positions stay on the global grid so relative biases match the dual-flow
/// layout.
pub fn build_sfgr_samples(
    seq: &UserSequence,
    tables: &EmbeddingTables,
) -> Result<Vec<TokenBatch>, SequenceError> {
    if seq.is_empty() {
        return Err(SequenceError::EmptySequence { user: seq.user_id });
    }
    let sessions = seq.sessions();
    let mut out = Vec::with_capacity(sessions.len());
    let first_ts = seq.interactions[0].timestamp;
    for range in sessions {
        let mut batch = TokenBatch::with_capacity(range.end + 1);
        batch.push(
            user_token(seq, tables),
            Role::User,
            0,
            first_ts,
            NO_SESSION,
            NO_INTERACTION,
            false,
            0.0,
        );
        for (i, it) in seq.interactions[..range.start].iter().enumerate() {
            batch.push(
                item_lookups(it, tables, Some(tables.action_row(it.action))),
                Role::History,
                i + 1,
                it.timestamp,
                it.session_id,
                i as u32,
                false,
                0.0,
            );
        }
        for (off, it) in seq.interactions[range.clone()].iter().enumerate() {
            let i = range.start + off;
            batch.push(
                item_lookups(it, tables, Some(FAKE_ACTION_ROW)),
                Role::Candidate,
                i + 1,
                it.timestamp,
                it.session_id,
                i as u32,
                true,
                it.label(),
            );
        }
        out.push(batch);
    }
    Ok(out)
}

/// Dual-flow pair: both batches share length `n + 1`, positions, timestamps
/// and session ids. The real flow embeds true actions and never enters the
/// loss; the fake flow embeds the placeholder at every interaction and is
/// labeled everywhere.
pub fn build_dfgr(seq: &UserSequence, tables: &EmbeddingTables) -> (TokenBatch, TokenBatch) {
    let real = embed(seq, tables, true);
    let mut fake = embed(seq, tables, false);
    for i in 1..fake.len() {
        fake.label_mask[i] = true;
    }
    (real, fake)
}

/// Candidate item awaiting a score: id plus side-slot values in schema order.
#[derive(Debug, Clone)]
pub struct CandidateItem {
    pub item_id: u64,
    pub slots: Vec<u64>,
}

/// Scoring batches: full history with real actions plus up to `m` candidates
/// per microbatch. Every candidate token shares one position (right after
/// the history), the request timestamp (the last history timestamp), a fresh
/// session id, and the fake action placeholder.
pub fn build_inference(
    seq: &UserSequence,
    candidates: &[CandidateItem],
    tables: &EmbeddingTables,
    m: usize,
) -> Result<Vec<TokenBatch>, SequenceError> {
    if m == 0 {
        return Err(SequenceError::InvalidMicrobatch);
    }
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let n = seq.len();
    let request_ts = seq.interactions.last().map_or(0, |it| it.timestamp);
    let request_session = seq
        .interactions
        .iter()
        .map(|it| it.session_id)
        .max()
        .map_or(0, |s| s + 1);
    let history = embed(seq, tables, true);
    let mut out = Vec::with_capacity(candidates.len().div_ceil(m));
    for chunk in candidates.chunks(m) {
        let mut batch = history.clone();
        for cand in chunk {
            let mut refs = Vec::with_capacity(2 + cand.slots.len());
            refs.push((TABLE_ITEM, tables.item_row(cand.item_id)));
            refs.push((TABLE_ACTION, FAKE_ACTION_ROW));
            for (s, &v) in cand.slots.iter().enumerate() {
                refs.push((2 + s as u32, tables.slot_row(s, v)));
            }
            batch.push(
                refs,
                Role::Candidate,
                n + 1,
                request_ts,
                request_session,
                NO_INTERACTION,
                false,
                0.0,
            );
        }
        out.push(batch);
    }
    Ok(out)
}
