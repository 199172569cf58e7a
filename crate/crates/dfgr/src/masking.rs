//! Attention permission matrices: causal, session-aware cross-triangle, and
//! candidate-block variants. The same mask drives both the real and the fake
//! flow.
//!
//! Masks multiply attention pre-activations elementwise (the attention
//! nonlinearity is pointwise, not a softmax), so a disallowed entry
//! contributes an exact `0.0` to the weighted value sum.

use crate::sequence::{Role, NO_SESSION};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("session {session} reappears at position {position} after being interrupted")]
    NonContiguousSessions { session: u64, position: usize },
    #[error("candidate positions must form a suffix; found non-candidate at {position}")]
    CandidatesNotSuffix { position: usize },
    #[error("roles and session ids disagree in length: {roles} vs {sessions}")]
    LengthMismatch { roles: usize, sessions: usize },
}

/// Binary T×T permission matrix; `allow(i, j)` means query `i` may attend
/// key `j`. Never allows the future; always allows the diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    t: usize,
    allow: Vec<bool>,
}

impl MaskMatrix {
    fn full_causal(t: usize) -> Self {
        let mut allow = vec![false; t * t];
        for i in 0..t {
            for j in 0..=i {
                allow[i * t + j] = true;
            }
        }
        MaskMatrix { t, allow }
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn allow(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.t + j]
    }

    pub(crate) fn forbid(&mut self, i: usize, j: usize) {
        self.allow[i * self.t + j] = false;
    }

    /// 0/1 multiplier matrix, row-major.
    pub fn scalars<F: crate::graph::Scalar>(&self) -> Vec<F> {
        self.allow
            .iter()
            .map(|&a| if a { F::ONE } else { F::ZERO })
            .collect()
    }

    /// Like [`MaskMatrix::scalars`] with the diagonal removed; the cross-flow
    /// attention term uses this so the current position is excluded.
    pub fn scalars_off_diagonal<F: crate::graph::Scalar>(&self) -> Vec<F> {
        let mut s = self.scalars::<F>();
        for i in 0..self.t {
            s[i * self.t + i] = F::ZERO;
        }
        s
    }

    /// 0/1 grid, one row per line, for golden-file comparisons.
    pub fn render(&self) -> String {
        let mut out = String::with_capacity(self.t * (self.t + 1));
        for i in 0..self.t {
            for j in 0..self.t {
                out.push(if self.allow(i, j) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    pub fn row_allow_count(&self, i: usize) -> usize {
        (0..self.t).filter(|&j| self.allow(i, j)).count()
    }
}

/// Plain lower-triangular mask: `allow(i, j) = j <= i`.
pub fn causal_mask(t: usize) -> MaskMatrix {
    assert!(t >= 1, "mask needs at least one position");
    MaskMatrix::full_causal(t)
}

fn check_contiguous(session_ids: &[u64]) -> Result<(), MaskError> {
    let mut seen = Vec::new();
    for (i, &s) in session_ids.iter().enumerate() {
        if s == NO_SESSION {
            continue;
        }
        match seen.last() {
            Some(&last) if last == s => {}
            _ => {
                if seen.contains(&s) {
                    return Err(MaskError::NonContiguousSessions {
                        session: s,
                        position: i,
                    });
                }
                seen.push(s);
            }
        }
    }
    Ok(())
}

/// Session-aware cross-triangle mask: causal, with attention between
/// distinct positions of the same session removed. The diagonal stays
/// allowed; `NO_SESSION` positions follow the pure causal rule.
pub fn session_mask(session_ids: &[u64]) -> Result<MaskMatrix, MaskError> {
    check_contiguous(session_ids)?;
    let t = session_ids.len();
    let mut mask = MaskMatrix::full_causal(t);
    for i in 0..t {
        if session_ids[i] == NO_SESSION {
            continue;
        }
        for j in 0..i {
            if session_ids[j] == session_ids[i] {
                mask.forbid(i, j);
            }
        }
    }
    Ok(mask)
}

/// Session mask for interleaved item/action sequences: tokens of the same
/// interaction stay mutually visible (an action token must still see its own
/// item), but distinct interactions within a session are blinded.
pub fn interleaved_session_mask(
    session_ids: &[u64],
    interaction_ids: &[u32],
) -> Result<MaskMatrix, MaskError> {
    if session_ids.len() != interaction_ids.len() {
        return Err(MaskError::LengthMismatch {
            roles: interaction_ids.len(),
            sessions: session_ids.len(),
        });
    }
    check_contiguous(session_ids)?;
    let t = session_ids.len();
    let mut mask = MaskMatrix::full_causal(t);
    for i in 0..t {
        if session_ids[i] == NO_SESSION {
            continue;
        }
        for j in 0..i {
            if session_ids[j] == session_ids[i] && interaction_ids[j] != interaction_ids[i] {
                mask.forbid(i, j);
            }
        }
    }
    Ok(mask)
}

/// Session mask over the history plus candidate blinding: candidate rows
/// attend all history and themselves, never each other.
pub fn candidate_block_mask(roles: &[Role], session_ids: &[u64]) -> Result<MaskMatrix, MaskError> {
    if roles.len() != session_ids.len() {
        return Err(MaskError::LengthMismatch {
            roles: roles.len(),
            sessions: session_ids.len(),
        });
    }
    let first_candidate = roles
        .iter()
        .position(|&r| r == Role::Candidate)
        .unwrap_or(roles.len());
    if let Some(off) = roles[first_candidate..]
        .iter()
        .position(|&r| r != Role::Candidate)
    {
        return Err(MaskError::CandidatesNotSuffix {
            position: first_candidate + off,
        });
    }
    let mut mask = session_mask(session_ids)?;
    let t = roles.len();
    for i in first_candidate..t {
        for j in 0..i {
            if j >= first_candidate {
                mask.forbid(i, j);
            } else if !mask.allow(i, j) {
                // candidates attend all history regardless of session overlap
                mask.allow[i * t + j] = true;
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_shapes() {
        let m = causal_mask(1);
        assert!(m.allow(0, 0));

        let m = causal_mask(3);
        let trues: usize = (0..3).map(|i| m.row_allow_count(i)).sum();
        assert_eq!(trues, 6);
        for i in 0..3 {
            assert_eq!(m.row_allow_count(i), i + 1);
        }
    }

    #[test]
    fn session_mask_distinct_sessions_is_causal() {
        let ids: Vec<u64> = (0..5).collect();
        assert_eq!(session_mask(&ids).unwrap(), causal_mask(5));
    }

    #[test]
    fn session_mask_cross_triangle_example() {
        // length 9 split into sessions of 4, 3, 2
        let ids = [0, 0, 0, 0, 1, 1, 1, 2, 2];
        let m = session_mask(&ids).unwrap();
        let row5: Vec<usize> = (0..9).filter(|&j| m.allow(5, j)).collect();
        assert_eq!(row5, vec![0, 1, 2, 3, 5]);
        assert!(!m.allow(5, 4), "same-session key must be blind");
        // first row of each session sees the full earlier prefix
        let row4: Vec<usize> = (0..9).filter(|&j| m.allow(4, j)).collect();
        assert_eq!(row4, vec![0, 1, 2, 3, 4]);
        let row8: Vec<usize> = (0..9).filter(|&j| m.allow(8, j)).collect();
        assert_eq!(row8, vec![0, 1, 2, 3, 4, 5, 6, 8]);
    }

    #[test]
    fn session_mask_single_session_keeps_only_diagonal() {
        let ids = [3u64; 6];
        let m = session_mask(&ids).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(m.allow(i, j), i == j);
            }
        }
    }

    #[test]
    fn session_mask_user_token_follows_causal() {
        let ids = [NO_SESSION, 0, 0];
        let m = session_mask(&ids).unwrap();
        assert!(m.allow(1, 0) && m.allow(2, 0));
        assert!(!m.allow(2, 1));
    }

    #[test]
    fn session_mask_rejects_interleaved_blocks() {
        assert!(matches!(
            session_mask(&[0, 1, 0]),
            Err(MaskError::NonContiguousSessions {
                session: 0,
                position: 2
            })
        ));
    }

    #[test]
    fn session_mask_never_adds_permissions() {
        let ids = [NO_SESSION, 0, 0, 1, 1, 1, 2];
        let m = session_mask(&ids).unwrap();
        let c = causal_mask(ids.len());
        for i in 0..ids.len() {
            for j in 0..ids.len() {
                assert!(!m.allow(i, j) || c.allow(i, j));
            }
        }
    }

    #[test]
    fn candidate_block_rules() {
        use Role::*;

        // no candidates: equals session mask
        let roles = [User, History, History];
        let ids = [NO_SESSION, 0, 0];
        assert_eq!(
            candidate_block_mask(&roles, &ids).unwrap(),
            session_mask(&ids).unwrap()
        );

        // 3 candidates after 4 history tokens under distinct history sessions
        let roles = [
            User, History, History, History, Candidate, Candidate, Candidate,
        ];
        let ids = [NO_SESSION, 0, 1, 2, 9, 9, 9];
        let m = candidate_block_mask(&roles, &ids).unwrap();
        for i in 4..7 {
            let allowed: Vec<usize> = (0..7).filter(|&j| m.allow(i, j)).collect();
            assert_eq!(allowed, vec![0, 1, 2, 3, i]);
        }

        // non-suffix candidates rejected
        let roles = [User, Candidate, History];
        assert!(matches!(
            candidate_block_mask(&roles, &[NO_SESSION, 5, 0]),
            Err(MaskError::CandidatesNotSuffix { position: 2 })
        ));
    }

    #[test]
    fn candidate_rows_are_structurally_interchangeable() {
        use Role::*;
        let roles = [User, History, History, Candidate, Candidate, Candidate];
        let ids = [NO_SESSION, 0, 0, 7, 7, 7];
        let m = candidate_block_mask(&roles, &ids).unwrap();
        // each candidate row allows exactly history + self; swapping any two
        // candidates maps each row onto the other's pattern
        for (a, b) in [(3, 4), (3, 5), (4, 5)] {
            for j in 0..3 {
                assert_eq!(m.allow(a, j), m.allow(b, j));
            }
            assert!(m.allow(a, a) && m.allow(b, b));
            assert!(!m.allow(a, b) && !m.allow(b, a));
        }
    }

    #[test]
    fn interleaved_mask_keeps_pairs_visible() {
        // (u, v1, a1, v2, a2) all in one session
        let ids = [NO_SESSION, 5, 5, 5, 5];
        let pairs = [u32::MAX, 0, 0, 1, 1];
        let m = interleaved_session_mask(&ids, &pairs).unwrap();
        assert!(m.allow(2, 1), "action token must see its own item");
        assert!(
            !m.allow(3, 1) && !m.allow(3, 2),
            "sibling interaction blinded"
        );
        assert!(m.allow(4, 3));
        assert!(m.allow(3, 0), "user token always visible");
    }

    #[test]
    fn render_golden_grid() {
        let ids = [NO_SESSION, 0, 0, 1];
        let m = session_mask(&ids).unwrap();
        assert_eq!(m.render(), "1000\n1100\n1010\n1111\n");
    }
}
