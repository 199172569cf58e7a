//! The attention permission matrices: plain causal, the session-aware
//! cross-triangle mask (here for 9 items in sessions of 4, 3, 2), and the
//! candidate-block mask used when scoring a microbatch.
//!
//! ```bash
//! cargo run --example session_masks
//! ```

use dfgr::masking::{candidate_block_mask, causal_mask, session_mask};
use dfgr::sequence::Role;

fn main() {
    println!("causal, T = 5:\n{}", causal_mask(5).render());

    let ids = [0, 0, 0, 0, 1, 1, 1, 2, 2];
    println!("session-aware cross triangle, sessions (4, 3, 2):");
    let m = session_mask(&ids).unwrap();
    print!("{}", m.render());
    println!(
        "row 5 may attend: {:?} (4 is a same-session sibling)\n",
        (0..9).filter(|&j| m.allow(5, j)).collect::<Vec<_>>()
    );

    // 4 history tokens from two sessions, then 3 candidates
    let roles = [
        Role::User,
        Role::History,
        Role::History,
        Role::History,
        Role::Candidate,
        Role::Candidate,
        Role::Candidate,
    ];
    let ids = [dfgr::sequence::NO_SESSION, 0, 0, 1, 9, 9, 9];
    println!("candidate block (3 candidates after history):");
    let m = candidate_block_mask(&roles, &ids).unwrap();
    print!("{}", m.render());
    println!("candidates see all history and themselves, never each other");
}
