//! Perturb-and-compare: what may and may not influence the fake-flow output
//! at a position. Same-position action, same-session siblings, and the
//! future must have exactly zero influence; earlier-session actions must
//! have some.
//!
//! ```bash
//! cargo run --example leakage_probe
//! ```

use dfgr::hstu::{forward_dfgr_dense, random_world, ForwardOpts};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (enc, seq) = random_world(&mut rng, Some(2));
    let n = seq.len();
    let d = enc.dims.d_model;
    let t = n - 1; // probe the last interaction
    let session_of_t = seq.interactions[t].session_id;
    println!("world: n = {n}, D = {d}, probing position {t} (session {session_of_t})");

    let base = forward_dfgr_dense(&enc, &seq, ForwardOpts::default()).unwrap();
    let at = |dense: &[f64]| dense[(t + 1) * d..(t + 2) * d].to_vec();
    let base_t = at(&base);

    let probe = |label: &str, mutate: &dyn Fn(&mut dfgr::sequence::UserSequence)| {
        let mut pert = seq.clone();
        mutate(&mut pert);
        let out = forward_dfgr_dense(&enc, &pert, ForwardOpts::default()).unwrap();
        let diff = max_diff(&at(&out), &base_t);
        println!("  {label}: max |change| at {t} = {diff:.3e}");
        diff
    };

    let diff = probe("flip the action at the probed position", &|s| {
        s.interactions[t].action = 1 - s.interactions[t].action;
    });
    assert_eq!(diff, 0.0);

    if t > 0 && seq.interactions[t - 1].session_id == session_of_t {
        let diff = probe("rewrite a same-session sibling's item and action", &|s| {
            s.interactions[t - 1].item_id = (s.interactions[t - 1].item_id + 9) % 48;
            s.interactions[t - 1].action = 1 - s.interactions[t - 1].action;
        });
        assert_eq!(diff, 0.0);
    }

    if let Some(prev_session_end) = seq
        .interactions
        .iter()
        .rposition(|it| it.session_id != session_of_t)
    {
        let diff = probe("flip an earlier-session action", &|s| {
            s.interactions[prev_session_end].action = 1 - s.interactions[prev_session_end].action;
        });
        assert!(diff > 1e-8, "earlier sessions must influence the output");
    }

    println!("zero influence where the paradigm forbids it, real influence where it requires it");
}
