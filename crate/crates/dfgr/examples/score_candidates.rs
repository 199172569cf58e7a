//! The serving path: train briefly, checkpoint, reload, and score a
//! candidate set against one user's history in microbatches. Candidates in
//! one microbatch share position and timestamp and cannot see each other,
//! so the scores are independent of their order.
//!
//! ```bash
//! cargo run --example score_candidates
//! ```

use dfgr::checkpoint;
use dfgr::datagen::{generate, GeneratorSpec};
use dfgr::graph::{sigmoid, Graph};
use dfgr::head;
use dfgr::hstu::{bind, forward_single};
use dfgr::masking::candidate_block_mask;
use dfgr::sequence::{build_inference, CandidateItem, Role};
use dfgr::trainer::{train, Paradigm, TrainConfig, TrainData};

fn main() {
    let spec = GeneratorSpec {
        num_users: 60,
        num_items: 100,
        sessions_per_user: 5.0,
        session_len: 6.0,
        seed: 31,
        ..GeneratorSpec::default()
    };
    let dataset = generate(&spec);
    let cfg = TrainConfig {
        paradigm: Paradigm::DFGR,
        steps: 300,
        eval_every: 300,
        d_model: 8,
        layers: 1,
        ..TrainConfig::default()
    };
    let (enc, _) = train(
        &cfg,
        &TrainData {
            dataset: dataset.clone(),
            split_ts: None,
        },
    )
    .unwrap();

    // checkpoint round trip, as the serving side would load it
    let dir = std::env::temp_dir().join("dfgr_example_scoring");
    std::fs::create_dir_all(&dir).unwrap();
    let ckpt = dir.join("model.ckpt");
    checkpoint::save(&ckpt, &enc).unwrap();
    let enc = checkpoint::load(&ckpt).unwrap();
    println!("checkpoint written and reloaded from {}", ckpt.display());

    let user = &dataset.sequences[0];
    let candidates: Vec<CandidateItem> = (0..5)
        .map(|i| CandidateItem {
            item_id: 10 + i * 7,
            slots: vec![i % 4],
        })
        .collect();

    let m = 2;
    let batches = build_inference(user, &candidates, &enc.tables, m).unwrap();
    println!(
        "user {} with {} interactions; {} candidates in {} microbatches of up to {m}\n",
        user.user_id,
        user.len(),
        candidates.len(),
        batches.len()
    );

    let mut scores = Vec::new();
    for batch in &batches {
        let mask = candidate_block_mask(&batch.roles, &batch.session_ids).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let bound = bind(&enc, &mut g, false).unwrap();
        let hidden = forward_single(&mut g, &bound, batch, &mask).unwrap();
        let logits = head::score(&mut g, hidden, &bound.head).unwrap();
        for i in 0..batch.len() {
            if batch.roles[i] == Role::Candidate {
                scores.push(sigmoid(g.value(logits)[i]));
            }
        }
    }
    for (cand, score) in candidates.iter().zip(&scores) {
        println!(
            "  item {:3} (category {}): p(click) = {score:.4}",
            cand.item_id, cand.slots[0]
        );
    }
}
