//! End-to-end dual-flow training on synthetic data: generate a world with a
//! known Bayes AUC ceiling, split by time, train, and report validation
//! AUC / G-AUC against that ceiling.
//!
//! ```bash
//! cargo run --example train_dfgr
//! ```

use dfgr::datagen::{bayes_auc, generate, timestamp_quantile, GeneratorSpec};
use dfgr::trainer::{train, Paradigm, TrainConfig, TrainData};

fn main() {
    let spec = GeneratorSpec {
        num_users: 250,
        ..GeneratorSpec::default()
    };
    let dataset = generate(&spec);
    let ceiling = bayes_auc(&dataset).expect("generated data retains probabilities");
    let split = timestamp_quantile(&dataset, 0.85);
    println!(
        "dataset: {} users, {} interactions, bayes AUC {:.4}, split at {}",
        dataset.sequences.len(),
        dataset.interaction_count(),
        ceiling,
        split
    );

    let cfg = TrainConfig {
        paradigm: Paradigm::DFGR,
        steps: 1500,
        eval_every: 250,
        verbose: true,
        ..TrainConfig::default()
    };
    let started = std::time::Instant::now();
    let (_, report) = train(
        &cfg,
        &TrainData {
            dataset,
            split_ts: Some(split),
        },
    )
    .expect("training succeeds");
    println!(
        "trained {} steps in {:.1}s: val AUC {:.4} (ceiling {:.4}), G-AUC {:.4}",
        cfg.steps,
        started.elapsed().as_secs_f64(),
        report.auc.unwrap(),
        ceiling,
        report.gauc.unwrap()
    );
}
