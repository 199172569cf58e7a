//! Train the dual-flow and interleaved paradigms on the same synthetic data
//! at matched parameter counts and training flops, and compare validation
//! ranking quality against the Bayes ceiling.
//!
//! ```bash
//! cargo run --example compare_paradigms
//! ```

use dfgr::datagen::{bayes_auc, generate, timestamp_quantile, GeneratorSpec};
use dfgr::flops::{paradigm_flops, CostModel};
use dfgr::trainer::{train, Paradigm, TrainConfig, TrainData};

fn main() {
    let spec = GeneratorSpec {
        num_users: 300,
        ..GeneratorSpec::default()
    };
    let dataset = generate(&spec);
    let ceiling = bayes_auc(&dataset).unwrap();
    let split = timestamp_quantile(&dataset, 0.85);
    println!(
        "{} interactions, bayes ceiling {:.4}\n",
        dataset.interaction_count(),
        ceiling
    );
    let data = TrainData {
        dataset,
        split_ts: Some(split),
    };

    let base = TrainConfig {
        paradigm: Paradigm::DFGR,
        steps: 1200,
        eval_every: 300,
        session_mask: true,
        ..TrainConfig::default()
    };

    // flop-matched step budget for the interleaved arm
    let cm = CostModel::new(1, 50, 9, base.d_model, base.heads, base.layers).unwrap();
    let ratio = paradigm_flops(&cm).train_ratio_vs_metagr(Paradigm::DFGR);

    for (paradigm, steps) in [
        (Paradigm::DFGR, base.steps),
        (
            Paradigm::MetaGR,
            (base.steps as f64 * ratio).round() as usize,
        ),
    ] {
        let cfg = TrainConfig {
            paradigm,
            steps,
            ..base.clone()
        };
        let started = std::time::Instant::now();
        let (_, report) = train(&cfg, &data).unwrap();
        let best = report
            .eval_rows
            .iter()
            .filter_map(|r| r.auc)
            .fold(0.0f64, f64::max);
        println!(
            "{:>7}: {} steps in {:>5.1}s, best val AUC {:.4}, final G-AUC {:.4}",
            paradigm.to_string(),
            steps,
            started.elapsed().as_secs_f64(),
            best,
            report.gauc.unwrap(),
        );
    }
    println!("\n(the two arms spend the same training flops; steps differ by the analytic ratio)");
}
