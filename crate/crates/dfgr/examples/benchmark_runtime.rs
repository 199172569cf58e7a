//! Wall-clock companion to the analytic cost model: time real scoring
//! forward passes for the interleaved layout against the single/dual-flow
//! layout.
//!
//! ```bash
//! cargo run --example benchmark_runtime
//! ```

use dfgr::flops::{measure_runtime, measure_runtime_f32, CostModel};
use dfgr::trainer::Paradigm;

fn main() {
    let model = CostModel::new(1, 512, 32, 32, 1, 2).unwrap();
    println!("N = 512, K = 32, D = 32, L = 2, 10 trials each\n");

    let metagr = measure_runtime(&model, Paradigm::MetaGR, 10).unwrap();
    let dfgr = measure_runtime(&model, Paradigm::DFGR, 10).unwrap();

    for r in [&metagr, &dfgr] {
        println!(
            "{:>7}: median {:.4}s over {} trials (analytic {:.3e} flops)",
            r.paradigm.to_string(),
            r.median_seconds.unwrap(),
            r.trials,
            r.analytic_inference_flops,
        );
    }
    let measured = dfgr.median_seconds.unwrap() / metagr.median_seconds.unwrap();
    println!(
        "\nmeasured ratio {measured:.3} vs analytic {:.3} (constant factors loosen the gap)",
        dfgr.analytic_infer_ratio_vs_metagr
    );

    // the 32-bit speed mode, benchmarking only
    let dfgr32 = measure_runtime_f32(&model, Paradigm::DFGR, 10).unwrap();
    println!(
        "single-precision dual flow: median {:.4}s ({:.2}x the 64-bit pass)",
        dfgr32.median_seconds.unwrap(),
        dfgr32.median_seconds.unwrap() / dfgr.median_seconds.unwrap()
    );
}
