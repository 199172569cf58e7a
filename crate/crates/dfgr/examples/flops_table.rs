//! Analytic training/inference cost of the three paradigms and their ratios
//! against the interleaved baseline, over a geometric sweep of sequence
//! lengths.
//!
//! ```bash
//! cargo run --example flops_table
//! ```

use dfgr::flops::{default_grid, grid_csv, paradigm_flops, CostModel, LAYER_FLOPS_FORMULA};
use dfgr::trainer::Paradigm;

fn main() {
    println!("per-layer cost: {LAYER_FLOPS_FORMULA}\n");

    println!(
        "{:>7} {:>12} {:>12} {:>12} {:>10} {:>10}",
        "N", "metagr", "sfgr", "dfgr", "dfgr/train", "dfgr/infer"
    );
    for n in [512usize, 1024, 2048, 4096, 8192, 16384] {
        let m = CostModel::new(1, n, 32, 64, 1, 1).unwrap();
        let r = paradigm_flops(&m);
        println!(
            "{:>7} {:>12.3e} {:>12.3e} {:>12.3e} {:>10.4} {:>10.4}",
            n,
            r.metagr.training_flops,
            r.sfgr.training_flops,
            r.dfgr.training_flops,
            r.train_ratio_vs_metagr(Paradigm::DFGR),
            r.infer_ratio_vs_metagr(Paradigm::DFGR),
        );
    }
    println!("\ntraining ratio tends to 1/2, inference ratio to 1/4");

    let m = CostModel::new(1, 8192, 32, 32, 1, 1).unwrap();
    let r = paradigm_flops(&m);
    let ratio = r.train_ratio_vs_metagr(Paradigm::SFGR);
    println!(
        "session-split training at N=8192, K=32: {ratio:.2}x the interleaved cost \
         (N/(12K) = {:.2})",
        8192.0 / (12.0 * 32.0)
    );

    println!("\nfull CSV grid:\n{}", grid_csv(&default_grid()));
}
