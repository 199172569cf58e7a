//! The crate's central equivalence check: for every labeled position, the
//! dual-flow fake output must equal an independently built single-flow pass
//! over `real prefix + fake target`. Also demonstrates that a deliberately
//! corrupted cross term is caught.
//!
//! ```bash
//! cargo run --example check_oracle
//! ```

use dfgr::hstu::{oracle_sweep, ForwardOpts};

fn main() {
    let report = oracle_sweep(40, 1e-10, 11, ForwardOpts::default(), None).unwrap();
    println!(
        "clean sweep: {} configs, {} positions, max |diff| {:.3e} (tolerance {:.0e}) -> {}",
        report.configs,
        report.positions_checked,
        report.max_abs_diff,
        report.tolerance,
        if report.passed() { "PASS" } else { "FAIL" }
    );

    let corrupted = oracle_sweep(
        40,
        1e-10,
        11,
        ForwardOpts {
            fault_keep_cross_diag: true,
        },
        None,
    )
    .unwrap();
    match corrupted.first_failure {
        Some(f) => println!(
            "injected fault (cross term keeps its diagonal): caught at config {} position {} \
             with |diff| {:.3e}",
            f.config, f.position, f.diff
        ),
        None => println!("injected fault went undetected - this should never happen"),
    }
}
