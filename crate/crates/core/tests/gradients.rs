mod common;

use std::time::Instant;

use common::grad::{gradient_suite, TRIALS};

#[test]
fn every_operation_matches_central_differences() {
    let start = Instant::now();
    let reports = gradient_suite(20);
    let elapsed = start.elapsed().as_secs_f64();
    for r in &reports {
        println!(
            "{:<24} trials {:>2} entries {:>5} skipped {:>3} max rel {:.2e} fwd {:.2e}",
            r.op, r.trials, r.entries, r.skipped, r.max_rel, r.max_forward
        );
    }
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).map(|r| r.op).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
    assert!(reports.iter().all(|r| r.trials >= TRIALS));
    assert!(elapsed < 60.0, "suite took {elapsed:.1}s");
}

#[test]
fn suite_is_seed_independent() {
    for seed in [1, 2] {
        let bad: Vec<_> = gradient_suite(seed).into_iter().filter(|r| !r.passed()).collect();
        assert!(bad.is_empty(), "seed {seed}: {bad:?}");
    }
}
