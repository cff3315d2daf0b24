//! Runs the ten acceptance criteria at their stated tolerances and prints
//! one PASS/FAIL line each (`cargo test --test acceptance -- --nocapture`).
//!
//! Criteria 2 and 4 contain sub-claims that are false as stated; their
//! analysis is in the decisions ledger. The suite asserts that exactly
//! those two fail, so any other regression, or either of them starting
//! to pass, is reported.

use qsieve::acceptance::{run_criterion, DEFAULT_SEED};

const KNOWN_RED: [usize; 2] = [2, 4];

#[test]
fn acceptance_criteria() {
    let mut results = Vec::new();
    for id in 1..=10 {
        let r = run_criterion(id, DEFAULT_SEED).expect("criterion id");
        println!("{}", r.line());
        results.push(r);
    }
    assert_eq!(results.len(), 10);
    let failed: Vec<usize> = results.iter().filter(|r| !r.passed).map(|r| r.id).collect();
    assert_eq!(failed, KNOWN_RED, "unexpected set of failing criteria");
}
