//! Runs the acceptance criteria, prints one PASS/FAIL line each and fails if
//! any criterion fails. Tolerances are pinned here so a change to the
//! library constants cannot loosen them silently.

use ftdc::acceptance::{self, CriterionResult};
use ftdc::batch::Execution;

const SEED: u64 = 0;

#[test]
fn tolerances_are_pinned() {
    assert_eq!(acceptance::EXPECTED_M_BAR, 11);
    assert_eq!(acceptance::EXPECTED_RHO, [4, 2, 6, 2]);
    assert_eq!(acceptance::EXPECTED_CHI, [4, 2, 2, 6]);
    assert_eq!(acceptance::EIGEN_MATCH_TOL, 1e-6);
    assert_eq!(acceptance::REMARK_EIGEN_TOL, 5e-4);
    assert_eq!(acceptance::AVERAGE_REL_TOL, 1e-8);
    assert_eq!(acceptance::RECURSION_TOL, 1e-10);
    assert_eq!(acceptance::AGREEMENT_REL_TOL, 1e-8);
    assert_eq!(acceptance::RATE_BOUND, 0.27 + 0.05);
    assert_eq!((acceptance::RATE_FIT_FROM, acceptance::RATE_FIT_TO), (5, 60));
    assert_eq!((acceptance::MIN_RANDOM_GRAPHS, acceptance::MIN_RANDOM_PLACEMENTS), (100, 100));
    assert_eq!(acceptance::RANDOM_GRAPH_TRIALS, 1000);
    assert_eq!(acceptance::RANDOM_PLACEMENT_TRIALS, 1000);
    assert_eq!(acceptance::TAUS, [0.1, 1.0, 10.0]);
    assert_eq!(acceptance::TIME_REL_TOL, 1e-12);
}

#[test]
fn acceptance_suite() {
    let results: Vec<CriterionResult> = acceptance::run_suite(SEED, Execution::Parallel);
    assert_eq!(results.len(), 11);
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.id.as_str()).collect();
    let passed = results.len() - failed.len();
    println!("{passed}/{} criteria passed", results.len());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
