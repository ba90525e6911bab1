//! Gradient correctness against the finite-difference oracle.

mod common;

use common::random_case;

#[test]
fn two_layer_mlp_matches_finite_differences() {
    // Family 0 of the generator is exactly a 2-layer MLP with CE loss.
    let case = random_case(0);
    assert!(case.name.starts_with("mlp_ce"), "{}", case.name);
    case.check(1e-3, 1e-5).unwrap();
}

#[test]
fn random_graphs_match_finite_differences() {
    for seed in 0..20u64 {
        random_case(seed).check(1e-3, 1e-5).unwrap();
    }
}
