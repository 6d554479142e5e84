mod common;

use common::{gradient_instance, GRADIENT_SUITES};

fn suite(kind: &str) {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let err = gradient_instance(kind, 1000 + seed);
        assert!(err < 1e-3, "{kind} instance {seed}: relative error {err:.3e}");
        worst = worst.max(err);
    }
    println!("{kind}: worst relative error {worst:.2e} over 20 instances");
}

#[test]
fn a2v_gradient_matches_finite_differences() {
    suite("a2v");
}

#[test]
fn v2a_gradient_matches_finite_differences() {
    suite("v2a");
}

#[test]
fn mask_bce_gradient_matches_finite_differences() {
    suite("mask_bce");
}

#[test]
fn fuse_stage_gradient_matches_finite_differences() {
    suite("fuse_stage");
}

#[test]
fn decode_gradient_matches_finite_differences() {
    suite("decode");
}

#[test]
fn suites_cover_every_named_gradient() {
    assert_eq!(GRADIENT_SUITES.len(), 5);
}
