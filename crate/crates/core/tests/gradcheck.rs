//! Central finite-difference oracles for every differentiable operation.

mod common;

use common::gradops::{self, INSTANCES};

#[test]
fn every_op_matches_finite_differences() {
    for check in gradops::all() {
        for seed in 0..INSTANCES {
            let err = (check.run)(seed);
            assert!(
                err < check.tolerance,
                "{} instance {seed}: relative error {err:e} ≥ {:e}",
                check.name,
                check.tolerance
            );
        }
    }
}

#[test]
fn full_size_encoder_gradient_on_sampled_coordinates() {
    for seed in 0..3 {
        let err = gradops::default_encoder(seed);
        assert!(err < 1e-5, "seed {seed}: {err:e}");
    }
}
