mod support;

use support::{composed_denoiser_error, op_gradient_error, GRAD_TOLERANCE, GRAPH_OPS};

#[test]
fn every_graph_op_matches_finite_differences() {
    for (k, op) in GRAPH_OPS.iter().enumerate() {
        let err = op_gradient_error(op, 20, 100 + k as u64).unwrap();
        assert!(err < GRAD_TOLERANCE, "{op}: relative error {err:.3e}");
    }
}

#[test]
fn composed_denoiser_matches_finite_differences() {
    for seed in 0..20 {
        let err = composed_denoiser_error(seed).unwrap();
        assert!(err < GRAD_TOLERANCE, "seed {seed}: relative error {err:.3e}");
    }
}
