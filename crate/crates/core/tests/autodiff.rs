//! Reverse-mode gradients against central differences, one check per op
//! and per argument, on ten seeded inputs each.

mod support;

use dcr_core::autodiff::{finite_diff_check, Graph};
use dcr_core::tensor::Tensor;
use proptest::prelude::*;
use support::{uniform, H, TOL};

fn assert_within_tolerance(cases: Vec<(String, f64)>) {
    for (name, err) in cases {
        assert!(err <= TOL, "{name}: relative error {err:.3e}");
    }
}

#[test]
fn elementwise_ops() {
    assert_within_tolerance(support::elementwise_ops());
}

#[test]
fn add_row_both_arguments() {
    assert_within_tolerance(support::add_row_both_arguments());
}

#[test]
fn matmul_and_transpose() {
    assert_within_tolerance(support::matmul_and_transpose());
}

#[test]
fn shape_ops() {
    assert_within_tolerance(support::shape_ops());
}

#[test]
fn normalization_and_softmax() {
    assert_within_tolerance(support::normalization_and_softmax());
}

#[test]
fn reductions_and_losses() {
    assert_within_tolerance(support::reductions_and_losses());
}

#[test]
fn composed_micro_graph() {
    assert_within_tolerance(support::composed_micro_graph());
}

#[test]
fn full_model_loss() {
    assert_within_tolerance(support::full_model_loss());
}

#[test]
fn detached_values_carry_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(uniform(&[2, 3], 0, 1));
    let d = g.detach(x);
    let y = g.add(x, d).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    assert!(g.grad(d).is_none());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        data in prop::collection::vec(-50.0f64..50.0, 12),
    ) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3, 4], data).unwrap());
        let p = g.softmax_rows(x).unwrap();
        for row in g.data(p).chunks_exact(4) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(
        data in prop::collection::vec(-10.0f64..10.0, 8),
    ) {
        let spread = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - data.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-2);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 8], data).unwrap());
        let gamma = g.constant(Tensor::full(&[8], 1.0));
        let beta = g.constant(Tensor::zeros(&[8]));
        let y = g.layer_norm(x, gamma, beta, 0.0).unwrap();
        let v = g.data(y);
        let mean = v.iter().sum::<f64>() / 8.0;
        let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 8.0;
        prop_assert!(mean.abs() < 1e-12);
        prop_assert!((var - 1.0).abs() < 1e-10);
    }

    #[test]
    fn sum_of_squares_gradient_is_exact(
        data in prop::collection::vec(-2.0f64..2.0, 1..8),
    ) {
        prop_assume!(data.iter().all(|v| v.abs() > 0.05));
        let n = data.len();
        let x = Tensor::new(&[n], data).unwrap();
        let err = finite_diff_check(
            |g, x| {
                let row = g.reshape(x, &[1, n])?;
                let col = g.reshape(x, &[n, 1])?;
                let p = g.matmul(row, col)?;
                g.sum(p)
            },
            &x,
            H,
        )
        .unwrap();
        prop_assert!(err <= 1e-8);
    }
}
