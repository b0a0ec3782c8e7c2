mod common;

use common::gradcheck::{worst_error, CASES, TOL};
use debias_core::graph::Graph;
use debias_core::tensor::Tensor;

#[test]
fn every_op_matches_finite_differences() {
    let mut failures = Vec::new();
    for (stream, (name, make)) in CASES.iter().enumerate() {
        let worst = worst_error(stream as u64, *make);
        eprintln!("{name:>24}: worst relative error {worst:.2e}");
        if !(worst < TOL) {
            failures.push(format!("{name}: {worst:e}"));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn grad_reverse_with_zero_lambda_blocks_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::row(vec![1.0, -2.0]));
    let y = g.grad_reverse(x, 0.0).unwrap();
    let out = g.weighted_sum(y, Tensor::row(vec![3.0, 4.0])).unwrap();
    g.backward(out).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[-0.0, -0.0]);
}

#[test]
fn inputs_receive_no_gradient_updates() {
    let mut g = Graph::new();
    let a = g.input(Tensor::row(vec![1.0, 2.0]));
    let b = g.param(Tensor::row(vec![0.5, 0.5]));
    let s = g.add(a, b).unwrap();
    let out = g.weighted_sum(s, Tensor::row(vec![1.0, 1.0])).unwrap();
    g.backward(out).unwrap();
    assert_eq!(g.grad(b).unwrap().data(), &[1.0, 1.0]);
}
