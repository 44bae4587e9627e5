mod common;

use std::time::Instant;

use common::{gradient_suite, TOL};

#[test]
fn every_operation_matches_central_differences() {
    let started = Instant::now();
    let suite = gradient_suite();
    let worst: Vec<_> = suite.iter().filter(|(_, e)| !(*e < TOL)).collect();
    for (name, e) in &suite {
        println!("{name:40} {e:.3e}");
    }
    assert!(worst.is_empty(), "gradient mismatches: {worst:?}");
    assert!(started.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn detach_blocks_gradient_flow() {
    use structguard::diffcore::{Tape, Tensor};
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, -2.0]));
    let y = x.square().add(&x.detach().exp()).unwrap().sum();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt_or_zeros(x).data(), &[2.0, -4.0]);
}

#[test]
fn hand_gradients() {
    use structguard::diffcore::{Tape, Tensor};
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let g = tape.backward(x.square().sum()).unwrap();
    assert_eq!(g.wrt_or_zeros(x).data(), &[2.0, 4.0]);

    let tape = Tape::new();
    let z = tape.param(Tensor::matrix(1, 2, vec![0.0, 0.0]));
    let g = tape.backward(z.cross_entropy(&[0]).unwrap()).unwrap();
    let gz = g.wrt_or_zeros(z);
    assert!((gz.data()[0] + 0.5).abs() < 1e-15 && (gz.data()[1] - 0.5).abs() < 1e-15);
}

#[test]
fn finite_difference_oracle_self_checks() {
    use structguard::diffcore::{finite_diff_grad, Tensor};
    let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
    let g = finite_diff_grad(|t| t.sum(), &x, 1e-5);
    assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-8));
    let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &Tensor::vector(vec![3.0]), 1e-5);
    assert!((g.data()[0] - 6.0).abs() < 1e-6);
}

#[test]
fn non_scalar_backward_is_rejected() {
    use structguard::diffcore::{Tape, Tensor};
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(tape.backward(x.square()).is_err());
}
