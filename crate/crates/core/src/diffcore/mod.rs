//! Dense tensors with reverse-mode differentiation over a closed operation
//! set, plus a central-difference gradient oracle.

mod tape;
mod tensor;

pub use tape::{cosine, softmax_rows, Gradients, Tape, Var, EPS};
pub use tensor::Tensor;

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut grad = x.zeros_like();
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest relative error between two gradients, with an absolute floor so
/// near-zero entries do not blow up the ratio.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
