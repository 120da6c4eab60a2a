//! Central finite-difference gradient checking.
//!
//! This is the independent oracle for the autodiff engine: it re-evaluates a
//! user-supplied loss closure under point perturbations of a leaf tensor and
//! never touches the backward machinery. Tests compare its estimates against
//! `Tensor::grad` values.

use super::Tensor;

/// Central-difference estimate of d(loss)/d(param[idx]) at step `h`.
/// The parameter value is restored afterwards.
pub fn fd_grad_component(param: &Tensor, idx: usize, h: f64, loss: &mut dyn FnMut() -> f64) -> f64 {
    let mut data = param.value();
    let original = data[idx];
    data[idx] = original + h;
    param.set_data(&data);
    let up = loss();
    data[idx] = original - h;
    param.set_data(&data);
    let down = loss();
    data[idx] = original;
    param.set_data(&data);
    (up - down) / (2.0 * h)
}

/// Full finite-difference gradient of `loss` with respect to every component
/// of `param`. Quadratic cost; intended for small tensors in tests.
pub fn fd_grad(param: &Tensor, h: f64, loss: &mut dyn FnMut() -> f64) -> Vec<f64> {
    (0..param.numel())
        .map(|i| fd_grad_component(param, i, h, loss))
        .collect()
}

/// Relative error with an absolute floor, so near-zero gradients compare on an
/// absolute scale instead of exploding.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_matches_known_derivative() {
        // f(w) = w0^2 + 3*w1, df = [2 w0, 3]
        let w = Tensor::param(vec![1.5, -2.0], &[2]);
        let mut loss = || {
            let d = w.data();
            d[0] * d[0] + 3.0 * d[1]
        };
        let g = fd_grad(&w, 1e-4, &mut loss);
        assert!(rel_err(g[0], 2.0 * 1.5) < 1e-8);
        assert!(rel_err(g[1], 3.0) < 1e-8);
        // parameter restored
        assert_eq!(w.value(), vec![1.5, -2.0]);
    }
}
