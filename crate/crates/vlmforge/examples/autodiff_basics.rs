//! Reverse-mode autodiff in five minutes: build a tiny expression from
//! trainable leaves, backpropagate, and check one gradient against a central
//! finite difference. Also shows `no_grad` (inference mode) and how gradients
//! accumulate on leaves until `zero_grad`.
//!
//! Run with: `cargo run --example autodiff_basics`

use vlmforge::tensor::{fd_grad, no_grad, rel_err, Tensor};

fn main() {
    // z = mean( (x W + b)^2 )  — a little least-squares-ish scalar
    let x = Tensor::from_vec(vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0], &[2, 3]);
    let w = Tensor::param(vec![0.3, -0.6, 0.9, 0.1, 0.4, -0.2], &[3, 2]);
    let b = Tensor::param(vec![0.05, -0.1], &[2]);

    let forward = || {
        let y = x.matmul(&w).add_bias(&b);
        y.mul(&y).mean()
    };

    let z = forward();
    println!("forward value     z = {:.6}", z.scalar_value());

    z.backward();
    let grad_w = w.grad().expect("w is a leaf, so backward left a gradient");
    println!("autodiff dz/dW    = {:?}", rounded(&grad_w));

    // Independent check: central finite differences on the same forward pass.
    let fd_w = fd_grad(&w, 1e-4, &mut || forward().scalar_value());
    println!("finite-diff dz/dW = {:?}", rounded(&fd_w));
    let worst = grad_w
        .iter()
        .zip(&fd_w)
        .map(|(a, f)| rel_err(*a, *f))
        .fold(0.0, f64::max);
    println!("worst relative error: {worst:.2e} (well below 1e-4)");
    assert!(worst < 1e-4);

    // Leaves accumulate across backward calls — two backwards double the grad.
    z.backward();
    let doubled = w.grad().unwrap();
    assert!(doubled.iter().zip(&grad_w).all(|(d, g)| (d - 2.0 * g).abs() < 1e-12));
    println!("after a second backward, leaf gradients exactly doubled");

    // Inference mode: no graph is recorded, so there is nothing to backprop.
    let silent = no_grad(|| forward());
    assert!(silent.grad().is_none());
    println!("inside no_grad the same forward records no graph");
}

fn rounded(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}
