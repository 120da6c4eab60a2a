//! Finite-difference checks for every differentiable op. The library tests
//! run a few seeds at tiny shapes; the acceptance suite calls
//! [`check_all_ops`] with the heavyweight seed range.

use rand::Rng;

use super::{box_fill, fd_grad, rel_err, Tensor};
use crate::rng::stream_rng;

const H: f64 = 1e-4;
// Central differences carry an O(h^2 f''') truncation term, and when the true
// derivative is near zero (gelu close to its dip, softmax tails) that noise
// dominates the relative error; across many seeds it reaches the low 1e-5
// range. The gate is the release criterion: rel err < 1e-4 at h = 1e-4.
const TOL: f64 = 1e-4;

fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
}

/// Checks d(scalarize(op(params)))/d(param) against finite differences for
/// every component of every parameter. Panics with context on any mismatch.
fn check(params: &[&Tensor], forward: &dyn Fn() -> Tensor, ctx: &str) {
    for p in params {
        p.zero_grad();
    }
    forward().backward();
    for (pi, p) in params.iter().enumerate() {
        let ad = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let fd = fd_grad(p, H, &mut || super::no_grad(|| forward().scalar_value()));
        for i in 0..p.numel() {
            let e = rel_err(ad[i], fd[i]);
            assert!(
                e < TOL,
                "{ctx}: param {pi} component {i}: autodiff {} vs fd {} (rel err {e})",
                ad[i],
                fd[i]
            );
        }
    }
}

/// Reduces any output to a scalar with fixed weights so every output element
/// influences the loss.
fn weigh(t: &Tensor) -> Tensor {
    let w: Vec<f64> = (0..t.numel()).map(|i| 0.3 + 0.1 * i as f64).collect();
    t.mul(&Tensor::from_vec(
        w[..t.numel()].to_vec(),
        t.shape(),
    ))
    .sum()
}

fn elementwise_and_reductions(seed: u64) {
    let mut rng = stream_rng(&[90, seed]);
    let a = Tensor::param(rand_vec(&mut rng, 6), &[2, 3]);
    let b = Tensor::param(rand_vec(&mut rng, 6), &[2, 3]);
    check(&[&a, &b], &|| weigh(&a.add(&b)), "add");
    check(&[&a, &b], &|| weigh(&a.sub(&b)), "sub");
    check(&[&a, &b], &|| weigh(&a.mul(&b)), "mul");
    check(&[&a], &|| weigh(&a.scale(-1.7)), "scale");
    check(&[&a], &|| weigh(&a.gelu()), "gelu");
    check(&[&a], &|| weigh(&a.exp()), "exp");
    check(&[&a], &|| a.sum(), "sum");
    check(&[&a], &|| a.mean(), "mean");
    check(&[&a], &|| weigh(&a.mul(&a)), "aliased-input mul");
    let s = Tensor::param(vec![0.4], &[1]);
    check(&[&a, &s], &|| weigh(&a.scale_by(&s)), "scale_by");
}

fn matmul_family(seed: u64) {
    let mut rng = stream_rng(&[91, seed]);
    let a = Tensor::param(rand_vec(&mut rng, 6), &[2, 3]);
    let b = Tensor::param(rand_vec(&mut rng, 12), &[3, 4]);
    let bt = Tensor::param(rand_vec(&mut rng, 12), &[4, 3]);
    let bias = Tensor::param(rand_vec(&mut rng, 3), &[3]);
    check(&[&a, &b], &|| weigh(&a.matmul(&b)), "matmul");
    check(&[&a, &bt], &|| weigh(&a.matmul_nt(&bt)), "matmul_nt");
    check(&[&a, &bias], &|| weigh(&a.add_bias(&bias)), "add_bias");
}

fn norms_and_losses(seed: u64) {
    let mut rng = stream_rng(&[92, seed]);
    let x = Tensor::param(rand_vec(&mut rng, 8), &[2, 4]);
    let g = Tensor::param(rand_vec(&mut rng, 4), &[4]);
    let b = Tensor::param(rand_vec(&mut rng, 4), &[4]);
    check(&[&x], &|| weigh(&x.softmax(1)), "softmax axis 1");
    check(&[&x], &|| weigh(&x.softmax(0)), "softmax axis 0");
    check(&[&x, &g, &b], &|| weigh(&x.layer_norm(&g, &b, 1e-5)), "layer_norm");
    check(&[&x], &|| weigh(&x.normalize_rows()), "normalize_rows");
    check(&[&x], &|| x.cross_entropy_rows(&[3, 0]).mean(), "cross_entropy_rows");
}

fn structure_ops(seed: u64) {
    let mut rng = stream_rng(&[93, seed]);
    let x = Tensor::param(rand_vec(&mut rng, 8), &[2, 4]);
    let y = Tensor::param(rand_vec(&mut rng, 4), &[2, 2]);
    let table = Tensor::param(rand_vec(&mut rng, 12), &[4, 3]);
    let z = Tensor::param(rand_vec(&mut rng, 4), &[1, 4]);
    check(&[&x], &|| weigh(&x.slice_cols(1, 2)), "slice_cols");
    check(&[&x, &y], &|| weigh(&Tensor::concat_cols(&[&x, &y])), "concat_cols");
    check(&[&x, &z], &|| weigh(&Tensor::concat_rows(&[&x, &z])), "concat_rows");
    check(&[&table], &|| weigh(&table.gather_rows(&[3, 1, 3])), "gather_rows repeated ids");
}

fn conv_and_region_ops(seed: u64) {
    let mut rng = stream_rng(&[94, seed]);
    let x = Tensor::param(rand_vec(&mut rng, 3 * 4 * 4), &[3, 4, 4]);
    let w = Tensor::param(rand_vec(&mut rng, 2 * 3 * 2 * 2), &[2, 3, 2, 2]);
    let b = Tensor::param(rand_vec(&mut rng, 2), &[2]);
    check(&[&x, &w, &b], &|| weigh(&x.conv2d(&w, &b, 2)), "conv2d");
    check(&[&x], &|| weigh(&x.chw_to_pc()), "chw_to_pc");
    let et = Tensor::param(rand_vec(&mut rng, 3), &[3]);
    let eb = Tensor::param(rand_vec(&mut rng, 3), &[3]);
    check(
        &[&et, &eb],
        &|| weigh(&box_fill(&et, &eb, Some((1, 0, 2, 2)), 4, 4)),
        "box_fill partial box",
    );
    check(&[&et, &eb], &|| weigh(&box_fill(&et, &eb, None, 4, 4)), "box_fill box-free");
}

/// Runs the full per-op finite-difference battery for every seed in the
/// range, covering each differentiable op at least once. Panics on any
/// gradient disagreeing with central differences beyond the tolerance.
pub fn check_all_ops(seeds: std::ops::Range<u64>) {
    for seed in seeds {
        elementwise_and_reductions(seed);
        matmul_family(seed);
        norms_and_losses(seed);
        structure_ops(seed);
        conv_and_region_ops(seed);
    }
}
