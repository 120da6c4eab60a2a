//! Forward and backward implementations for every differentiable operation.
//!
//! Conventions:
//! - all data is row-major `f64`;
//! - backward closures accumulate (`+=`) into parent gradient buffers, so the
//!   same leaf can appear in many places in one graph;
//! - matmul-style kernels fix the reduction order (ascending `k`), which makes a
//!   stacked batch bit-identical to running its rows one at a time;
//! - shape misuse panics.

use super::{Inner, Tensor};

fn check(cond: bool, msg: &str) {
    if !cond {
        panic!("tensor: {msg}");
    }
}

/// Scoped access to a parent's gradient buffer. Parents are processed one at a
/// time so an op whose inputs alias (e.g. `x.mul(&x)`) never double-borrows.
fn with_grad(t: &Tensor, f: impl FnOnce(&mut [f64])) {
    if t.requires_grad() {
        let mut g = t.grad_mut();
        f(&mut g);
    }
}

// ---------------------------------------------------------------------------
// Raw kernels (shared by forwards and backwards)
// ---------------------------------------------------------------------------

/// out[m,n] += a[m,k] · b[k,n]
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ (dot products of rows)
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out[k,n] += a[m,k]ᵀ · b[m,n]
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            let o_row = &mut out[l * n..(l + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn softmax_lane(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        let e = (s - max).exp();
        *d = e;
        sum += e;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        check(self.shape() == other.shape(), "add: shape mismatch");
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::op(self.shape().to_vec(), data, &[self, other], move || {
            Box::new(move |out: &Inner| {
                let g = out.out_grad();
                with_grad(&pa, |ga| {
                    for (a, b) in ga.iter_mut().zip(&g) {
                        *a += b;
                    }
                });
                with_grad(&pb, |gb| {
                    for (a, b) in gb.iter_mut().zip(&g) {
                        *a += b;
                    }
                });
            })
        })
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        check(self.shape() == other.shape(), "sub: shape mismatch");
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::op(self.shape().to_vec(), data, &[self, other], move || {
            Box::new(move |out: &Inner| {
                let g = out.out_grad();
                with_grad(&pa, |ga| {
                    for (a, b) in ga.iter_mut().zip(&g) {
                        *a += b;
                    }
                });
                with_grad(&pb, |gb| {
                    for (a, b) in gb.iter_mut().zip(&g) {
                        *a -= b;
                    }
                });
            })
        })
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        check(self.shape() == other.shape(), "mul: shape mismatch");
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::op(self.shape().to_vec(), data, &[self, other], move || {
            Box::new(move |out: &Inner| {
                let g = out.out_grad();
                {
                    let bd = pb.data().clone();
                    with_grad(&pa, |ga| {
                        for i in 0..ga.len() {
                            ga[i] += g[i] * bd[i];
                        }
                    });
                }
                let ad = pa.data().clone();
                with_grad(&pb, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            })
        })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| a * c).collect();
        let pa = self.clone();
        Tensor::op(self.shape().to_vec(), data, &[self], move || {
            Box::new(move |out: &Inner| {
                let g = out.out_grad();
                with_grad(&pa, |ga| {
                    for (a, b) in ga.iter_mut().zip(&g) {
                        *a += b * c;
                    }
                });
            })
        })
    }

    /// Broadcast-multiplies by a `[1]`-shaped tensor (e.g. a learnable temperature).
    pub fn scale_by(&self, s: &Tensor) -> Tensor {
        check(s.numel() == 1, "scale_by: scale must have shape [1]");
        let sv = s.scalar_value();
        let data: Vec<f64> = self.data().iter().map(|a| a * sv).collect();
        let (pa, ps) = (self.clone(), s.clone());
        Tensor::op(self.shape().to_vec(), data, &[self, s], move || {
            Box::new(move |out: &Inner| {
                let g = out.out_grad();
                with_grad(&pa, |ga| {
                    for (a, b) in ga.iter_mut().zip(&g) {
                        *a += b * sv;
                    }
                });
                let ad = pa.data().clone();
                with_grad(&ps, |gs| {
                    let mut acc = 0.0;
                    for i in 0..ad.len() {
                        acc += g[i] * ad[i];
                    }
                    gs[0] += acc;
                });
            })
        })
    }

    pub fn exp(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| a.exp()).collect();
        let pa = self.clone();
        Tensor::op(self.shape().to_vec(), data, &[self], move || {
            Box::new(move |out: &Inner| {
                let g = out.out_grad();
                let y = out.data().clone();
                with_grad(&pa, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * y[i];
                    }
                });
            })
        })
    }

    /// GELU with the tanh approximation (smooth, so finite differences agree).
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()))
            .collect();
        let pa = self.clone();
        Tensor::op(self.shape().to_vec(), data, &[self], move || {
            Box::new(move |out: &Inner| {
                let g = out.out_grad();
                let x = pa.data().clone();
                with_grad(&pa, |ga| {
                    for i in 0..ga.len() {
                        let xi = x[i];
                        let t = (C * (xi + A * xi * xi * xi)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * xi * (1.0 - t * t) * C * (1.0 + 3.0 * A * xi * xi);
                        ga[i] += g[i] * d;
                    }
                });
            })
        })
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let pa = self.clone();
        Tensor::op(vec![1], vec![s], &[self], move || {
            Box::new(move |out: &Inner| {
                let g = out.out_grad()[0];
                with_grad(&pa, |ga| {
                    for a in ga.iter_mut() {
                        *a += g;
                    }
                });
            })
        })
    }

    pub fn mean(&self) -> Tensor {
        check(self.numel() > 0, "mean: empty tensor");
        let n = self.numel() as f64;
        let s: f64 = self.data().iter().sum::<f64>() / n;
        let pa = self.clone();
        Tensor::op(vec![1], vec![s], &[self], move || {
            Box::new(move |out: &Inner| {
                let g = out.out_grad()[0] / n;
                with_grad(&pa, |ga| {
                    for a in ga.iter_mut() {
                        *a += g;
                    }
                });
            })
        })
    }
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

impl Tensor {
    fn dims2(&self, op: &str) -> (usize, usize) {
        check(self.shape().len() == 2, &format!("{op}: expected a 2-d tensor"));
        (self.shape()[0], self.shape()[1])
    }

    /// `[m,k] · [k,n] -> [m,n]`
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = self.dims2("matmul");
        let (k2, n) = other.dims2("matmul");
        check(k == k2, "matmul: inner dimension mismatch");
        let mut data = vec![0.0; m * n];
        mm_nn(&self.data(), &other.data(), m, k, n, &mut data);
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::op(vec![m, n], data, &[self, other], move || {
            Box::new(move |out: &Inner| {
                let g = out.out_grad();
                {
                    let bd = pb.data().clone();
                    with_grad(&pa, |ga| mm_nt(&g, &bd, m, n, k, ga));
                }
                let ad = pa.data().clone();
                with_grad(&pb, |gb| mm_tn(&ad, &g, m, k, n, gb));
            })
        })
    }

    /// `[m,k] · [n,k]ᵀ -> [m,n]` — the attention-score shape, kept fused for
    /// cache-friendly row-by-row dot products.
    pub fn matmul_nt(&self, other: &Tensor) -> Tensor {
        let (m, k) = self.dims2("matmul_nt");
        let (n, k2) = other.dims2("matmul_nt");
        check(k == k2, "matmul_nt: inner dimension mismatch");
        let mut data = vec![0.0; m * n];
        mm_nt(&self.data(), &other.data(), m, k, n, &mut data);
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::op(vec![m, n], data, &[self, other], move || {
            Box::new(move |out: &Inner| {
                let g = out.out_grad();
                {
                    let bd = pb.data().clone();
                    with_grad(&pa, |ga| mm_nn(&g, &bd, m, n, k, ga));
                }
                let ad = pa.data().clone();
                with_grad(&pb, |gb| mm_tn(&g, &ad, m, n, k, gb));
            })
        })
    }

    /// `[n,c] + [c]` with the bias broadcast over rows.
    pub fn add_bias(&self, bias: &Tensor) -> Tensor {
        let (n, c) = self.dims2("add_bias");
        check(bias.shape() == [c], "add_bias: bias shape mismatch");
        let bd = bias.data().clone();
        let mut data = self.value();
        for row in data.chunks_mut(c) {
            for (a, b) in row.iter_mut().zip(&bd) {
                *a += b;
            }
        }
        let (pa, pb) = (self.clone(), bias.clone());
        Tensor::op(vec![n, c], data, &[self, bias], move || {
            Box::new(move |out: &Inner| {
                let g = out.out_grad();
                with_grad(&pa, |ga| {
                    for (a, b) in ga.iter_mut().zip(&g) {
                        *a += b;
                    }
                });
                with_grad(&pb, |gb| {
                    for row in g.chunks(c) {
                        for (a, b) in gb.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                });
            })
        })
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor {
        let (n, c) = self.dims2("slice_cols");
        check(start + len <= c, "slice_cols: range out of bounds");
        let src = self.data();
        let mut data = Vec::with_capacity(n * len);
        for row in 0..n {
            data.extend_from_slice(&src[row * c + start..row * c + start + len]);
        }
        drop(src);
        let pa = self.clone();
        Tensor::op(vec![n, len], data, &[self], move || {
            Box::new(move |out: &Inner| {
                let g = out.out_grad();
                with_grad(&pa, |ga| {
                    for row in 0..n {
                        for j in 0..len {
                            ga[row * c + start + j] += g[row * len + j];
                        }
                    }
                });
            })
        })
    }

    /// Concatenates same-height 2-d tensors along columns.
    pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
        check(!parts.is_empty(), "concat_cols: no inputs");
        let n = parts[0].dims2("concat_cols").0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (pn, pc) = p.dims2("concat_cols");
                check(pn == n, "concat_cols: row-count mismatch");
                pc
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for row in 0..n {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[row * w..(row + 1) * w]);
            }
        }
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let ws = widths.clone();
        Tensor::op(vec![n, total], data, parts, move || {
            Box::new(move |out: &Inner| {
                let g = out.out_grad();
                let mut offset = 0;
                for (p, &w) in owned.iter().zip(&ws) {
                    with_grad(p, |gp| {
                        for row in 0..n {
                            for j in 0..w {
                                gp[row * w + j] += g[row * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            })
        })
    }

    /// Concatenates same-width 2-d tensors along rows (batch stacking).
    pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
        check(!parts.is_empty(), "concat_rows: no inputs");
        let c = parts[0].dims2("concat_rows").1;
        let heights: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (pn, pc) = p.dims2("concat_rows");
                check(pc == c, "concat_rows: column-count mismatch");
                pn
            })
            .collect();
        let total: usize = heights.iter().sum();
        let mut data = Vec::with_capacity(total * c);
        for p in parts {
            data.extend_from_slice(&p.data());
        }
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let hs = heights.clone();
        Tensor::op(vec![total, c], data, parts, move || {
            Box::new(move |out: &Inner| {
                let g = out.out_grad();
                let mut offset = 0;
                for (p, &h) in owned.iter().zip(&hs) {
                    with_grad(p, |gp| {
                        for (a, b) in gp.iter_mut().zip(&g[offset..offset + h * c]) {
                            *a += b;
                        }
                    });
                    offset += h * c;
                }
            })
        })
    }

    /// Row gather: `table[ids[i], :]` — embedding lookup, position slices, and
    /// target-position selection all reduce to this. Backward scatter-adds, so
    /// repeated ids accumulate.
    pub fn gather_rows(&self, ids: &[usize]) -> Tensor {
        let (rows, c) = self.dims2("gather_rows");
        let src = self.data();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            check(id < rows, "gather_rows: row index out of range");
            data.extend_from_slice(&src[id * c..(id + 1) * c]);
        }
        drop(src);
        let pa = self.clone();
        let ids = ids.to_vec();
        let out_rows = ids.len();
        Tensor::op(vec![out_rows, c], data, &[self], move || {
            Box::new(move |out: &Inner| {
                let g = out.out_grad();
                with_grad(&pa, |ga| {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            ga[id * c + j] += g[i * c + j];
                        }
                    }
                });
            })
        })
    }
}

// ---------------------------------------------------------------------------
// Normalizations and losses
// ---------------------------------------------------------------------------

impl Tensor {
    /// Softmax along `axis`, numerically stabilized by max subtraction.
    pub fn softmax(&self, axis: usize) -> Tensor {
        let shape = self.shape().to_vec();
        check(axis < shape.len(), "softmax: axis out of range");
        let len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data();
        let mut data = vec![0.0; src.len()];
        let mut lane_src = vec![0.0; len];
        let mut lane_dst = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for l in 0..len {
                    lane_src[l] = src[(o * len + l) * inner + i];
                }
                softmax_lane(&lane_src, &mut lane_dst);
                for l in 0..len {
                    data[(o * len + l) * inner + i] = lane_dst[l];
                }
            }
        }
        drop(src);
        let pa = self.clone();
        Tensor::op(shape, data, &[self], move || {
            Box::new(move |out: &Inner| {
                let g = out.out_grad();
                let y = out.data().clone();
                with_grad(&pa, |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut dot = 0.0;
                            for l in 0..len {
                                let idx = (o * len + l) * inner + i;
                                dot += g[idx] * y[idx];
                            }
                            for l in 0..len {
                                let idx = (o * len + l) * inner + i;
                                ga[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            })
        })
    }

    /// Layer normalization over the last dimension with learnable gain/bias.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let shape = self.shape().to_vec();
        let c = *shape.last().expect("layer_norm: zero-rank tensor");
        check(gamma.shape() == [c] && beta.shape() == [c], "layer_norm: gain/bias shape mismatch");
        let rows = self.numel() / c;
        let src = self.data();
        let gd = gamma.data().clone();
        let bd = beta.data().clone();
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let x = &src[r * c..(r + 1) * c];
            let mu = x.iter().sum::<f64>() / c as f64;
            let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                data[r * c + j] = (x[j] - mu) * s * gd[j] + bd[j];
            }
        }
        drop(src);
        let (pa, pg, pb) = (self.clone(), gamma.clone(), beta.clone());
        Tensor::op(shape, data, &[self, gamma, beta], move || {
            Box::new(move |out: &Inner| {
                let g = out.out_grad();
                let x = pa.data().clone();
                let gd = pg.data().clone();
                with_grad(&pa, |ga| {
                    for r in 0..rows {
                        let xr = &x[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let mu = xr.iter().sum::<f64>() / c as f64;
                        let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                        let s = 1.0 / (var + eps).sqrt();
                        let mut m1 = 0.0; // mean of gamma*dy
                        let mut m2 = 0.0; // mean of gamma*dy*xhat
                        for j in 0..c {
                            let xh = (xr[j] - mu) * s;
                            let gy = gr[j] * gd[j];
                            m1 += gy;
                            m2 += gy * xh;
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let xh = (xr[j] - mu) * s;
                            let gy = gr[j] * gd[j];
                            ga[r * c + j] += s * (gy - m1 - xh * m2);
                        }
                    }
                });
                with_grad(&pg, |gg| {
                    for r in 0..rows {
                        let xr = &x[r * c..(r + 1) * c];
                        let mu = xr.iter().sum::<f64>() / c as f64;
                        let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                        let s = 1.0 / (var + eps).sqrt();
                        for j in 0..c {
                            gg[j] += g[r * c + j] * (xr[j] - mu) * s;
                        }
                    }
                });
                with_grad(&pb, |gb| {
                    for r in 0..rows {
                        for j in 0..c {
                            gb[j] += g[r * c + j];
                        }
                    }
                });
            })
        })
    }

    /// L2-normalizes each row (contrastive embeddings).
    pub fn normalize_rows(&self) -> Tensor {
        const EPS: f64 = 1e-12;
        let (n, c) = self.dims2("normalize_rows");
        let src = self.data();
        let mut data = vec![0.0; src.len()];
        for r in 0..n {
            let x = &src[r * c..(r + 1) * c];
            let norm = (x.iter().map(|v| v * v).sum::<f64>() + EPS).sqrt();
            for j in 0..c {
                data[r * c + j] = x[j] / norm;
            }
        }
        drop(src);
        let pa = self.clone();
        Tensor::op(vec![n, c], data, &[self], move || {
            Box::new(move |out: &Inner| {
                let g = out.out_grad();
                let x = pa.data().clone();
                let y = out.data().clone();
                with_grad(&pa, |ga| {
                    for r in 0..n {
                        let xr = &x[r * c..(r + 1) * c];
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let norm = (xr.iter().map(|v| v * v).sum::<f64>() + EPS).sqrt();
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[r * c + j] += (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                });
            })
        })
    }

    /// Per-row cross-entropy: `out[r] = -log softmax(logits[r])[targets[r]]`.
    /// Accepts `[t,v]` logits with `t` targets, or `[v]` with one target.
    pub fn cross_entropy_rows(&self, targets: &[usize]) -> Tensor {
        let (t, v) = match self.shape() {
            [v] => (1usize, *v),
            [t, v] => (*t, *v),
            other => panic!("tensor: cross_entropy_rows: bad logits shape {other:?}"),
        };
        check(targets.len() == t, "cross_entropy_rows: target count mismatch");
        let src = self.data();
        let mut data = vec![0.0; t];
        for (r, &tgt) in targets.iter().enumerate() {
            check(tgt < v, "cross_entropy_rows: target id out of vocabulary range");
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            data[r] = lse - row[tgt];
        }
        drop(src);
        let pa = self.clone();
        let targets = targets.to_vec();
        Tensor::op(vec![t], data, &[self], move || {
            Box::new(move |out: &Inner| {
                let g = out.out_grad();
                let x = pa.data().clone();
                with_grad(&pa, |ga| {
                    let mut probs = vec![0.0; v];
                    for (r, &tgt) in targets.iter().enumerate() {
                        let row = &x[r * v..(r + 1) * v];
                        softmax_lane(row, &mut probs);
                        let gr = g[r];
                        let grow = &mut ga[r * v..(r + 1) * v];
                        for j in 0..v {
                            grow[j] += gr * probs[j];
                        }
                        grow[tgt] -= gr;
                    }
                });
            })
        })
    }

    /// Scalar cross-entropy of a single logit vector against one target id.
    pub fn cross_entropy(&self, target: usize) -> Tensor {
        check(self.shape().len() == 1, "cross_entropy: expected a 1-d logit vector");
        self.cross_entropy_rows(&[target])
    }
}

// ---------------------------------------------------------------------------
// Convolution and layout ops
// ---------------------------------------------------------------------------

impl Tensor {
    /// Non-overlapping patch convolution: `[cin,h,w]` with a `[cout,cin,k,k]`
    /// kernel and stride == k produces `[cout,h/k,w/k]`. The equal-kernel-stride
    /// restriction is the only configuration this crate needs; anything else is
    /// rejected as a configuration error.
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor, stride: usize) -> Tensor {
        let ishape = self.shape().to_vec();
        check(ishape.len() == 3, "conv2d: expected [channels,h,w] input");
        let (cin, h, w) = (ishape[0], ishape[1], ishape[2]);
        let wshape = weight.shape().to_vec();
        check(wshape.len() == 4, "conv2d: expected [cout,cin,k,k] kernel");
        let (cout, wcin, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        check(wcin == cin, "conv2d: kernel input-channel mismatch");
        check(
            kh == stride && kw == stride,
            "conv2d: configuration error: kernel must equal stride",
        );
        check(
            h % stride == 0 && w % stride == 0,
            "conv2d: configuration error: spatial dims must be divisible by the stride",
        );
        check(bias.shape() == [cout], "conv2d: bias shape mismatch");
        let (oh, ow) = (h / stride, w / stride);
        let src = self.data();
        let wd = weight.data().clone();
        let bd = bias.data().clone();
        let mut data = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bd[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = oy * stride + ky;
                            let irow = ci * h * w + iy * w + ox * stride;
                            let wrow = ((co * cin + ci) * kh + ky) * kw;
                            for kx in 0..kw {
                                acc += src[irow + kx] * wd[wrow + kx];
                            }
                        }
                    }
                    data[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        drop(src);
        let (px, pw, pb) = (self.clone(), weight.clone(), bias.clone());
        Tensor::op(vec![cout, oh, ow], data, &[self, weight, bias], move || {
            Box::new(move |out: &Inner| {
                let g = out.out_grad();
                let xd = px.data().clone();
                let wd = pw.data().clone();
                with_grad(&px, |gx| {
                    for co in 0..cout {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = g[(co * oh + oy) * ow + ox];
                                for ci in 0..cin {
                                    for ky in 0..kh {
                                        let iy = oy * stride + ky;
                                        let irow = ci * h * w + iy * w + ox * stride;
                                        let wrow = ((co * cin + ci) * kh + ky) * kw;
                                        for kx in 0..kw {
                                            gx[irow + kx] += go * wd[wrow + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                with_grad(&pw, |gw| {
                    for co in 0..cout {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = g[(co * oh + oy) * ow + ox];
                                for ci in 0..cin {
                                    for ky in 0..kh {
                                        let iy = oy * stride + ky;
                                        let irow = ci * h * w + iy * w + ox * stride;
                                        let wrow = ((co * cin + ci) * kh + ky) * kw;
                                        for kx in 0..kw {
                                            gw[wrow + kx] += go * xd[irow + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                with_grad(&pb, |gb| {
                    for co in 0..cout {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                gb[co] += g[(co * oh + oy) * ow + ox];
                            }
                        }
                    }
                });
            })
        })
    }

    /// `[c,h,w] -> [h*w, c]`: channel-major feature map to patch-token rows.
    pub fn chw_to_pc(&self) -> Tensor {
        let shape = self.shape().to_vec();
        check(shape.len() == 3, "chw_to_pc: expected [c,h,w]");
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let p = h * w;
        let src = self.data();
        let mut data = vec![0.0; p * c];
        for ci in 0..c {
            for pi in 0..p {
                data[pi * c + ci] = src[ci * p + pi];
            }
        }
        drop(src);
        let pa = self.clone();
        Tensor::op(vec![p, c], data, &[self], move || {
            Box::new(move |out: &Inner| {
                let g = out.out_grad();
                with_grad(&pa, |ga| {
                    for ci in 0..c {
                        for pi in 0..p {
                            ga[ci * p + pi] += g[pi * c + ci];
                        }
                    }
                });
            })
        })
    }
}

/// Builds the target-region embedding map: a `[c,h,w]` tensor equal to
/// `inside` at every pixel of the (inclusive) box and `outside` elsewhere.
/// `None` means box-free: the whole map is `outside`. Gradients flow into both
/// embedding vectors as sums over their regions.
pub fn box_fill(
    inside: &Tensor,
    outside: &Tensor,
    bbox: Option<(usize, usize, usize, usize)>, // (x1, y1, x2, y2), inclusive
    h: usize,
    w: usize,
) -> Tensor {
    check(
        inside.shape().len() == 1 && inside.shape() == outside.shape(),
        "box_fill: embeddings must be same-length vectors",
    );
    let c = inside.shape()[0];
    if let Some((x1, y1, x2, y2)) = bbox {
        check(x1 <= x2 && y1 <= y2, "box_fill: inverted box");
        check(x2 < w && y2 < h, "box_fill: box exceeds canvas");
    }
    let id = inside.data().clone();
    let od = outside.data().clone();
    let inside_px = move |x: usize, y: usize| match bbox {
        Some((x1, y1, x2, y2)) => x >= x1 && x <= x2 && y >= y1 && y <= y2,
        None => false,
    };
    let mut data = vec![0.0; c * h * w];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                data[ci * h * w + y * w + x] = if inside_px(x, y) { id[ci] } else { od[ci] };
            }
        }
    }
    let (pi, po) = (inside.clone(), outside.clone());
    Tensor::op(vec![c, h, w], data, &[inside, outside], move || {
        Box::new(move |out: &Inner| {
            let g = out.out_grad();
            with_grad(&pi, |gi| {
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            if inside_px(x, y) {
                                gi[ci] += g[ci * h * w + y * w + x];
                            }
                        }
                    }
                }
            });
            with_grad(&po, |go| {
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            if !inside_px(x, y) {
                                go[ci] += g[ci * h * w + y * w + x];
                            }
                        }
                    }
                }
            });
        })
    })
}
