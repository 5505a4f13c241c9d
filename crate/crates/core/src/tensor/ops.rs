//! Elementwise, reduction and shape ops. Binary ops broadcast right-aligned
//! (an axis must match or be 1); gradients are reduced back to each input's
//! shape by summation.

use super::{plain_sum, sorted_sum, Tensor};
use crate::scalar::Scalar;

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize], op: &str) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "{op}: shapes {a:?} and {b:?} are not broadcastable"
        );
        out[i] = da.max(db);
    }
    out
}

/// Row-major strides, with 0 on axes the (right-aligned) shape broadcasts.
fn bcast_strides(shape: &[usize], out_rank: usize) -> Vec<usize> {
    let mut full = vec![1usize; out_rank];
    let off = out_rank - shape.len();
    for (i, &s) in shape.iter().enumerate() {
        full[off + i] = s;
    }
    let mut strides = vec![0usize; out_rank];
    let mut acc = 1usize;
    for d in (0..out_rank).rev() {
        strides[d] = if full[d] == 1 { 0 } else { acc };
        acc *= full[d];
    }
    strides
}

/// Visit every output element of a broadcast op, yielding the flat indices
/// into both inputs. Odometer walk, no per-element div/mod.
pub(crate) fn for_each_bcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let numel: usize = out_shape.iter().product();
    if numel == 0 {
        return;
    }
    let sa = bcast_strides(a_shape, rank);
    let sb = bcast_strides(b_shape, rank);
    let mut coords = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for io in 0..numel {
        f(io, ia, ib);
        for d in (0..rank).rev() {
            coords[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
            coords[d] = 0;
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for shape {shape:?}");
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tensor<T> {
    // ── Binary, broadcasting ────────────────────────────────────────────

    pub fn add(&self, rhs: &Tensor<T>) -> Tensor<T> {
        let out_shape = broadcast_shape(self.shape(), rhs.shape(), "add");
        let mut out = vec![T::ZERO; out_shape.iter().product()];
        {
            let (a, b) = (self.data(), rhs.data());
            for_each_bcast(&out_shape, self.shape(), rhs.shape(), |io, ia, ib| {
                out[io] = a[ia] + b[ib];
            });
        }
        let (ash, bsh) = (self.shape().to_vec(), rhs.shape().to_vec());
        let osh = out_shape.clone();
        Tensor::from_op(out_shape, out, vec![self.clone(), rhs.clone()], move |go, ps| {
            let mut da = vec![T::ZERO; ash.iter().product()];
            let mut db = vec![T::ZERO; bsh.iter().product()];
            for_each_bcast(&osh, &ash, &bsh, |io, ia, ib| {
                da[ia] += go[io];
                db[ib] += go[io];
            });
            ps[0].accumulate_grad(&da);
            ps[1].accumulate_grad(&db);
        })
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Tensor<T> {
        let out_shape = broadcast_shape(self.shape(), rhs.shape(), "sub");
        let mut out = vec![T::ZERO; out_shape.iter().product()];
        {
            let (a, b) = (self.data(), rhs.data());
            for_each_bcast(&out_shape, self.shape(), rhs.shape(), |io, ia, ib| {
                out[io] = a[ia] - b[ib];
            });
        }
        let (ash, bsh) = (self.shape().to_vec(), rhs.shape().to_vec());
        let osh = out_shape.clone();
        Tensor::from_op(out_shape, out, vec![self.clone(), rhs.clone()], move |go, ps| {
            let mut da = vec![T::ZERO; ash.iter().product()];
            let mut db = vec![T::ZERO; bsh.iter().product()];
            for_each_bcast(&osh, &ash, &bsh, |io, ia, ib| {
                da[ia] += go[io];
                db[ib] -= go[io];
            });
            ps[0].accumulate_grad(&da);
            ps[1].accumulate_grad(&db);
        })
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Tensor<T> {
        let out_shape = broadcast_shape(self.shape(), rhs.shape(), "mul");
        let mut out = vec![T::ZERO; out_shape.iter().product()];
        {
            let (a, b) = (self.data(), rhs.data());
            for_each_bcast(&out_shape, self.shape(), rhs.shape(), |io, ia, ib| {
                out[io] = a[ia] * b[ib];
            });
        }
        let (ash, bsh) = (self.shape().to_vec(), rhs.shape().to_vec());
        let osh = out_shape.clone();
        Tensor::from_op(out_shape, out, vec![self.clone(), rhs.clone()], move |go, ps| {
            let (a, b) = (ps[0].data(), ps[1].data());
            let mut da = vec![T::ZERO; ash.iter().product()];
            let mut db = vec![T::ZERO; bsh.iter().product()];
            for_each_bcast(&osh, &ash, &bsh, |io, ia, ib| {
                da[ia] += go[io] * b[ib];
                db[ib] += go[io] * a[ia];
            });
            drop(a);
            drop(b);
            ps[0].accumulate_grad(&da);
            ps[1].accumulate_grad(&db);
        })
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Tensor<T> {
        let out_shape = broadcast_shape(self.shape(), rhs.shape(), "div");
        let mut out = vec![T::ZERO; out_shape.iter().product()];
        {
            let (a, b) = (self.data(), rhs.data());
            for_each_bcast(&out_shape, self.shape(), rhs.shape(), |io, ia, ib| {
                out[io] = a[ia] / b[ib];
            });
        }
        let (ash, bsh) = (self.shape().to_vec(), rhs.shape().to_vec());
        let osh = out_shape.clone();
        Tensor::from_op(out_shape, out, vec![self.clone(), rhs.clone()], move |go, ps| {
            let (a, b) = (ps[0].data(), ps[1].data());
            let mut da = vec![T::ZERO; ash.iter().product()];
            let mut db = vec![T::ZERO; bsh.iter().product()];
            for_each_bcast(&osh, &ash, &bsh, |io, ia, ib| {
                let inv = T::ONE / b[ib];
                da[ia] += go[io] * inv;
                db[ib] -= go[io] * a[ia] * inv * inv;
            });
            drop(a);
            drop(b);
            ps[0].accumulate_grad(&da);
            ps[1].accumulate_grad(&db);
        })
    }

    // ── Scalar and unary ────────────────────────────────────────────────

    pub fn scale(&self, c: f64) -> Tensor<T> {
        let c = T::from_f64(c);
        let out: Vec<T> = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |go, ps| {
            let dg: Vec<T> = go.iter().map(|&g| g * c).collect();
            ps[0].accumulate_grad(&dg);
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::from_f64(c);
        let out: Vec<T> = self.data().iter().map(|&v| v + c).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], |go, ps| {
            ps[0].accumulate_grad(go);
        })
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|v| v.exp()).collect();
        let saved = out.clone();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |go, ps| {
            let dg: Vec<T> = go.iter().zip(&saved).map(|(&g, &o)| g * o).collect();
            ps[0].accumulate_grad(&dg);
        })
    }

    pub fn ln(&self) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|v| v.ln()).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], |go, ps| {
            let x = ps[0].data();
            let dg: Vec<T> = go.iter().zip(x.iter()).map(|(&g, &v)| g / v).collect();
            drop(x);
            ps[0].accumulate_grad(&dg);
        })
    }

    pub fn sqrt(&self) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|v| v.sqrt()).collect();
        let saved = out.clone();
        let half = T::from_f64(0.5);
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |go, ps| {
            let dg: Vec<T> = go
                .iter()
                .zip(&saved)
                .map(|(&g, &s)| g * half / s)
                .collect();
            ps[0].accumulate_grad(&dg);
        })
    }

    pub fn abs(&self) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|v| v.abs()).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], |go, ps| {
            let x = ps[0].data();
            let dg: Vec<T> = go
                .iter()
                .zip(x.iter())
                .map(|(&g, &v)| {
                    if v > T::ZERO {
                        g
                    } else if v < T::ZERO {
                        -g
                    } else {
                        T::ZERO
                    }
                })
                .collect();
            drop(x);
            ps[0].accumulate_grad(&dg);
        })
    }

    pub fn clamp_min(&self, lo: f64) -> Tensor<T> {
        let lo = T::from_f64(lo);
        let out: Vec<T> = self.data().iter().map(|&v| v.maxv(lo)).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |go, ps| {
            let x = ps[0].data();
            let dg: Vec<T> = go
                .iter()
                .zip(x.iter())
                .map(|(&g, &v)| if v > lo { g } else { T::ZERO })
                .collect();
            drop(x);
            ps[0].accumulate_grad(&dg);
        })
    }

    pub fn relu(&self) -> Tensor<T> {
        self.clamp_min(0.0)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&v| sigmoid_stable(v)).collect();
        let saved = out.clone();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |go, ps| {
            let dg: Vec<T> = go
                .iter()
                .zip(&saved)
                .map(|(&g, &s)| g * s * (T::ONE - s))
                .collect();
            ps[0].accumulate_grad(&dg);
        })
    }

    /// ln(1 + e^x), the density head activation.
    pub fn softplus(&self) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&v| softplus_stable(v)).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], |go, ps| {
            let x = ps[0].data();
            let dg: Vec<T> = go
                .iter()
                .zip(x.iter())
                .map(|(&g, &v)| g * sigmoid_stable(v))
                .collect();
            drop(x);
            ps[0].accumulate_grad(&dg);
        })
    }

    pub fn tanh(&self) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|v| v.tanh()).collect();
        let saved = out.clone();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |go, ps| {
            let dg: Vec<T> = go
                .iter()
                .zip(&saved)
                .map(|(&g, &t)| g * (T::ONE - t * t))
                .collect();
            ps[0].accumulate_grad(&dg);
        })
    }

    /// Smooth GELU (tanh form); the default nonlinearity, chosen over ReLU so
    /// finite-difference checks stay clean away from kinks.
    pub fn gelu(&self) -> Tensor<T> {
        let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = T::from_f64(0.044715);
        let half = T::from_f64(0.5);
        let out: Vec<T> = self
            .data()
            .iter()
            .map(|&x| half * x * (T::ONE + (c * (x + k * x * x * x)).tanh()))
            .collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |go, ps| {
            let xs = ps[0].data();
            let three_k = T::from_f64(3.0 * 0.044715);
            let dg: Vec<T> = go
                .iter()
                .zip(xs.iter())
                .map(|(&g, &x)| {
                    let inner = c * (x + k * x * x * x);
                    let t = inner.tanh();
                    let sech2 = T::ONE - t * t;
                    let dinner = c * (T::ONE + three_k * x * x);
                    g * (half * (T::ONE + t) + half * x * sech2 * dinner)
                })
                .collect();
            drop(xs);
            ps[0].accumulate_grad(&dg);
        })
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&self) -> Tensor<T> {
        let s = plain_sum(&self.data());
        let n = self.numel();
        Tensor::from_op(vec![1], vec![s], vec![self.clone()], move |go, ps| {
            ps[0].accumulate_grad(&vec![go[0]; n]);
        })
    }

    pub fn mean_all(&self) -> Tensor<T> {
        self.sum_all().scale(1.0 / self.numel() as f64)
    }

    fn sum_axis_impl(&self, axis: usize, keepdim: bool, sorted: bool) -> Tensor<T> {
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut out = vec![T::ZERO; outer * inner];
        {
            let x = self.data();
            let mut scratch = vec![T::ZERO; len];
            for o in 0..outer {
                for i in 0..inner {
                    for (d, s) in scratch.iter_mut().enumerate() {
                        *s = x[(o * len + d) * inner + i];
                    }
                    out[o * inner + i] = if sorted {
                        sorted_sum(&mut scratch)
                    } else {
                        plain_sum(&scratch)
                    };
                }
            }
        }
        let mut out_shape = self.shape().to_vec();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let n_in = self.numel();
        Tensor::from_op(out_shape, out, vec![self.clone()], move |go, ps| {
            let mut dg = vec![T::ZERO; n_in];
            for o in 0..outer {
                for d in 0..len {
                    for i in 0..inner {
                        dg[(o * len + d) * inner + i] = go[o * inner + i];
                    }
                }
            }
            ps[0].accumulate_grad(&dg);
        })
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Tensor<T> {
        self.sum_axis_impl(axis, keepdim, false)
    }

    /// Sum along `axis` with sorted (order-invariant) accumulation; use when
    /// the axis enumerates input views or view pairs.
    pub fn sum_axis_sorted(&self, axis: usize, keepdim: bool) -> Tensor<T> {
        self.sum_axis_impl(axis, keepdim, true)
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Tensor<T> {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis, keepdim).scale(1.0 / n)
    }

    // ── Softmax and cumulative ops ──────────────────────────────────────

    fn softmax_impl(&self, axis: usize, sorted: bool) -> Tensor<T> {
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut out = vec![T::ZERO; self.numel()];
        {
            let x = self.data();
            let mut scratch = vec![T::ZERO; len];
            for o in 0..outer {
                for i in 0..inner {
                    let mut mx = T::neg_infinity();
                    for d in 0..len {
                        mx = mx.maxv(x[(o * len + d) * inner + i]);
                    }
                    for (d, s) in scratch.iter_mut().enumerate() {
                        *s = (x[(o * len + d) * inner + i] - mx).exp();
                    }
                    let denom = if sorted {
                        let mut c = scratch.clone();
                        sorted_sum(&mut c)
                    } else {
                        plain_sum(&scratch)
                    };
                    for d in 0..len {
                        out[(o * len + d) * inner + i] = scratch[d] / denom;
                    }
                }
            }
        }
        let saved = out.clone();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |go, ps| {
            let mut dg = vec![T::ZERO; saved.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let mut dot = T::ZERO;
                    for d in 0..len {
                        let idx = (o * len + d) * inner + i;
                        dot += go[idx] * saved[idx];
                    }
                    for d in 0..len {
                        let idx = (o * len + d) * inner + i;
                        dg[idx] = saved[idx] * (go[idx] - dot);
                    }
                }
            }
            ps[0].accumulate_grad(&dg);
        })
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Tensor<T> {
        self.softmax_impl(axis, false)
    }

    /// Softmax whose normalizer is accumulated order-invariantly; for axes
    /// that enumerate views/pairs/cross-view tokens.
    pub fn softmax_sorted(&self, axis: usize) -> Tensor<T> {
        self.softmax_impl(axis, true)
    }

    /// out[..., d, ...] = sum of inputs strictly before d along `axis`.
    pub fn cumsum_exclusive(&self, axis: usize) -> Tensor<T> {
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut out = vec![T::ZERO; self.numel()];
        {
            let x = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let mut acc = T::ZERO;
                    for d in 0..len {
                        let idx = (o * len + d) * inner + i;
                        out[idx] = acc;
                        acc += x[idx];
                    }
                }
            }
        }
        let n = self.numel();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |go, ps| {
            // d out_e / d in_d = 1 for d < e: suffix sums excluding self.
            let mut dg = vec![T::ZERO; n];
            for o in 0..outer {
                for i in 0..inner {
                    let mut acc = T::ZERO;
                    for d in (0..len).rev() {
                        let idx = (o * len + d) * inner + i;
                        dg[idx] = acc;
                        acc += go[idx];
                    }
                }
            }
            ps[0].accumulate_grad(&dg);
        })
    }

    // ── Shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            self.numel(),
            "reshape: cannot view shape {:?} as {:?}",
            self.shape(),
            shape
        );
        let out = self.to_vec();
        Tensor::from_op(shape.to_vec(), out, vec![self.clone()], |go, ps| {
            ps[0].accumulate_grad(go);
        })
    }

    pub fn permute(&self, perm: &[usize]) -> Tensor<T> {
        let rank = self.shape().len();
        assert_eq!(perm.len(), rank, "permute: perm {perm:?} vs rank {rank}");
        let mut seen = vec![false; rank];
        for &p in perm {
            assert!(p < rank && !seen[p], "permute: invalid perm {perm:?}");
            seen[p] = true;
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let out = permute_data(&self.data(), &in_shape, perm);
        let perm_v = perm.to_vec();
        Tensor::from_op(out_shape.clone(), out, vec![self.clone()], move |go, ps| {
            // grad flows through the inverse permutation
            let mut inv = vec![0usize; perm_v.len()];
            for (i, &p) in perm_v.iter().enumerate() {
                inv[p] = i;
            }
            let dg = permute_data(go, &out_shape, &inv);
            ps[0].accumulate_grad(&dg);
        })
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Tensor<T> {
        let (outer, full, inner) = axis_split(self.shape(), axis);
        assert!(
            start + len <= full,
            "slice: [{start}, {}) out of range for axis {axis} of shape {:?}",
            start + len,
            self.shape()
        );
        let mut out = vec![T::ZERO; outer * len * inner];
        {
            let x = self.data();
            for o in 0..outer {
                for d in 0..len {
                    let src = (o * full + start + d) * inner;
                    let dst = (o * len + d) * inner;
                    out[dst..dst + inner].copy_from_slice(&x[src..src + inner]);
                }
            }
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let n_in = self.numel();
        Tensor::from_op(out_shape, out, vec![self.clone()], move |go, ps| {
            let mut dg = vec![T::ZERO; n_in];
            for o in 0..outer {
                for d in 0..len {
                    let dst = (o * full + start + d) * inner;
                    let src = (o * len + d) * inner;
                    dg[dst..dst + inner].copy_from_slice(&go[src..src + inner]);
                }
            }
            ps[0].accumulate_grad(&dg);
        })
    }

    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let rank = parts[0].shape().len();
        for p in parts {
            assert_eq!(p.shape().len(), rank, "concat: rank mismatch");
            for d in 0..rank {
                if d != axis {
                    assert_eq!(
                        p.shape()[d],
                        parts[0].shape()[d],
                        "concat: shape mismatch off-axis between {:?} and {:?}",
                        p.shape(),
                        parts[0].shape()
                    );
                }
            }
        }
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = axis_split(parts[0].shape(), axis);
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = total;
        let mut out = vec![T::ZERO; outer * total * inner];
        let mut off = 0usize;
        for (p, &l) in parts.iter().zip(&lens) {
            let x = p.data();
            for o in 0..outer {
                let src = o * l * inner;
                let dst = (o * total + off) * inner;
                out[dst..dst + l * inner].copy_from_slice(&x[src..src + l * inner]);
            }
            off += l;
        }
        let parents: Vec<Tensor<T>> = parts.iter().map(|p| (*p).clone()).collect();
        Tensor::from_op(out_shape, out, parents, move |go, ps| {
            let mut off = 0usize;
            for (p, &l) in ps.iter().zip(&lens) {
                let mut dg = vec![T::ZERO; outer * l * inner];
                for o in 0..outer {
                    let src = (o * total + off) * inner;
                    let dst = o * l * inner;
                    dg[dst..dst + l * inner].copy_from_slice(&go[src..src + l * inner]);
                }
                p.accumulate_grad(&dg);
                off += l;
            }
        })
    }

    /// Pick `indices` along `axis` (gather); backward scatter-adds.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Tensor<T> {
        let (outer, full, inner) = axis_split(self.shape(), axis);
        for &ix in indices {
            assert!(ix < full, "index_select: index {ix} out of range {full}");
        }
        let k = indices.len();
        let mut out = vec![T::ZERO; outer * k * inner];
        {
            let x = self.data();
            for o in 0..outer {
                for (j, &ix) in indices.iter().enumerate() {
                    let src = (o * full + ix) * inner;
                    let dst = (o * k + j) * inner;
                    out[dst..dst + inner].copy_from_slice(&x[src..src + inner]);
                }
            }
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = k;
        let idx = indices.to_vec();
        let n_in = self.numel();
        Tensor::from_op(out_shape, out, vec![self.clone()], move |go, ps| {
            let mut dg = vec![T::ZERO; n_in];
            for o in 0..outer {
                for (j, &ix) in idx.iter().enumerate() {
                    let dst = (o * full + ix) * inner;
                    let src = (o * k + j) * inner;
                    for i in 0..inner {
                        dg[dst + i] += go[src + i];
                    }
                }
            }
            ps[0].accumulate_grad(&dg);
        })
    }

    /// Zero-pad along one axis.
    pub fn zero_pad(&self, axis: usize, before: usize, after: usize) -> Tensor<T> {
        let (outer, full, inner) = axis_split(self.shape(), axis);
        let new_len = full + before + after;
        let mut out = vec![T::ZERO; outer * new_len * inner];
        {
            let x = self.data();
            for o in 0..outer {
                for d in 0..full {
                    let src = (o * full + d) * inner;
                    let dst = (o * new_len + before + d) * inner;
                    out[dst..dst + inner].copy_from_slice(&x[src..src + inner]);
                }
            }
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = new_len;
        let n_in = self.numel();
        Tensor::from_op(out_shape, out, vec![self.clone()], move |go, ps| {
            let mut dg = vec![T::ZERO; n_in];
            for o in 0..outer {
                for d in 0..full {
                    let dst = (o * full + d) * inner;
                    let src = (o * new_len + before + d) * inner;
                    dg[dst..dst + inner].copy_from_slice(&go[src..src + inner]);
                }
            }
            ps[0].accumulate_grad(&dg);
        })
    }
}

fn permute_data<T: Scalar>(data: &[T], in_shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = in_shape.len();
    let numel: usize = in_shape.iter().product();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![T::ZERO; numel];
    if numel == 0 {
        return out;
    }
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = data[src];
        for d in (0..rank).rev() {
            coords[d] += 1;
            src += src_strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            coords[d] = 0;
        }
    }
    out
}

#[inline]
fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

#[inline]
fn softplus_stable<T: Scalar>(x: T) -> T {
    let cap = T::from_f64(30.0);
    if x > cap {
        x
    } else if x < -cap {
        x.exp()
    } else {
        (T::ONE + x.exp()).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::leaf(shape, v, true)
    }

    #[test]
    fn add_broadcasts_bias() {
        let x = t64(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = t64(&[1, 3], vec![10., 20., 30.]);
        let y = x.add(&b);
        assert_eq!(y.to_vec(), vec![11., 22., 33., 14., 25., 36.]);
        y.sum_all().backward();
        assert_eq!(b.grad().unwrap(), vec![2., 2., 2.]);
        assert_eq!(x.grad().unwrap(), vec![1.; 6]);
    }

    #[test]
    #[should_panic(expected = "not broadcastable")]
    fn incompatible_shapes_panic() {
        let x = t64(&[2, 3], vec![0.; 6]);
        let y = t64(&[4], vec![0.; 4]);
        let _ = x.add(&y);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t64(&[2, 4], vec![1., 2., 3., 4., -1., 0., 1., 2.]);
        let s = x.softmax(1);
        let v = s.to_vec();
        let r0: f64 = v[..4].iter().sum();
        let r1: f64 = v[4..].iter().sum();
        assert!((r0 - 1.0).abs() < 1e-12);
        assert!((r1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_equal_inputs_uniform() {
        let x = t64(&[4], vec![3.0; 4]);
        assert_eq!(x.softmax(0).to_vec(), vec![0.25; 4]);
    }

    #[test]
    fn softmax_large_inputs_no_overflow() {
        let x = t64(&[2], vec![1000.0, 0.0]);
        let s = x.softmax(0).to_vec();
        assert!(s.iter().all(|v| v.is_finite()));
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1] < 1e-300);
    }

    #[test]
    fn cumsum_exclusive_values() {
        let x = t64(&[4], vec![1., 2., 3., 4.]);
        assert_eq!(x.cumsum_exclusive(0).to_vec(), vec![0., 1., 3., 6.]);
    }

    #[test]
    fn permute_roundtrip() {
        let x = t64(&[2, 3, 4], (0..24).map(|v| v as f64).collect());
        let y = x.permute(&[2, 0, 1]);
        assert_eq!(y.shape(), &[4, 2, 3]);
        let z = y.permute(&[1, 2, 0]);
        assert_eq!(z.to_vec(), x.to_vec());
    }

    #[test]
    fn concat_slice_inverse() {
        let a = t64(&[2, 2], vec![1., 2., 3., 4.]);
        let b = t64(&[2, 3], vec![5., 6., 7., 8., 9., 10.]);
        let c = Tensor::concat(&[&a, &b], 1);
        assert_eq!(c.shape(), &[2, 5]);
        assert_eq!(c.slice(1, 0, 2).to_vec(), a.to_vec());
        assert_eq!(c.slice(1, 2, 3).to_vec(), b.to_vec());
    }

    #[test]
    fn index_select_gathers_and_scatters() {
        let x = t64(&[3, 2], vec![1., 2., 3., 4., 5., 6.]);
        let y = x.index_select(0, &[2, 0, 2]);
        assert_eq!(y.to_vec(), vec![5., 6., 1., 2., 5., 6.]);
        y.sum_all().backward();
        assert_eq!(x.grad().unwrap(), vec![1., 1., 0., 0., 2., 2.]);
    }

    #[test]
    fn sum_axis_shapes() {
        let x = t64(&[2, 3, 2], (0..12).map(|v| v as f64).collect());
        assert_eq!(x.sum_axis(1, true).shape(), &[2, 1, 2]);
        assert_eq!(x.sum_axis(1, false).shape(), &[2, 2]);
        assert_eq!(x.sum_axis(1, false).to_vec(), vec![6., 9., 24., 27.]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = t64(&[5], vec![1., 2., 3., 4., 5.]);
        x.sum_all().backward();
        assert_eq!(x.grad().unwrap(), vec![1.0; 5]);
    }

    #[test]
    fn backward_of_square_sum_is_twice_input() {
        let x = t64(&[3], vec![1., -2., 3.]);
        x.mul(&x).sum_all().backward();
        assert_eq!(x.grad().unwrap(), vec![2., -4., 6.]);
    }

    #[test]
    fn zero_pad_and_slice_are_inverse() {
        let x = t64(&[2, 2], vec![1., 2., 3., 4.]);
        let p = x.zero_pad(1, 1, 2);
        assert_eq!(p.shape(), &[2, 5]);
        assert_eq!(p.to_vec(), vec![0., 1., 2., 0., 0., 0., 3., 4., 0., 0.]);
        assert_eq!(p.slice(1, 1, 2).to_vec(), x.to_vec());
    }
}
