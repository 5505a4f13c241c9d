//! Matrix products. `bmm_sorted` accumulates its inner dimension with a
//! sorted reduction, for contractions over cross-view token axes.

use super::{sorted_sum, Tensor};
use crate::scalar::Scalar;

fn mm_into<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    // ikj order: contiguous runs over the output row and b row.
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::ZERO {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn mm_at_b<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    // aᵀ(k×m) · b(... wait: computes aᵀ·b where a is (m,k): result (k,n)
    let mut out = vec![T::ZERO; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::ZERO {
                continue;
            }
            let o = &mut out[p * n..(p + 1) * n];
            let b_row = &b[i * n..(i + 1) * n];
            for (ov, &bv) in o.iter_mut().zip(b_row) {
                *ov += av * bv;
            }
        }
    }
    out
}

fn mm_a_bt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    // a(m×n) · bᵀ where b is (k,n): result (m,k)
    let mut out = vec![T::ZERO; m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let b_row = &b[j * n..(j + 1) * n];
            let mut acc = T::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * k + j] = acc;
        }
    }
    out
}

impl<T: Scalar> Tensor<T> {
    /// 2-D matrix product: (m,k) x (k,n) -> (m,n).
    pub fn matmul(&self, rhs: &Tensor<T>) -> Tensor<T> {
        let (a_sh, b_sh) = (self.shape(), rhs.shape());
        assert!(
            a_sh.len() == 2 && b_sh.len() == 2 && a_sh[1] == b_sh[0],
            "matmul: incompatible shapes {a_sh:?} x {b_sh:?}"
        );
        let (m, k, n) = (a_sh[0], a_sh[1], b_sh[1]);
        let mut out = vec![T::ZERO; m * n];
        mm_into(&mut out, &self.data(), &rhs.data(), m, k, n);
        Tensor::from_op(vec![m, n], out, vec![self.clone(), rhs.clone()], move |go, ps| {
            let (a, b) = (ps[0].data(), ps[1].data());
            // dA = dC · Bᵀ ; dB = Aᵀ · dC
            let da = mm_a_bt(go, &b, m, n, k);
            let db = mm_at_b(&a, go, m, k, n);
            drop(a);
            drop(b);
            ps[0].accumulate_grad(&da);
            ps[1].accumulate_grad(&db);
        })
    }

    /// Batched matmul: (B,m,k) x (B,k,n) -> (B,m,n).
    pub fn bmm(&self, rhs: &Tensor<T>) -> Tensor<T> {
        self.bmm_impl(rhs, false)
    }

    /// Batched matmul whose inner contraction uses sorted accumulation.
    pub fn bmm_sorted(&self, rhs: &Tensor<T>) -> Tensor<T> {
        self.bmm_impl(rhs, true)
    }

    fn bmm_impl(&self, rhs: &Tensor<T>, sorted: bool) -> Tensor<T> {
        let (a_sh, b_sh) = (self.shape(), rhs.shape());
        assert!(
            a_sh.len() == 3 && b_sh.len() == 3 && a_sh[0] == b_sh[0] && a_sh[2] == b_sh[1],
            "bmm: incompatible shapes {a_sh:?} x {b_sh:?}"
        );
        let (bt, m, k, n) = (a_sh[0], a_sh[1], a_sh[2], b_sh[2]);
        let mut out = vec![T::ZERO; bt * m * n];
        {
            let (a, b) = (self.data(), rhs.data());
            if sorted {
                let mut scratch = vec![T::ZERO; k];
                for bi in 0..bt {
                    let ab = &a[bi * m * k..];
                    let bb = &b[bi * k * n..];
                    for i in 0..m {
                        for j in 0..n {
                            for (p, s) in scratch.iter_mut().enumerate() {
                                *s = ab[i * k + p] * bb[p * n + j];
                            }
                            out[(bi * m + i) * n + j] = sorted_sum(&mut scratch);
                        }
                    }
                }
            } else {
                for bi in 0..bt {
                    mm_into(
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        &a[bi * m * k..(bi + 1) * m * k],
                        &b[bi * k * n..(bi + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        Tensor::from_op(
            vec![bt, m, n],
            out,
            vec![self.clone(), rhs.clone()],
            move |go, ps| {
                let (a, b) = (ps[0].data(), ps[1].data());
                let mut da = vec![T::ZERO; bt * m * k];
                let mut db = vec![T::ZERO; bt * k * n];
                for bi in 0..bt {
                    let gb = &go[bi * m * n..(bi + 1) * m * n];
                    let ab = &a[bi * m * k..(bi + 1) * m * k];
                    let bb = &b[bi * k * n..(bi + 1) * k * n];
                    da[bi * m * k..(bi + 1) * m * k].copy_from_slice(&mm_a_bt(gb, bb, m, n, k));
                    db[bi * k * n..(bi + 1) * k * n].copy_from_slice(&mm_at_b(ab, gb, m, k, n));
                }
                drop(a);
                drop(b);
                ps[0].accumulate_grad(&da);
                ps[1].accumulate_grad(&db);
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn identity_matmul() {
        let i2 = Tensor::<f64>::leaf(&[2, 2], vec![1., 0., 0., 1.], false);
        let a = Tensor::<f64>::leaf(&[2, 2], vec![1., 2., 3., 4.], false);
        assert_eq!(i2.matmul(&a).to_vec(), vec![1., 2., 3., 4.]);
    }

    #[test]
    fn projector_selects_row() {
        let p = Tensor::<f64>::leaf(&[2, 2], vec![1., 0., 0., 0.], false);
        let a = Tensor::<f64>::leaf(&[2, 2], vec![5., 6., 7., 8.], false);
        assert_eq!(p.matmul(&a).to_vec(), vec![5., 6., 0., 0.]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = RngStream::new(7);
        let (m, k, n) = (4, 5, 3);
        let a_data: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
        let b_data: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
        // independent naive oracle
        let mut expect = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a_data[i * k + p] * b_data[p * n + j];
                }
                expect[i * n + j] = s;
            }
        }
        let a = Tensor::leaf(&[m, k], a_data, false);
        let b = Tensor::leaf(&[k, n], b_data, false);
        let got = a.matmul(&b).to_vec();
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    #[should_panic(expected = "incompatible shapes [2, 3] x [2, 3]")]
    fn matmul_shape_mismatch_names_both() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let _ = a.matmul(&b);
    }

    #[test]
    fn bmm_sorted_matches_bmm_values() {
        let mut rng = RngStream::new(3);
        let a = Tensor::leaf(&[2, 3, 4], (0..24).map(|_| rng.normal()).collect(), false);
        let b = Tensor::leaf(&[2, 4, 2], (0..16).map(|_| rng.normal()).collect(), false);
        let x = a.bmm(&b).to_vec();
        let y = a.bmm_sorted(&b).to_vec();
        for (u, v) in x.iter().zip(&y) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
