//! Cross-correlation with zero padding, over three spatial axes. A trailing
//! unit axis realizes plain 2-D convolution; kernel shapes (1,3,3), (3,1,1)
//! and (3,3,3) cover the factorized and full 3-D decoder variants.

use super::Tensor;
use crate::scalar::Scalar;

fn out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Valid output range [lo, hi) such that `o*stride + shift` stays in
/// [0, in_len) — hoists the bounds check out of inner loops.
fn conv_range(shift: isize, stride: usize, in_len: usize, out_lim: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if shift >= 0 {
        0
    } else {
        (((-shift) + s - 1) / s) as usize
    };
    let max_i = in_len as isize - 1 - shift;
    if max_i < 0 {
        return (0, 0);
    }
    let hi = ((max_i / s) + 1).min(out_lim as isize) as usize;
    (lo.min(hi), hi)
}

impl<T: Scalar> Tensor<T> {
    /// input (Cin, A, B, C) ∗ kernel (Cout, Cin, kA, kB, kC) -> (Cout, ...),
    /// output extent = floor((in + 2·pad − k)/stride) + 1 per axis.
    pub fn conv3d(&self, kernel: &Tensor<T>, stride: [usize; 3], pad: [usize; 3]) -> Tensor<T> {
        let ish = self.shape().to_vec();
        let ksh = kernel.shape().to_vec();
        assert!(
            ish.len() == 4 && ksh.len() == 5,
            "conv3d: want input rank 4 and kernel rank 5, got {ish:?} and {ksh:?}"
        );
        assert_eq!(
            ish[0], ksh[1],
            "conv3d: input channels {:?} vs kernel {:?}",
            ish, ksh
        );
        assert!(stride.iter().all(|&s| s >= 1), "conv3d: stride must be >= 1");
        for ax in 0..3 {
            assert!(
                ksh[2 + ax] <= ish[1 + ax] + 2 * pad[ax],
                "conv3d: kernel {ksh:?} larger than padded input {ish:?} on axis {ax}"
            );
        }
        let (cin, a, b, c) = (ish[0], ish[1], ish[2], ish[3]);
        let cout = ksh[0];
        let (ka, kb, kc) = (ksh[2], ksh[3], ksh[4]);
        let (oa, ob, oc) = (
            out_len(a, ka, stride[0], pad[0]),
            out_len(b, kb, stride[1], pad[1]),
            out_len(c, kc, stride[2], pad[2]),
        );
        let mut out = vec![T::ZERO; cout * oa * ob * oc];
        {
            let x = self.data();
            let w = kernel.data();
            for co in 0..cout {
                for ci in 0..cin {
                    for fa in 0..ka {
                        let sha = fa as isize - pad[0] as isize;
                        let (la, ha) = conv_range(sha, stride[0], a, oa);
                        for fb in 0..kb {
                            let shb = fb as isize - pad[1] as isize;
                            let (lb, hb) = conv_range(shb, stride[1], b, ob);
                            for fc in 0..kc {
                                let shc = fc as isize - pad[2] as isize;
                                let (lc, hc) = conv_range(shc, stride[2], c, oc);
                                let wv = w[(((co * cin + ci) * ka + fa) * kb + fb) * kc + fc];
                                for ya in la..ha {
                                    let ia = (ya * stride[0]) as isize + sha;
                                    for yb in lb..hb {
                                        let ib = (yb * stride[1]) as isize + shb;
                                        let in_base =
                                            ((ci * a + ia as usize) * b + ib as usize) * c;
                                        let out_base = ((co * oa + ya) * ob + yb) * oc;
                                        for yc in lc..hc {
                                            let ic = ((yc * stride[2]) as isize + shc) as usize;
                                            out[out_base + yc] += wv * x[in_base + ic];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let osh = vec![cout, oa, ob, oc];
        Tensor::from_op(
            osh,
            out,
            vec![self.clone(), kernel.clone()],
            move |go, ps| {
                let x = ps[0].data();
                let w = ps[1].data();
                let mut dx = vec![T::ZERO; cin * a * b * c];
                let mut dw = vec![T::ZERO; cout * cin * ka * kb * kc];
                for co in 0..cout {
                    for ci in 0..cin {
                        for fa in 0..ka {
                            let sha = fa as isize - pad[0] as isize;
                            let (la, ha) = conv_range(sha, stride[0], a, oa);
                            for fb in 0..kb {
                                let shb = fb as isize - pad[1] as isize;
                                let (lb, hb) = conv_range(shb, stride[1], b, ob);
                                for fc in 0..kc {
                                    let shc = fc as isize - pad[2] as isize;
                                    let (lc, hc) = conv_range(shc, stride[2], c, oc);
                                    let widx =
                                        (((co * cin + ci) * ka + fa) * kb + fb) * kc + fc;
                                    let wv = w[widx];
                                    let mut wacc = T::ZERO;
                                    for ya in la..ha {
                                        let ia = ((ya * stride[0]) as isize + sha) as usize;
                                        for yb in lb..hb {
                                            let ib = ((yb * stride[1]) as isize + shb) as usize;
                                            let in_base = ((ci * a + ia) * b + ib) * c;
                                            let out_base = ((co * oa + ya) * ob + yb) * oc;
                                            for yc in lc..hc {
                                                let ic = ((yc * stride[2]) as isize + shc)
                                                    as usize;
                                                let g = go[out_base + yc];
                                                wacc += g * x[in_base + ic];
                                                dx[in_base + ic] += g * wv;
                                            }
                                        }
                                    }
                                    dw[widx] += wacc;
                                }
                            }
                        }
                    }
                }
                drop(x);
                drop(w);
                ps[0].accumulate_grad(&dx);
                ps[1].accumulate_grad(&dw);
            },
        )
    }

    /// 2-D convenience: input (C,H,W), kernel (Cout,Cin,kh,kw).
    pub fn conv2d(&self, kernel: &Tensor<T>, stride: usize, pad: usize) -> Tensor<T> {
        let ish = self.shape().to_vec();
        let ksh = kernel.shape().to_vec();
        assert!(
            ish.len() == 3 && ksh.len() == 4,
            "conv2d: want input rank 3 and kernel rank 4, got {ish:?} and {ksh:?}"
        );
        let x = self.reshape(&[ish[0], ish[1], ish[2], 1]);
        let k = kernel.reshape(&[ksh[0], ksh[1], ksh[2], ksh[3], 1]);
        let y = x.conv3d(&k, [stride, stride, 1], [pad, pad, 0]);
        let ysh = y.shape().to_vec();
        y.reshape(&[ysh[0], ysh[1], ysh[2]])
    }

    /// Nearest-neighbor 2x upsampling of all three spatial axes of (C,A,B,D).
    pub fn upsample_nearest2(&self) -> Tensor<T> {
        let ish = self.shape().to_vec();
        assert_eq!(ish.len(), 4, "upsample_nearest2: want rank 4, got {ish:?}");
        let (ch, a, b, d) = (ish[0], ish[1], ish[2], ish[3]);
        let (a2, b2, d2) = (2 * a, 2 * b, 2 * d);
        let mut out = vec![T::ZERO; ch * a2 * b2 * d2];
        {
            let x = self.data();
            for cc in 0..ch {
                for ia in 0..a2 {
                    for ib in 0..b2 {
                        let src_base = ((cc * a + ia / 2) * b + ib / 2) * d;
                        let dst_base = ((cc * a2 + ia) * b2 + ib) * d2;
                        for id in 0..d2 {
                            out[dst_base + id] = x[src_base + id / 2];
                        }
                    }
                }
            }
        }
        Tensor::from_op(
            vec![ch, a2, b2, d2],
            out,
            vec![self.clone()],
            move |go, ps| {
                let mut dg = vec![T::ZERO; ch * a * b * d];
                for cc in 0..ch {
                    for ia in 0..a2 {
                        for ib in 0..b2 {
                            let src_base = ((cc * a + ia / 2) * b + ib / 2) * d;
                            let dst_base = ((cc * a2 + ia) * b2 + ib) * d2;
                            for id in 0..d2 {
                                dg[src_base + id / 2] += go[dst_base + id];
                            }
                        }
                    }
                }
                ps[0].accumulate_grad(&dg);
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn identity_kernel_passthrough() {
        let x = Tensor::<f64>::leaf(&[1, 2, 2, 2], (1..=8).map(|v| v as f64).collect(), false);
        let k = Tensor::<f64>::leaf(&[1, 1, 1, 1, 1], vec![1.0], false);
        let y = x.conv3d(&k, [1, 1, 1], [0, 0, 0]);
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn box_filter_counts_neighbors() {
        // all-ones 3x3x1 kernel on a constant-1 (1,4,4,1) input, pad (1,1,0):
        // interior 9, corners 4.
        let x = Tensor::<f64>::leaf(&[1, 4, 4, 1], vec![1.0; 16], false);
        let k = Tensor::<f64>::leaf(&[1, 1, 3, 3, 1], vec![1.0; 9], false);
        let y = x.conv3d(&k, [1, 1, 1], [1, 1, 0]);
        let v = y.to_vec();
        assert_eq!(y.shape(), &[1, 4, 4, 1]);
        assert_eq!(v[0], 4.0); // corner
        assert_eq!(v[5], 9.0); // interior
        assert_eq!(v[15], 4.0); // corner
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = RngStream::new(11);
        let (cin, a, b, c) = (2, 5, 4, 3);
        let (cout, ka, kb, kc) = (3, 3, 3, 1);
        let (stride, pad) = ([2usize, 1, 1], [1usize, 1, 0]);
        let x_data: Vec<f64> = (0..cin * a * b * c).map(|_| rng.normal()).collect();
        let k_data: Vec<f64> = (0..cout * cin * ka * kb * kc).map(|_| rng.normal()).collect();

        let (oa, ob, oc) = (
            (a + 2 * pad[0] - ka) / stride[0] + 1,
            (b + 2 * pad[1] - kb) / stride[1] + 1,
            (c + 2 * pad[2] - kc) / stride[2] + 1,
        );
        // independent nested-loop oracle with explicit zero padding
        let mut expect = vec![0.0f64; cout * oa * ob * oc];
        for co in 0..cout {
            for ya in 0..oa {
                for yb in 0..ob {
                    for yc in 0..oc {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for fa in 0..ka {
                                for fb in 0..kb {
                                    for fc in 0..kc {
                                        let ia = (ya * stride[0] + fa) as isize - pad[0] as isize;
                                        let ib = (yb * stride[1] + fb) as isize - pad[1] as isize;
                                        let ic = (yc * stride[2] + fc) as isize - pad[2] as isize;
                                        if ia < 0 || ib < 0 || ic < 0 {
                                            continue;
                                        }
                                        let (ia, ib, ic) = (ia as usize, ib as usize, ic as usize);
                                        if ia >= a || ib >= b || ic >= c {
                                            continue;
                                        }
                                        acc += x_data[((ci * a + ia) * b + ib) * c + ic]
                                            * k_data[(((co * cin + ci) * ka + fa) * kb + fb) * kc
                                                + fc];
                                    }
                                }
                            }
                        }
                        expect[((co * oa + ya) * ob + yb) * oc + yc] = acc;
                    }
                }
            }
        }
        let x = Tensor::leaf(&[cin, a, b, c], x_data, false);
        let k = Tensor::leaf(&[cout, cin, ka, kb, kc], k_data, false);
        let got = x.conv3d(&k, stride, pad);
        assert_eq!(got.shape(), &[cout, oa, ob, oc]);
        for (g, e) in got.to_vec().iter().zip(&expect) {
            assert!((g - e).abs() < 1e-10, "{g} vs {e}");
        }
    }

    #[test]
    #[should_panic(expected = "larger than padded input")]
    fn oversized_kernel_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2, 1]);
        let k = Tensor::<f64>::zeros(&[1, 1, 5, 1, 1]);
        let _ = x.conv3d(&k, [1, 1, 1], [1, 0, 0]);
    }

    #[test]
    fn upsample_nearest_doubles_axes() {
        let x = Tensor::<f64>::leaf(&[1, 1, 2, 2], vec![1., 2., 3., 4.], false);
        let y = x.upsample_nearest2();
        assert_eq!(y.shape(), &[1, 2, 4, 4]);
        let v = y.to_vec();
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 1.0);
        assert_eq!(v[2], 2.0);
    }
}
