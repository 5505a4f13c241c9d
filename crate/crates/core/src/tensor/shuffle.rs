//! Depth-to-space rearrangement (sub-pixel upsampling) and its inverse.
//! Channels are the leading axis; the shuffle acts on the last two axes, so
//! (r²C, h, w) and (r²C, D, h, w) both work, with D passed through.

use super::Tensor;
use crate::scalar::Scalar;

fn shuffle_dims(shape: &[usize], r: usize, inverse: bool) -> (usize, usize, usize, usize) {
    assert!(
        shape.len() == 3 || shape.len() == 4,
        "pixel shuffle: want rank 3 or 4, got {shape:?}"
    );
    assert!(r >= 1, "pixel shuffle: r must be >= 1");
    let ch = shape[0];
    let mid = if shape.len() == 4 { shape[1] } else { 1 };
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if !inverse {
        assert!(
            ch % (r * r) == 0,
            "pixel_shuffle: channels {ch} not divisible by r^2 = {}",
            r * r
        );
    } else {
        assert!(
            h % r == 0 && w % r == 0,
            "pixel_unshuffle: spatial dims {h}x{w} not divisible by r = {r}"
        );
    }
    (ch, mid, h, w)
}

/// dst flat index for shuffle; kept in one place so forward and backward use
/// the same mapping: out channel c, in channel c*r² + dy*r + dx.
#[inline]
fn map_index(
    c_out: usize,
    m: usize,
    y: usize,
    x: usize,
    dy: usize,
    dx: usize,
    r: usize,
    mid: usize,
    h: usize,
    w: usize,
) -> (usize, usize) {
    let cin = (c_out * r + dy) * r + dx;
    let src = ((cin * mid + m) * h + y) * w + x;
    let dst_h = h * r;
    let dst_w = w * r;
    let dst = ((c_out * mid + m) * dst_h + (y * r + dy)) * dst_w + (x * r + dx);
    (src, dst)
}

impl<T: Scalar> Tensor<T> {
    /// (r²·C, [D,] h, w) -> (C, [D,] r·h, r·w).
    pub fn pixel_shuffle(&self, r: usize) -> Tensor<T> {
        let shape = self.shape().to_vec();
        let (ch, mid, h, w) = shuffle_dims(&shape, r, false);
        let c_out = ch / (r * r);
        let mut out = vec![T::ZERO; self.numel()];
        {
            let x = self.data();
            for co in 0..c_out {
                for m in 0..mid {
                    for y in 0..h {
                        for yy in 0..r {
                            for xx in 0..w {
                                for dx in 0..r {
                                    let (src, dst) = map_index(co, m, y, xx, yy, dx, r, mid, h, w);
                                    out[dst] = x[src];
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        let rank = out_shape.len();
        out_shape[0] = c_out;
        out_shape[rank - 2] = h * r;
        out_shape[rank - 1] = w * r;
        Tensor::from_op(out_shape, out, vec![self.clone()], move |go, ps| {
            let mut dg = vec![T::ZERO; go.len()];
            for co in 0..c_out {
                for m in 0..mid {
                    for y in 0..h {
                        for yy in 0..r {
                            for xx in 0..w {
                                for dx in 0..r {
                                    let (src, dst) = map_index(co, m, y, xx, yy, dx, r, mid, h, w);
                                    dg[src] = go[dst];
                                }
                            }
                        }
                    }
                }
            }
            ps[0].accumulate_grad(&dg);
        })
    }

    /// Exact inverse of `pixel_shuffle`.
    pub fn pixel_unshuffle(&self, r: usize) -> Tensor<T> {
        let shape = self.shape().to_vec();
        let (ch, mid, hr, wr) = shuffle_dims(&shape, r, true);
        let (h, w) = (hr / r, wr / r);
        let mut out = vec![T::ZERO; self.numel()];
        {
            let x = self.data();
            for co in 0..ch {
                for m in 0..mid {
                    for y in 0..h {
                        for yy in 0..r {
                            for xx in 0..w {
                                for dx in 0..r {
                                    let (dst, src) = map_index(co, m, y, xx, yy, dx, r, mid, h, w);
                                    out[dst] = x[src];
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        let rank = out_shape.len();
        out_shape[0] = ch * r * r;
        out_shape[rank - 2] = h;
        out_shape[rank - 1] = w;
        Tensor::from_op(out_shape, out, vec![self.clone()], move |go, ps| {
            let mut dg = vec![T::ZERO; go.len()];
            for co in 0..ch {
                for m in 0..mid {
                    for y in 0..h {
                        for yy in 0..r {
                            for xx in 0..w {
                                for dx in 0..r {
                                    let (dst, src) = map_index(co, m, y, xx, yy, dx, r, mid, h, w);
                                    dg[src] = go[dst];
                                }
                            }
                        }
                    }
                }
            }
            ps[0].accumulate_grad(&dg);
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn shape_contract_r8() {
        let x = Tensor::<f64>::zeros(&[64 * 3, 2, 2]);
        let y = x.pixel_shuffle(8);
        assert_eq!(y.shape(), &[3, 16, 16]);
    }

    #[test]
    fn constant_input_stays_constant() {
        let x = Tensor::<f64>::full(&[4, 3, 3], 0.7);
        let y = x.pixel_shuffle(2);
        assert_eq!(y.shape(), &[1, 6, 6]);
        assert!(y.to_vec().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn shuffle_unshuffle_is_identity_bitexact() {
        let mut rng = RngStream::new(5);
        let data: Vec<f64> = (0..4 * 2 * 3 * 5).map(|_| rng.normal()).collect();
        let x = Tensor::leaf(&[4, 2, 3, 5], data.clone(), false);
        let y = x.pixel_shuffle(2).pixel_unshuffle(2);
        let back = y.to_vec();
        assert_eq!(back.len(), data.len());
        for (a, b) in back.iter().zip(&data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    #[should_panic(expected = "not divisible by r^2")]
    fn channel_mismatch_rejected() {
        let x = Tensor::<f64>::zeros(&[6, 2, 2]);
        let _ = x.pixel_shuffle(2);
    }
}
