//! Differentiable sampling of feature maps / fields at continuous
//! coordinates. Coordinates are plain f64 (never learned); gradients flow
//! into the sampled map only. Out-of-bounds samples produce zeros plus a
//! per-sample validity flag instead of clamping, so the volume builder can
//! tell which views actually observed a point.

use super::Tensor;
use crate::scalar::Scalar;

/// Corner weights for 1-D linear interpolation at coordinate `u` within
/// [0, len-1]; returns (i0, i1, w1) with value = (1-w1)*x[i0] + w1*x[i1].
#[inline]
fn lerp_cell(u: f64, len: usize) -> (usize, usize, f64) {
    debug_assert!(len >= 1);
    if len == 1 {
        return (0, 0, 0.0);
    }
    let i0 = (u.floor() as usize).min(len - 2);
    let w1 = u - i0 as f64;
    (i0, i0 + 1, w1)
}

#[inline]
fn in_range(u: f64, len: usize) -> bool {
    u >= 0.0 && u <= (len - 1) as f64
}

impl<T: Scalar> Tensor<T> {
    /// Bilinear sampling of a (C,H,W) map at `coords` given as (x, y) in
    /// index space (integer coordinates hit pixels exactly). Returns an
    /// (N,C) tensor plus a validity flag per sample; invalid rows are zero.
    pub fn grid_sample_bilinear(&self, coords: &[[f64; 2]]) -> (Tensor<T>, Vec<bool>) {
        let sh = self.shape();
        assert_eq!(sh.len(), 3, "grid_sample_bilinear: want (C,H,W), got {sh:?}");
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let n = coords.len();
        let mut out = vec![T::ZERO; n * c];
        let mut valid = vec![false; n];
        // saved per-sample taps: (corner offsets, weights) for backward
        let mut taps: Vec<[(usize, f64); 4]> = Vec::with_capacity(n);
        {
            let x = self.data();
            for (s, &[u, v]) in coords.iter().enumerate() {
                if !(in_range(u, w) && in_range(v, h)) || u.is_nan() || v.is_nan() {
                    taps.push([(0, 0.0); 4]);
                    continue;
                }
                valid[s] = true;
                let (x0, x1, fx) = lerp_cell(u, w);
                let (y0, y1, fy) = lerp_cell(v, h);
                let w00 = (1.0 - fx) * (1.0 - fy);
                let w01 = fx * (1.0 - fy);
                let w10 = (1.0 - fx) * fy;
                let w11 = fx * fy;
                let t = [
                    (y0 * w + x0, w00),
                    (y0 * w + x1, w01),
                    (y1 * w + x0, w10),
                    (y1 * w + x1, w11),
                ];
                taps.push(t);
                for ch in 0..c {
                    let plane = ch * h * w;
                    let mut acc = T::ZERO;
                    for &(off, wt) in &t {
                        acc += x[plane + off] * T::from_f64(wt);
                    }
                    out[s * c + ch] = acc;
                }
            }
        }
        let valid_b = valid.clone();
        let t = Tensor::from_op(vec![n, c], out, vec![self.clone()], move |go, ps| {
            let mut dg = vec![T::ZERO; c * h * w];
            for (s, tap) in taps.iter().enumerate() {
                if !valid_b[s] {
                    continue;
                }
                for ch in 0..c {
                    let g = go[s * c + ch];
                    let plane = ch * h * w;
                    for &(off, wt) in tap {
                        dg[plane + off] += g * T::from_f64(wt);
                    }
                }
            }
            ps[0].accumulate_grad(&dg);
        });
        (t, valid)
    }

    /// Trilinear sampling of a (C,D,H,W) field at (x, y, z) index-space
    /// coordinates (z indexes the D axis). Zeros + validity for points
    /// outside the grid.
    pub fn grid_sample_trilinear(&self, coords: &[[f64; 3]]) -> (Tensor<T>, Vec<bool>) {
        let sh = self.shape();
        assert_eq!(sh.len(), 4, "grid_sample_trilinear: want (C,D,H,W), got {sh:?}");
        let (c, d, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let n = coords.len();
        let mut out = vec![T::ZERO; n * c];
        let mut valid = vec![false; n];
        let mut taps: Vec<[(usize, f64); 8]> = Vec::with_capacity(n);
        {
            let x = self.data();
            for (s, &[u, v, z]) in coords.iter().enumerate() {
                let bad = !(in_range(u, w) && in_range(v, h) && in_range(z, d))
                    || u.is_nan()
                    || v.is_nan()
                    || z.is_nan();
                if bad {
                    taps.push([(0, 0.0); 8]);
                    continue;
                }
                valid[s] = true;
                let (x0, x1, fx) = lerp_cell(u, w);
                let (y0, y1, fy) = lerp_cell(v, h);
                let (z0, z1, fz) = lerp_cell(z, d);
                let mut t = [(0usize, 0f64); 8];
                let mut i = 0;
                for (zz, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                    for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                        for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                            t[i] = ((zz * h + yy) * w + xx, wz * wy * wx);
                            i += 1;
                        }
                    }
                }
                taps.push(t);
                for ch in 0..c {
                    let vol = ch * d * h * w;
                    let mut acc = T::ZERO;
                    for &(off, wt) in &t {
                        acc += x[vol + off] * T::from_f64(wt);
                    }
                    out[s * c + ch] = acc;
                }
            }
        }
        let valid_b = valid.clone();
        let t = Tensor::from_op(vec![n, c], out, vec![self.clone()], move |go, ps| {
            let mut dg = vec![T::ZERO; c * d * h * w];
            for (s, tap) in taps.iter().enumerate() {
                if !valid_b[s] {
                    continue;
                }
                for ch in 0..c {
                    let g = go[s * c + ch];
                    let vol = ch * d * h * w;
                    for &(off, wt) in tap {
                        dg[vol + off] += g * T::from_f64(wt);
                    }
                }
            }
            ps[0].accumulate_grad(&dg);
        });
        (t, valid)
    }
}
