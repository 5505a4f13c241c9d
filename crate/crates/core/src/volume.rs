//! Frustum volume construction: for every (ray, depth) cell of the anchor
//! view's frustum, gather per-view window colors, multi-scale features and
//! pair-wise group cosine similarities, aggregate them with learned weights
//! and project to the volume channel width.
//!
//! All reductions whose index set is views or view pairs use sorted
//! accumulation, making the volume bit-exactly invariant to input view
//! permutation.

use crate::config::Elements;
use crate::encoder::FeaturePyramid;
use crate::error::Error;
use crate::geometry::{v_normalize, v_sub, CameraView, Depths, RayBundle};
use crate::nn::{Activation, Linear, Params};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

pub struct FrustumVolume<T: Scalar> {
    /// (C, D, h, w)
    pub z: Tensor<T>,
    pub depths: Depths,
    /// per-view in-frustum mask, (K, D, h, w) flattened view-major
    pub validity: Vec<bool>,
    pub k: usize,
    pub subsample: usize,
    pub height: usize,
    pub width: usize,
}

/// Lexicographic (i < j) pairs; P = K(K-1)/2.
pub fn pair_indices(k: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(k * (k.saturating_sub(1)) / 2);
    for i in 0..k {
        for j in i + 1..k {
            out.push((i, j));
        }
    }
    out
}

/// Learned pieces of the volume builder (one instance per stage).
pub struct VolumeNet<T: Scalar> {
    pub agg_fc1: Linear<T>,
    pub agg_fc2: Linear<T>,
    /// entropy-to-logit affine, shared across pairs
    pub vis_a: Tensor<T>,
    pub vis_b: Tensor<T>,
    pub proj: Linear<T>,
    pub window: usize,
    pub groups: usize,
    pub elements: Elements,
    pub feature_dim: usize,
    pub channels: usize,
    pub act: Activation,
}

impl<T: Scalar> VolumeNet<T> {
    pub fn new(
        feature_dim: usize,
        window: usize,
        groups: usize,
        elements: Elements,
        channels: usize,
        hidden: usize,
        act: Activation,
        rng: &mut RngStream,
    ) -> Self {
        assert!(window % 2 == 1, "window must be odd, got {window}");
        assert!(
            feature_dim % groups == 0,
            "groups {groups} must divide feature dim {feature_dim}"
        );
        let mut elem = 0usize;
        if elements.color {
            elem += 3 * window * window;
        }
        if elements.feature {
            elem += feature_dim;
        }
        if elements.cosine {
            elem += groups;
        }
        assert!(elem > 0, "no volume elements enabled");
        Self {
            agg_fc1: Linear::new(2 * feature_dim + 4, hidden, true, rng),
            agg_fc2: Linear::new(hidden, 1, true, rng),
            vis_a: Tensor::leaf(&[1], vec![T::ONE], true),
            vis_b: Tensor::leaf(&[1], vec![T::ZERO], true),
            proj: Linear::new(elem, channels, true, rng),
            window,
            groups,
            elements,
            feature_dim,
            channels,
            act,
        }
    }

    pub fn element_width(&self) -> usize {
        self.proj.in_dim()
    }

    pub fn params(&self, prefix: &str, out: &mut Params<T>) {
        self.agg_fc1.params(&format!("{prefix}.agg_fc1"), out);
        self.agg_fc2.params(&format!("{prefix}.agg_fc2"), out);
        out.push((format!("{prefix}.vis_a"), self.vis_a.clone()));
        out.push((format!("{prefix}.vis_b"), self.vis_b.clone()));
        self.proj.params(&format!("{prefix}.proj"), out);
    }

    /// Entropy-based pair weights for one ray: s_pairs (P, G, D) -> (P).
    pub fn visibility_weights(&self, s_pairs: &Tensor<T>, pair_valid: &[bool]) -> Tensor<T> {
        let sh = s_pairs.shape().to_vec();
        assert_eq!(sh.len(), 3, "visibility_weights: want (P,G,D)");
        let (p, g, d) = (sh[0], sh[1], sh[2]);
        assert!(d >= 2, "visibility_weights: D must be >= 2");
        let batched = s_pairs.reshape(&[p, g, d, 1]);
        let w = self.pair_weights_batched(&batched, pair_valid, 1);
        w.reshape(&[p])
    }

    /// s_pairs (P, G, D, R), ray-level pair validity (P*R view-major) ->
    /// weights (P, R), nonnegative, summing to 1 over valid pairs.
    fn pair_weights_batched(&self, s_pairs: &Tensor<T>, pair_valid: &[bool], rays: usize) -> Tensor<T> {
        let sh = s_pairs.shape().to_vec();
        let (p, _g, _d, r) = (sh[0], sh[1], sh[2], sh[3]);
        assert_eq!(r, rays);
        assert_eq!(pair_valid.len(), p * rays);
        let score = s_pairs.mean_axis(1, false); // (P, D, R)
        let prob = score.softmax(1);
        let ent = prob
            .mul(&prob.add_scalar(1e-12).ln())
            .sum_axis(1, false)
            .neg(); // (P, R)
        let neg_ent = ent.neg();
        let logits = neg_ent.mul(&self.vis_a).add(&self.vis_b);
        let mask: Vec<T> = pair_valid
            .iter()
            .map(|&v| if v { T::ZERO } else { T::from_f64(-1e30) })
            .collect();
        let masked = logits.add(&Tensor::constant(&[p, rays], mask));
        masked.softmax_sorted(0)
    }
}

/// Bilinear color samples on the win x win unit-spaced grid around image
/// point (u, v); returns the 3*win^2 vector (offsets row-major, rgb per
/// offset) and a validity flag tied to the window center.
pub fn sample_color_window<T: Scalar>(
    image: &Tensor<T>,
    u: f64,
    v: f64,
    win: usize,
) -> Result<(Tensor<T>, bool)> {
    if win % 2 == 0 {
        return Err(Error::Contract(format!("sample_color_window: even window {win}")));
    }
    let sh = image.shape();
    let (h, w) = (sh[1], sh[2]);
    let r = (win / 2) as f64;
    let mut coords = Vec::with_capacity(win * win);
    for dy in 0..win {
        for dx in 0..win {
            coords.push([u - 0.5 + dx as f64 - r, v - 0.5 + dy as f64 - r]);
        }
    }
    let center_ok =
        u - 0.5 >= 0.0 && u - 0.5 <= (w - 1) as f64 && v - 0.5 >= 0.0 && v - 0.5 <= (h - 1) as f64;
    if !center_ok {
        return Ok((Tensor::zeros(&[3 * win * win]), false));
    }
    let (samples, _valid) = image.grid_sample_bilinear(&coords); // (win^2, 3)
    Ok((samples.reshape(&[3 * win * win]), true))
}

/// Multi-scale feature vector of one world point in every view:
/// concat(f2, f4, f8, t8) sampled at the properly scaled coordinates.
pub fn sample_point_features<T: Scalar>(
    pyramids: &[FeaturePyramid<T>],
    point: crate::geometry::Vec3,
    cams: &[CameraView<T>],
) -> (Tensor<T>, Vec<bool>) {
    assert_eq!(pyramids.len(), cams.len());
    let k = cams.len();
    let mut rows: Vec<Tensor<T>> = Vec::with_capacity(k);
    let mut valid = Vec::with_capacity(k);
    for (pyr, cam) in pyramids.iter().zip(cams) {
        let proj = cam.project(point);
        let ok = !proj.behind
            && proj.u - 0.5 >= 0.0
            && proj.u - 0.5 <= (cam.width - 1) as f64
            && proj.v - 0.5 >= 0.0
            && proj.v - 0.5 <= (cam.height - 1) as f64;
        valid.push(ok);
        let mut parts: Vec<Tensor<T>> = Vec::with_capacity(4);
        for (level, scale) in [(&pyr.f2, 2.0), (&pyr.f4, 4.0), (&pyr.f8, 8.0), (&pyr.t8, 8.0)] {
            let coord = if ok {
                [[proj.u / scale - 0.5, proj.v / scale - 0.5]]
            } else {
                [[f64::NAN, f64::NAN]]
            };
            let (s, _) = level.grid_sample_bilinear(&coord); // (1, C)
            parts.push(s);
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        let m = Tensor::concat(&refs, 1); // (1, M)
        rows.push(if ok { m } else { m.scale(0.0) });
    }
    let refs: Vec<&Tensor<T>> = rows.iter().collect();
    (Tensor::concat(&refs, 0), valid)
}

/// Group-wise cosine similarities via one Gram matrix per group:
/// f (K, M) -> (P, G) in (i < j) lexicographic pair order.
pub fn pairwise_group_cosine<T: Scalar>(f: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let sh = f.shape().to_vec();
    let (k, m) = (sh[0], sh[1]);
    if k < 2 {
        return Err(Error::Contract(format!("pairwise_group_cosine: need K >= 2, got {k}")));
    }
    if m % groups != 0 {
        return Err(Error::Contract(format!(
            "pairwise_group_cosine: groups {groups} does not divide feature dim {m}"
        )));
    }
    let batched = f.reshape(&[k, m, 1]);
    let s = group_cosine_batched(&batched, groups); // (P, G, 1)
    let p = k * (k - 1) / 2;
    Ok(s.reshape(&[p, groups]))
}

/// feats (K, M, N) -> pairwise group cosines (P, G, N). Each group is
/// L2-normalized (epsilon in the denominator), then all K x K dot products
/// come from one batched matmul and the strict upper triangle is gathered.
fn group_cosine_batched<T: Scalar>(feats: &Tensor<T>, groups: usize) -> Tensor<T> {
    let sh = feats.shape().to_vec();
    let (k, m, n) = (sh[0], sh[1], sh[2]);
    let mg = m / groups;
    let g4 = feats.reshape(&[k, groups, mg, n]);
    // tiny floor inside the sqrt keeps the gradient finite at exact zeros
    let sumsq = g4.mul(&g4).sum_axis(2, true);
    let denom = sumsq.add_scalar(1e-30).sqrt().add_scalar(1e-8);
    let normed = g4.div(&denom); // (K, G, Mg, N)
    let arranged = normed.permute(&[1, 3, 0, 2]).reshape(&[groups * n, k, mg]);
    let gram = arranged.bmm(&arranged.permute(&[0, 2, 1])); // (G*N, K, K)
    let pairs = pair_indices(k);
    let idx: Vec<usize> = pairs.iter().map(|&(i, j)| i * k + j).collect();
    let picked = gram.reshape(&[groups * n, k * k]).index_select(1, &idx); // (G*N, P)
    picked
        .reshape(&[groups, n, pairs.len()])
        .permute(&[2, 0, 1]) // (P, G, N)
}

/// Learned softmax weights over views for one cell (unit test surface).
/// f (K, M), dir_feats (K, 4) -> (K).
pub fn aggregation_weights<T: Scalar>(
    net: &VolumeNet<T>,
    f: &Tensor<T>,
    dir_feats: &Tensor<T>,
    valid: &[bool],
) -> Tensor<T> {
    let k = f.shape()[0];
    let m = f.shape()[1];
    let feats = f.reshape(&[k, m, 1]);
    let dirs = dir_feats.reshape(&[k, 4, 1]);
    let w = view_weights_batched(net, &feats, &dirs, valid, 1);
    w.reshape(&[k])
}

/// feats (K, M, N), dirs (K, 4, N), validity (K*N view-major) -> (K, N).
fn view_weights_batched<T: Scalar>(
    net: &VolumeNet<T>,
    feats: &Tensor<T>,
    dirs: &Tensor<T>,
    valid: &[bool],
    n: usize,
) -> Tensor<T> {
    let sh = feats.shape().to_vec();
    let (k, m) = (sh[0], sh[1]);
    assert_eq!(valid.len(), k * n);
    let mean = feats.sum_axis_sorted(0, true).scale(1.0 / k as f64); // (1, M, N)
    let mean_tiled = mean.index_select(0, &vec![0; k]); // (K, M, N)
    let refs = [feats, &mean_tiled, dirs];
    let mlp_in = Tensor::concat(&refs, 1); // (K, 2M+4, N)
    let cin = 2 * m + 4;
    let flat = mlp_in.permute(&[1, 0, 2]).reshape(&[cin, k * n]);
    let hidden = net.act.apply(&net.agg_fc1.forward_cols(&flat));
    let logits = net.agg_fc2.forward_cols(&hidden).reshape(&[k, n]);
    let mask: Vec<T> = valid
        .iter()
        .map(|&v| if v { T::ZERO } else { T::from_f64(-1e30) })
        .collect();
    logits
        .add(&Tensor::constant(&[k, n], mask))
        .softmax_sorted(0)
}

/// Build the frustum volume for the anchor view's rays. The anchor is the
/// target camera normally, or the reference (first input) view for the
/// orientation ablation; rays must come from the same camera.
pub fn build_volume<T: Scalar>(
    net: &VolumeNet<T>,
    views: &[CameraView<T>],
    pyramids: &[FeaturePyramid<T>],
    rays: &RayBundle,
    anchor: &CameraView<T>,
) -> Result<FrustumVolume<T>> {
    let k = views.len();
    if k == 0 || pyramids.len() != k {
        return Err(Error::Contract(format!(
            "build_volume: {k} views vs {} pyramids",
            pyramids.len()
        )));
    }
    if net.elements.cosine && k < 2 {
        return Err(Error::Contract(
            "build_volume: cosine element requires K >= 2 views".into(),
        ));
    }
    let (h, w, d) = (rays.height, rays.width, rays.n_depths());
    let n = d * h * w;
    let win = net.window;
    let win2 = win * win;
    let m = net.feature_dim;
    let points = rays.points(); // (d-major, then y, x)

    // per-view projection and validity
    let mut valid = vec![false; k * n]; // view-major
    let mut uv = vec![[f64::NAN; 2]; k * n];
    for (vi, cam) in views.iter().enumerate() {
        for (pi, &p) in points.iter().enumerate() {
            let proj = cam.project(p);
            let ok = !proj.behind
                && proj.u - 0.5 >= 0.0
                && proj.u - 0.5 <= (cam.width - 1) as f64
                && proj.v - 0.5 >= 0.0
                && proj.v - 0.5 <= (cam.height - 1) as f64;
            valid[vi * n + pi] = ok;
            if ok {
                uv[vi * n + pi] = [proj.u, proj.v];
            }
        }
    }
    let valid_mask: Vec<T> = valid
        .iter()
        .map(|&v| if v { T::ONE } else { T::ZERO })
        .collect();
    let valid_t = Tensor::constant(&[k, 1, n], valid_mask);

    // window colors: (K, 3*win^2, N)
    let colors = if net.elements.color {
        let r = (win / 2) as f64;
        let mut per_view: Vec<Tensor<T>> = Vec::with_capacity(k);
        for vi in 0..k {
            let image = views[vi]
                .image
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("build_volume: view {vi} has no image")))?;
            let mut coords = Vec::with_capacity(n * win2);
            for pi in 0..n {
                let [u, v] = uv[vi * n + pi];
                for dy in 0..win {
                    for dx in 0..win {
                        coords.push([u - 0.5 + dx as f64 - r, v - 0.5 + dy as f64 - r]);
                    }
                }
            }
            let (s, _) = image.grid_sample_bilinear(&coords); // (N*win2, 3)
            per_view.push(s.reshape(&[1, n, 3 * win2]).permute(&[0, 2, 1])); // (1, 3win2, N)
        }
        let refs: Vec<&Tensor<T>> = per_view.iter().collect();
        Some(Tensor::concat(&refs, 0).mul(&valid_t))
    } else {
        None
    };

    // multi-scale features: (K, M, N)
    let feats = {
        let mut per_view: Vec<Tensor<T>> = Vec::with_capacity(k);
        for vi in 0..k {
            let pyr = &pyramids[vi];
            let mut parts: Vec<Tensor<T>> = Vec::with_capacity(4);
            for (level, scale) in [(&pyr.f2, 2.0), (&pyr.f4, 4.0), (&pyr.f8, 8.0), (&pyr.t8, 8.0)] {
                let coords: Vec<[f64; 2]> = (0..n)
                    .map(|pi| {
                        let [u, v] = uv[vi * n + pi];
                        [u / scale - 0.5, v / scale - 0.5]
                    })
                    .collect();
                let (s, _) = level.grid_sample_bilinear(&coords); // (N, Cl)
                parts.push(s);
            }
            let refs: Vec<&Tensor<T>> = parts.iter().collect();
            per_view.push(Tensor::concat(&refs, 1).permute(&[1, 0]).reshape(&[1, m, n]));
        }
        let refs: Vec<&Tensor<T>> = per_view.iter().collect();
        Tensor::concat(&refs, 0).mul(&valid_t)
    };

    // pairwise group cosines weighted by per-ray entropy visibility
    let cosine = if net.elements.cosine {
        let pairs = pair_indices(k);
        let p = pairs.len();
        let s_pairs = group_cosine_batched(&feats, net.groups); // (P, G, N)
        let mut pair_cell_valid: Vec<T> = Vec::with_capacity(p * n);
        for &(i, j) in &pairs {
            for pi in 0..n {
                let ok = valid[i * n + pi] && valid[j * n + pi];
                pair_cell_valid.push(if ok { T::ONE } else { T::ZERO });
            }
        }
        let s_pairs = s_pairs.mul(&Tensor::constant(&[p, 1, n], pair_cell_valid.clone()));
        // ray-level pair validity: any valid depth along the ray
        let rays_n = h * w;
        let mut ray_pair_valid = vec![false; p * rays_n];
        for (pidx, _) in pairs.iter().enumerate() {
            for ray in 0..rays_n {
                let mut any = false;
                for dd in 0..d {
                    if pair_cell_valid[pidx * n + dd * rays_n + ray] == T::ONE {
                        any = true;
                        break;
                    }
                }
                ray_pair_valid[pidx * rays_n + ray] = any;
            }
        }
        let s4 = s_pairs.reshape(&[p, net.groups, d, rays_n]);
        let wpairs = net.pair_weights_batched(&s4, &ray_pair_valid, rays_n); // (P, rays)
        let weighted = s4.mul(&wpairs.reshape(&[p, 1, 1, rays_n]));
        Some(weighted.sum_axis_sorted(0, false).reshape(&[net.groups, n]))
    } else {
        None
    };

    // direction features: (dot(d_t, d_i), d_t - d_i) per view per cell
    let anchor_center = anchor.camera_center();
    let mut dir_data = vec![T::ZERO; k * 4 * n];
    for vi in 0..k {
        let c_i = views[vi].camera_center();
        for (pi, &pt) in points.iter().enumerate() {
            let dt = v_normalize(v_sub(anchor_center, pt));
            let di = v_normalize(v_sub(c_i, pt));
            let vals = [
                dt[0] * di[0] + dt[1] * di[1] + dt[2] * di[2],
                dt[0] - di[0],
                dt[1] - di[1],
                dt[2] - di[2],
            ];
            for (c, &v) in vals.iter().enumerate() {
                dir_data[(vi * 4 + c) * n + pi] = T::from_f64(v);
            }
        }
    }
    let dirs = Tensor::constant(&[k, 4, n], dir_data);

    let wviews = view_weights_batched(net, &feats, &dirs, &valid, n).reshape(&[k, 1, n]);

    let mut parts: Vec<Tensor<T>> = Vec::new();
    if let Some(c) = &colors {
        parts.push(c.mul(&wviews).sum_axis_sorted(0, false)); // (3win2, N)
    }
    if net.elements.feature {
        parts.push(feats.mul(&wviews).sum_axis_sorted(0, false)); // (M, N)
    }
    if let Some(s) = cosine {
        parts.push(s);
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    let elems = Tensor::concat(&refs, 0); // (E, N)
    let projected = net.proj.forward_cols(&elems); // (C, N)

    // cells observed by no view collapse to zero feature vectors
    let any_mask: Vec<T> = (0..n)
        .map(|pi| {
            if (0..k).any(|vi| valid[vi * n + pi]) {
                T::ONE
            } else {
                T::ZERO
            }
        })
        .collect();
    let z = projected
        .mul(&Tensor::constant(&[1, n], any_mask))
        .reshape(&[net.channels, d, h, w]);

    Ok(FrustumVolume {
        z,
        depths: rays.depths.clone(),
        validity: valid,
        k,
        subsample: rays.subsample,
        height: h,
        width: w,
    })
}
