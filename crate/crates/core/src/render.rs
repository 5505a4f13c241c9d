//! Volume rendering: alpha compositing, hierarchical resampling of ray
//! depths, and depth/normal extraction. The full render paths over a model
//! (coarse, fine, patched) live at the bottom of this module.
//!
//! Transmittance uses the identity T_d = prod(1 - alpha_e) =
//! exp(-sum sigma_e * delta_e), so it is computed with an exclusive cumsum,
//! which keeps the backward pass simple and exact.

use crate::geometry::CameraView;
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct RenderOutput<T: Scalar> {
    pub rgb: Tensor<T>,     // (3, H, W) in [0,1]
    pub depth: Tensor<T>,   // (H, W), camera-z of the target view
    pub weights: Tensor<T>, // (D, H, W) compositing weights
    pub opacity: Tensor<T>, // (H, W) = sum of weights
}

/// Batched compositing over an image of rays.
/// density (D,H,W) >= 0, color (3,D,H,W), deltas (D,H,W) > 0,
/// depths (D,H,W) sample positions (camera-z).
pub fn composite_image<T: Scalar>(
    density: &Tensor<T>,
    color: &Tensor<T>,
    deltas: &Tensor<T>,
    depths: &Tensor<T>,
) -> RenderOutput<T> {
    let dsh = density.shape().to_vec();
    assert_eq!(dsh.len(), 3, "composite: density wants (D,H,W), got {dsh:?}");
    assert!(
        density.data().iter().all(|v| *v >= T::ZERO),
        "composite: negative density"
    );
    assert!(
        deltas.data().iter().all(|v| *v > T::ZERO),
        "composite: deltas must be positive"
    );
    let (d, h, w) = (dsh[0], dsh[1], dsh[2]);
    assert_eq!(color.shape(), &[3, d, h, w], "composite: color shape");

    let sd = density.mul(deltas); // sigma * delta
    let trans = sd.cumsum_exclusive(0).neg().exp(); // T_d
    let alpha = sd.neg().exp().neg().add_scalar(1.0); // 1 - exp(-sigma*delta)
    let weights = trans.mul(&alpha); // (D,H,W)

    let w4 = weights.reshape(&[1, d, h, w]);
    let rgb = color.mul(&w4).sum_axis(1, false); // (3,H,W)
    let opacity = weights.sum_axis(0, false); // (H,W)
    let depth = weights
        .mul(depths)
        .sum_axis(0, false)
        .div(&opacity.clamp_min(1e-8));
    RenderOutput {
        rgb,
        depth,
        weights,
        opacity,
    }
}

/// Single-ray compositing; density (D), color (D,3), deltas (D), depths (D).
pub fn composite<T: Scalar>(
    density: &Tensor<T>,
    color: &Tensor<T>,
    deltas: &Tensor<T>,
    depths: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = density.numel();
    assert_eq!(color.shape(), &[d, 3], "composite: color wants (D,3)");
    let out = composite_image(
        &density.reshape(&[d, 1, 1]),
        &color.permute(&[1, 0]).reshape(&[3, d, 1, 1]),
        &deltas.reshape(&[d, 1, 1]),
        &depths.reshape(&[d, 1, 1]),
    );
    (
        out.rgb.reshape(&[3]),
        out.depth.reshape(&[1]),
        out.weights.reshape(&[d]),
    )
}

/// Plain-f64 reference compositing; the oracle renderer and several tests
/// march analytic fields through this exact math.
pub struct CompositedRay {
    pub rgb: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub weights: Vec<f64>,
}

pub fn composite_ray_f64(
    sigmas: &[f64],
    colors: &[[f64; 3]],
    deltas: &[f64],
    depths: &[f64],
) -> CompositedRay {
    let d = sigmas.len();
    let mut weights = vec![0.0; d];
    let mut acc = 0.0; // cumulative sigma*delta
    let mut rgb = [0.0; 3];
    let mut depth_num = 0.0;
    let mut opacity = 0.0;
    for i in 0..d {
        let sd = sigmas[i] * deltas[i];
        let t = (-acc).exp();
        let alpha = 1.0 - (-sd).exp();
        let w = t * alpha;
        weights[i] = w;
        for c in 0..3 {
            rgb[c] += w * colors[i][c];
        }
        depth_num += w * depths[i];
        opacity += w;
        acc += sd;
    }
    CompositedRay {
        rgb,
        depth: depth_num / opacity.max(1e-8),
        opacity,
        weights,
    }
}

// ── Hierarchical sampling ───────────────────────────────────────────────

/// Inverse-transform sampling of new depths from compositing weights.
///
/// pdf = (weights + 1e-5) / sum, piecewise-constant over the depth bins
/// implied by the (midpoint) sample depths; stratified uniforms
/// u_k = (k + xi_k)/n with xi from the seeded stream, or 0.5 when
/// deterministic. Output is ascending.
pub fn pdf_resample(
    weights: &[f64],
    depths: &[f64],
    n: usize,
    stratified: bool,
    rng: Option<&mut RngStream>,
) -> Vec<f64> {
    let d = weights.len();
    assert_eq!(d, depths.len(), "pdf_resample: weights vs depths length");
    assert!(d >= 2, "pdf_resample: need at least 2 bins");
    assert!(weights.iter().all(|w| *w >= 0.0), "pdf_resample: negative weight");

    // reconstruct bin edges around the midpoint depths
    let mut edges = Vec::with_capacity(d + 1);
    edges.push(depths[0] - 0.5 * (depths[1] - depths[0]));
    for i in 1..d {
        edges.push(0.5 * (depths[i - 1] + depths[i]));
    }
    edges.push(depths[d - 1] + 0.5 * (depths[d - 1] - depths[d - 2]));

    let floored: Vec<f64> = weights.iter().map(|w| w + 1e-5).collect();
    let total: f64 = floored.iter().sum();
    let pdf: Vec<f64> = floored.iter().map(|w| w / total).collect();
    let mut cdf = Vec::with_capacity(d + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for p in &pdf {
        acc += p;
        cdf.push(acc);
    }
    cdf[d] = 1.0;

    let mut rng = rng;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let xi = match (&mut rng, stratified) {
            (Some(r), true) => r.uniform(),
            _ => 0.5,
        };
        let u = (k as f64 + xi) / n as f64;
        // find bin with cdf[b] <= u < cdf[b+1]
        let mut lo = 0usize;
        let mut hi = d;
        while lo + 1 < hi {
            let mid = (lo + hi) / 2;
            if cdf[mid] <= u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let b = lo;
        let span = cdf[b + 1] - cdf[b];
        let frac = if span > 0.0 { (u - cdf[b]) / span } else { 0.5 };
        out.push(edges[b] + frac * (edges[b + 1] - edges[b]));
    }
    debug_assert!(out.windows(2).all(|w| w[0] <= w[1]));
    out
}

// ── Depth and normal maps ───────────────────────────────────────────────

pub struct DepthNormal {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub normal: Vec<[f64; 3]>,
    /// false where opacity < 0.1
    pub valid: Vec<bool>,
}

/// Normals from screen-space finite differences of the unprojected depth
/// map, oriented toward the camera.
pub fn render_depth_normal<T: Scalar>(out: &RenderOutput<T>, target: &CameraView<T>) -> DepthNormal {
    use crate::geometry::{v_cross, v_dot, v_norm, v_scale, v_sub, Vec3};
    let sh = out.depth.shape().to_vec();
    let (h, w) = (sh[0], sh[1]);
    let depth: Vec<f64> = out.depth.data().iter().map(|v| v.to_f64()).collect();
    let opacity: Vec<f64> = out.opacity.data().iter().map(|v| v.to_f64()).collect();

    let point = |x: usize, y: usize| -> Vec3 {
        let dz = depth[y * w + x].max(1e-9);
        target.unproject(x as f64 + 0.5, y as f64 + 0.5, dz)
    };
    let cam = target.camera_center();
    let mut normal = vec![[0.0; 3]; h * w];
    let mut valid = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if opacity[y * w + x] < 0.1 {
                continue;
            }
            let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let dx = v_sub(point(x1, y), point(x0, y));
            let dy = v_sub(point(x, y1), point(x, y0));
            let mut n = v_cross(dx, dy);
            let len = v_norm(n);
            if len < 1e-12 {
                continue;
            }
            n = v_scale(n, 1.0 / len);
            let to_cam = v_sub(cam, point(x, y));
            if v_dot(n, to_cam) < 0.0 {
                n = v_scale(n, -1.0);
            }
            normal[y * w + x] = n;
            valid[y * w + x] = true;
        }
    }
    DepthNormal {
        width: w,
        height: h,
        depth,
        normal,
        valid,
    }
}


// ── Full render paths over a model ──────────────────────────────────────

use crate::config::Orientation;
use crate::encoder::FeaturePyramid;
use crate::error::Error;
use crate::geometry::{make_rays, plane_depths, Depths, DepthSpacing, RayBundle};
use crate::model::Model;
use crate::volume::build_volume;
use crate::Result;

pub struct Rendered<T: Scalar> {
    pub out: RenderOutput<T>,
    /// reference-orientation diagnostic: fraction of target samples that
    /// fell outside the reference frustum (0.0 in target orientation)
    pub outside_fraction: f64,
}

pub struct RenderResult<T: Scalar> {
    pub coarse: RenderOutput<T>,
    pub fine: Option<RenderOutput<T>>,
    pub outside_fraction: f64,
}

fn pad_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

fn check_views<T: Scalar>(views: &[crate::geometry::CameraView<T>]) -> Result<()> {
    if views.is_empty() {
        return Err(Error::Contract("render: no input views".into()));
    }
    for (i, v) in views.iter().enumerate() {
        let img = v
            .image
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("render: input view {i} has no image")))?;
        if img.shape()[1] != v.height || img.shape()[2] != v.width {
            return Err(Error::Contract(format!(
                "render: view {i} image {:?} vs camera {}x{}",
                img.shape(),
                v.width,
                v.height
            )));
        }
    }
    Ok(())
}

pub fn encode_inputs<T: Scalar>(
    model: &Model<T>,
    views: &[crate::geometry::CameraView<T>],
) -> Result<Vec<FeaturePyramid<T>>> {
    check_views(views)?;
    let images: Vec<&Tensor<T>> = views.iter().map(|v| v.image.as_ref().unwrap()).collect();
    model.encoder.encode_views(&images)
}

/// Crop render output back to the un-padded target size (pad sits at the
/// bottom/right).
fn crop_output<T: Scalar>(out: RenderOutput<T>, h: usize, w: usize) -> RenderOutput<T> {
    if out.rgb.shape()[1] == h && out.rgb.shape()[2] == w {
        return out;
    }
    RenderOutput {
        rgb: out.rgb.slice(1, 0, h).slice(2, 0, w),
        depth: out.depth.slice(0, 0, h).slice(1, 0, w),
        weights: out.weights.slice(1, 0, h).slice(2, 0, w),
        opacity: out.opacity.slice(0, 0, h).slice(1, 0, w),
    }
}

/// Composite a decoded full-resolution field along the anchor's pixel rays.
fn composite_field<T: Scalar>(
    rf: &crate::decoder::RadianceField<T>,
    rays: &RayBundle,
) -> RenderOutput<T> {
    let sh = rf.density.shape().to_vec();
    let (d, h, w) = (sh[1], sh[2], sh[3]);
    composite_image(
        &rf.density.reshape(&[d, h, w]),
        &rf.color,
        &rays.deltas_tensor(),
        &rays.depths_tensor(),
    )
}

/// Coarse pass: encode -> target-frustum volume -> decode -> composite per
/// full-resolution ray. Reference orientation builds the volume in the
/// first input view's frustum instead and evaluates the decoded field by
/// trilinear interpolation along the target rays.
pub fn render_coarse<T: Scalar>(
    model: &Model<T>,
    views: &[crate::geometry::CameraView<T>],
    target: &crate::geometry::CameraView<T>,
) -> Result<Rendered<T>> {
    let pyramids = encode_inputs(model, views)?;
    render_coarse_with(model, views, &pyramids, target)
}

pub fn render_coarse_with<T: Scalar>(
    model: &Model<T>,
    views: &[crate::geometry::CameraView<T>],
    pyramids: &[FeaturePyramid<T>],
    target: &crate::geometry::CameraView<T>,
) -> Result<Rendered<T>> {
    match model.cfg.orientation {
        Orientation::Target => {
            let s = model.cfg.subsample;
            let padded = target.padded(pad_up(target.width, s), pad_up(target.height, s));
            let rays = make_rays(&padded, s, model.cfg.d_coarse, model.cfg.depth_spacing)?;
            let vol = build_volume(&model.coarse_net, views, pyramids, &rays, &padded)?;
            let rf = model.decoder.decode(&vol)?;
            let full = make_rays(&padded, 1, model.cfg.d_coarse, model.cfg.depth_spacing)?;
            let out = composite_field(&rf, &full);
            Ok(Rendered {
                out: crop_output(out, target.height, target.width),
                outside_fraction: 0.0,
            })
        }
        Orientation::Reference => render_reference(model, views, pyramids, target),
    }
}

fn plane_coord(z: f64, near: f64, far: f64, d: usize, spacing: DepthSpacing) -> f64 {
    match spacing {
        DepthSpacing::Linear => (z - near) / ((far - near) / d as f64) - 0.5,
        DepthSpacing::Inverse => {
            let istep = (1.0 / far - 1.0 / near) / d as f64;
            (1.0 / z - 1.0 / near) / istep - 0.5
        }
    }
}

fn render_reference<T: Scalar>(
    model: &Model<T>,
    views: &[crate::geometry::CameraView<T>],
    pyramids: &[FeaturePyramid<T>],
    target: &crate::geometry::CameraView<T>,
) -> Result<Rendered<T>> {
    let s = model.cfg.subsample;
    let d = model.cfg.d_coarse;
    let reference = &views[0];
    let ref_padded = reference.padded(pad_up(reference.width, s), pad_up(reference.height, s));
    let rays_ref = make_rays(&ref_padded, s, d, model.cfg.depth_spacing)?;
    let vol = build_volume(&model.coarse_net, views, pyramids, &rays_ref, &ref_padded)?;
    let rf = model.decoder.decode(&vol)?;

    // evaluate the reference-frustum field at the target's own samples
    let rays_t = make_rays(target, 1, d, model.cfg.depth_spacing)?;
    let points = rays_t.points();
    let fsh = rf.color.shape().to_vec(); // (3, D, H, W)
    let (fd, fh, fw) = (fsh[1], fsh[2], fsh[3]);
    // samples that sit exactly on the frustum boundary must not flicker
    // out of range from projection round-off
    let snap = |v: f64, len: usize| -> f64 {
        let hi = (len - 1) as f64;
        if (v + 1e-6 >= 0.0 && v < 0.0) || (v >= hi && v <= hi + 1e-6) {
            v.clamp(0.0, hi)
        } else {
            v
        }
    };
    let coords: Vec<[f64; 3]> = points
        .iter()
        .map(|&p| {
            let proj = ref_padded.project(p);
            if proj.behind {
                [f64::NAN, f64::NAN, f64::NAN]
            } else {
                [
                    snap(proj.u - 0.5, fw),
                    snap(proj.v - 0.5, fh),
                    snap(
                        plane_coord(proj.depth, ref_padded.near, ref_padded.far, fd, model.cfg.depth_spacing),
                        fd,
                    ),
                ]
            }
        })
        .collect();
    let field = Tensor::concat(&[&rf.color, &rf.density], 0); // (4, D, H, W)
    let (samples, valid) = field.grid_sample_trilinear(&coords); // (N, 4)
    let outside = 1.0 - valid.iter().filter(|v| **v).count() as f64 / valid.len().max(1) as f64;
    let (h, w) = (rays_t.height, rays_t.width);
    let chans = samples.permute(&[1, 0]); // (4, N)
    let color = chans.slice(0, 0, 3).reshape(&[3, d, h, w]);
    let density = chans.slice(0, 3, 1).reshape(&[d, h, w]);
    let out = composite_image(&density, &color, &rays_t.deltas_tensor(), &rays_t.depths_tensor());
    Ok(Rendered {
        out,
        outside_fraction: outside,
    })
}

/// Fine pass: importance-sample per-ray depths from the coarse weights,
/// build the compact full-resolution volume at those depths, run the 3D
/// U-Net and composite.
pub fn render_fine<T: Scalar>(
    model: &Model<T>,
    views: &[crate::geometry::CameraView<T>],
    target: &crate::geometry::CameraView<T>,
    coarse: &RenderOutput<T>,
    stratified: bool,
    rng: Option<&mut RngStream>,
) -> Result<Rendered<T>> {
    let pyramids = encode_inputs(model, views)?;
    render_fine_with(model, views, &pyramids, target, coarse, stratified, rng)
}

pub fn render_fine_with<T: Scalar>(
    model: &Model<T>,
    views: &[crate::geometry::CameraView<T>],
    pyramids: &[FeaturePyramid<T>],
    target: &crate::geometry::CameraView<T>,
    coarse: &RenderOutput<T>,
    stratified: bool,
    mut rng: Option<&mut RngStream>,
) -> Result<Rendered<T>> {
    let fine_net = model
        .fine_net
        .as_ref()
        .ok_or_else(|| Error::Contract("render_fine: fine stage disabled in config".into()))?;
    let unet = model.fine_unet.as_ref().unwrap();
    let (h, w) = (target.height, target.width);
    let wsh = coarse.weights.shape().to_vec();
    let d1 = wsh[0];
    if wsh[1] != h || wsh[2] != w {
        return Err(Error::Contract(format!(
            "render_fine: coarse weights {:?} vs target {}x{}",
            wsh, w, h
        )));
    }
    let d2 = model.cfg.d_fine;
    let planes = plane_depths(target.near, target.far, d1, model.cfg.depth_spacing);
    let wdata: Vec<f64> = coarse.weights.data().iter().map(|v| v.to_f64()).collect();
    let rays_n = h * w;
    let mut per_ray = vec![0.0f64; rays_n * d2];
    let mut wray = vec![0.0f64; d1];
    for r in 0..rays_n {
        for d in 0..d1 {
            wray[d] = wdata[d * rays_n + r];
        }
        let samples = pdf_resample(&wray, &planes, d2, stratified, rng.as_deref_mut());
        per_ray[r * d2..(r + 1) * d2].copy_from_slice(&samples);
    }
    let base = make_rays(target, 1, 2, model.cfg.depth_spacing)?;
    let rays = RayBundle {
        depths: Depths::PerRay {
            d: d2,
            values: per_ray,
        },
        ..base
    };
    let vol = build_volume(fine_net, views, pyramids, &rays, target)?;
    // pad all three axes up to multiples of 4 for the two-level U-Net
    let (pd, ph, pw) = (pad_up(d2, 4) - d2, pad_up(h, 4) - h, pad_up(w, 4) - w);
    let mut z = vol.z;
    if pd > 0 {
        z = z.zero_pad(1, 0, pd);
    }
    if ph > 0 {
        z = z.zero_pad(2, 0, ph);
    }
    if pw > 0 {
        z = z.zero_pad(3, 0, pw);
    }
    let rf = unet.forward(&z, &rays.depths)?;
    let color = rf.color.slice(1, 0, d2).slice(2, 0, h).slice(3, 0, w);
    let density = rf.density.slice(1, 0, d2).slice(2, 0, h).slice(3, 0, w);
    let out = composite_image(
        &density.reshape(&[d2, h, w]),
        &color,
        &rays.deltas_tensor(),
        &rays.depths_tensor(),
    );
    Ok(Rendered {
        out,
        outside_fraction: 0.0,
    })
}

/// One-call render: coarse pass plus the fine pass when enabled.
pub fn render<T: Scalar>(
    model: &Model<T>,
    views: &[crate::geometry::CameraView<T>],
    target: &crate::geometry::CameraView<T>,
    stratified: bool,
    rng: Option<&mut RngStream>,
) -> Result<RenderResult<T>> {
    let pyramids = encode_inputs(model, views)?;
    let coarse = render_coarse_with(model, views, &pyramids, target)?;
    let fine = if model.cfg.fine {
        Some(
            render_fine_with(model, views, &pyramids, target, &coarse.out, stratified, rng)?.out,
        )
    } else {
        None
    };
    Ok(RenderResult {
        coarse: coarse.out,
        fine,
        outside_fraction: coarse.outside_fraction,
    })
}

/// Even split of `total` into `p` core spans plus `overlap` margin each side.
fn patch_spans(total: usize, p: usize, overlap: usize) -> Vec<(usize, usize)> {
    (0..p)
        .map(|i| {
            let core_s = i * total / p;
            let core_e = (i + 1) * total / p;
            let s = core_s.saturating_sub(overlap);
            let e = (core_e + overlap).min(total);
            (s, e - s)
        })
        .collect()
}

/// Patch-based rendering: the volume is built once, decoded per overlapping
/// spatial patch, and the per-patch rendered outputs are merged by plain
/// averaging where they overlap. P = 1 reproduces the unpatched path
/// bit-exactly. Inference-only (the merged output is detached).
pub fn render_patched<T: Scalar>(
    model: &Model<T>,
    views: &[crate::geometry::CameraView<T>],
    target: &crate::geometry::CameraView<T>,
    p: usize,
    overlap: usize,
) -> Result<RenderOutput<T>> {
    if model.cfg.orientation != Orientation::Target {
        return Err(Error::Contract(
            "render_patched: only target orientation is supported".into(),
        ));
    }
    if p == 0 {
        return Err(Error::Contract("render_patched: P must be >= 1".into()));
    }
    let s = model.cfg.subsample;
    let d = model.cfg.d_coarse;
    let pyramids = encode_inputs(model, views)?;
    let padded = target.padded(pad_up(target.width, s), pad_up(target.height, s));
    let rays = make_rays(&padded, s, d, model.cfg.depth_spacing)?;
    let (lh, lw) = (rays.height, rays.width);
    if p > lh || p > lw {
        return Err(Error::Contract(format!(
            "render_patched: {p}x{p} patches over a {lh}x{lw} volume"
        )));
    }
    let vol = build_volume(&model.coarse_net, views, pyramids.as_slice(), &rays, &padded)?;

    let full = make_rays(&padded, 1, d, model.cfg.depth_spacing)?;
    let deltas = full.deltas(); // (D, H, W) f64
    let (fh, fw) = (full.height, full.width);
    let mut rgb_sum = vec![0.0f64; 3 * fh * fw];
    let mut depth_sum = vec![0.0f64; fh * fw];
    let mut opac_sum = vec![0.0f64; fh * fw];
    let mut weight_sum = vec![0.0f64; d * fh * fw];
    let mut count = vec![0.0f64; fh * fw];

    for (ys, yl) in patch_spans(lh, p, overlap) {
        for (xs, xl) in patch_spans(lw, p, overlap) {
            let rf = model.decoder.decode_patch(&vol, ys, xs, yl, xl)?;
            // full-res footprint of this patch
            let (py, px, ph, pw) = (ys * s, xs * s, yl * s, xl * s);
            let mut del = vec![T::ZERO; d * ph * pw];
            let mut dep = vec![T::ZERO; d * ph * pw];
            for dd in 0..d {
                for yy in 0..ph {
                    for xx in 0..pw {
                        let src = dd * fh * fw + (py + yy) * fw + (px + xx);
                        del[(dd * ph + yy) * pw + xx] = T::from_f64(deltas[src]);
                        dep[(dd * ph + yy) * pw + xx] =
                            T::from_f64(full.depths.at((py + yy) * fw + (px + xx), dd));
                    }
                }
            }
            let sh = rf.density.shape().to_vec();
            let out = composite_image(
                &rf.density.reshape(&[sh[1], sh[2], sh[3]]),
                &rf.color,
                &Tensor::constant(&[d, ph, pw], del),
                &Tensor::constant(&[d, ph, pw], dep),
            );
            let rgb = out.rgb.data();
            let dpt = out.depth.data();
            let opc = out.opacity.data();
            let wgt = out.weights.data();
            for yy in 0..ph {
                for xx in 0..pw {
                    let dst = (py + yy) * fw + (px + xx);
                    let src = yy * pw + xx;
                    count[dst] += 1.0;
                    depth_sum[dst] += dpt[src].to_f64();
                    opac_sum[dst] += opc[src].to_f64();
                    for c in 0..3 {
                        rgb_sum[c * fh * fw + dst] += rgb[c * ph * pw + src].to_f64();
                    }
                    for dd in 0..d {
                        weight_sum[dd * fh * fw + dst] +=
                            wgt[(dd * ph + yy) * pw + xx].to_f64();
                    }
                }
            }
        }
    }
    let to_t = |v: &[f64], scale_idx: &dyn Fn(usize) -> usize| -> Vec<T> {
        v.iter()
            .enumerate()
            .map(|(i, &x)| T::from_f64(x / count[scale_idx(i)]))
            .collect()
    };
    let hw = fh * fw;
    let out = RenderOutput {
        rgb: Tensor::constant(&[3, fh, fw], to_t(&rgb_sum, &|i| i % hw)),
        depth: Tensor::constant(&[fh, fw], to_t(&depth_sum, &|i| i)),
        weights: Tensor::constant(&[d, fh, fw], to_t(&weight_sum, &|i| i % hw)),
        opacity: Tensor::constant(&[fh, fw], to_t(&opac_sum, &|i| i)),
    };
    Ok(crop_output(out, target.height, target.width))
}
