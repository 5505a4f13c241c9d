//! Analytic rendering oracles: the compositing path against closed-form
//! transmittance, convergence order in sample count, and the full-resolution
//! ray pipeline against the oracle renderer with a stubbed (analytic) field.

use frustumfield::geometry::{make_rays, v_norm, CameraView, DepthSpacing};
use frustumfield::render::{composite_image, render_depth_normal, RenderOutput};
use frustumfield::scene::synth::{
    camera_rig, oracle_render, Albedo, Field, Preset, RIG_FAR, RIG_NEAR, RIG_RADIUS, SLAB_SIGMA,
    SLAB_Z0, SLAB_Z1,
};
use frustumfield::tensor::Tensor;

fn fronto_cam(width: usize, height: usize) -> CameraView<f64> {
    camera_rig(1, 0.0, width, height)[0].to_camera(RIG_NEAR, RIG_FAR)
}

fn const_slab() -> Field {
    Field::Slab {
        z0: SLAB_Z0,
        z1: SLAB_Z1,
        sigma: SLAB_SIGMA,
        albedo: Albedo::Constant([0.7, 0.5, 0.3]),
    }
}

/// March an analytic field through the tensor compositing path at D samples
/// per ray (the "stubbed identity decoder": density and color come straight
/// from the closed form).
fn render_stubbed(field: &Field, cam: &CameraView<f64>, d: usize) -> RenderOutput<f64> {
    let rays = make_rays(cam, 1, d, DepthSpacing::Linear).unwrap();
    let (h, w, nr) = (rays.height, rays.width, rays.n_rays());
    let mut density = vec![0.0f64; d * nr];
    let mut color = vec![0.0f64; 3 * d * nr];
    for dd in 0..d {
        for r in 0..nr {
            let p = rays.point(r, dd);
            let (s, c) = field.eval(p);
            density[dd * nr + r] = s;
            for ch in 0..3 {
                color[(ch * d + dd) * nr + r] = c[ch];
            }
        }
    }
    composite_image(
        &Tensor::constant(&[d, h, w], density),
        &Tensor::constant(&[3, d, h, w], color),
        &rays.deltas_tensor(),
        &rays.depths_tensor(),
    )
}

/// Mean |opacity - (1 - exp(-sigma L))| over the rays of an oblique view of
/// the slab. The tilt spreads the slab boundaries across depth-bin phases,
/// so the mean error decays cleanly as O(1/D).
fn slab_opacity_error(d: usize) -> f64 {
    let cam: CameraView<f64> = camera_rig(3, 25.0, 16, 16)[0].to_camera(RIG_NEAR, RIG_FAR);
    let out = render_stubbed(&const_slab(), &cam, d);
    let rays = make_rays(&cam, 1, 2, DepthSpacing::Linear).unwrap();
    let opacity = out.opacity.to_vec();
    let mut err_sum = 0.0;
    let mut count = 0usize;
    for r in 0..rays.n_rays() {
        // exact chord length of this ray inside the slab (world z planes)
        let oz = rays.origins[r][2];
        let dz = rays.dirs[r][2];
        let (t0, t1) = ((SLAB_Z0 - oz) / dz, (SLAB_Z1 - oz) / dz);
        let (t0, t1) = (t0.min(t1), t0.max(t1));
        let lo = t0.max(RIG_NEAR);
        let hi = t1.min(RIG_FAR);
        if hi <= lo {
            continue;
        }
        let l = (hi - lo) * v_norm(rays.dirs[r]);
        let want = 1.0 - (-SLAB_SIGMA * l).exp();
        err_sum += (opacity[r] - want).abs();
        count += 1;
    }
    err_sum / count as f64
}

#[test]
fn slab_opacity_matches_analytic_at_256() {
    let start = std::time::Instant::now();
    let err = slab_opacity_error(256);
    assert!(err < 1e-3, "opacity error at D=256: {err}");
    assert!(start.elapsed().as_secs() < 10, "analytic oracle too slow");
}

#[test]
fn compositing_converges_at_first_order() {
    // mean error over a pencil of oblique rays ~ C / D: fit the slope
    let ds = [16usize, 32, 64, 128, 256];
    let errs: Vec<f64> = ds.iter().map(|&d| slab_opacity_error(d)).collect();
    let xs: Vec<f64> = ds.iter().map(|&d| (d as f64).ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let slope: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    let order = -slope;
    assert!(order >= 0.9, "convergence order {order:.3} (errors {errs:?})");
}

#[test]
fn stubbed_render_matches_oracle_renderer() {
    // same field, same D: the tensor path and the scalar oracle must agree
    let cam = fronto_cam(8, 8);
    let field = Preset::TwoSpheres.field();
    let ours = render_stubbed(&field, &cam, 512);
    let oracle = oracle_render(&field, &cam, 512);
    let rgb = ours.rgb.to_vec();
    for (a, b) in rgb.iter().zip(&oracle.rgb) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn refined_quadrature_agreement() {
    // D vs 4D refinement of the same analytic field: O(1/D) apart
    let cam = fronto_cam(8, 8);
    let field = const_slab();
    let a = render_stubbed(&field, &cam, 64);
    let b = render_stubbed(&field, &cam, 256);
    let mean_diff: f64 = a
        .rgb
        .to_vec()
        .iter()
        .zip(b.rgb.to_vec())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / (3.0 * 64.0);
    assert!(mean_diff < 5e-3, "mean rgb diff {mean_diff}");
}

#[test]
fn slab_depth_is_front_within_bin() {
    let cam = fronto_cam(8, 8);
    let field = Field::Slab {
        z0: SLAB_Z0,
        z1: SLAB_Z1,
        sigma: 400.0,
        albedo: Albedo::Constant([1.0; 3]),
    };
    let d = 256;
    let out = render_stubbed(&field, &cam, d);
    let bin = (RIG_FAR - RIG_NEAR) / d as f64;
    let front = RIG_RADIUS + SLAB_Z0;
    let depth = out.depth.to_vec();
    let center = depth[4 * 8 + 4];
    assert!(
        (center - front).abs() < bin + 1.0 / 400.0,
        "depth {center} vs {front}"
    );
}

#[test]
fn fronto_parallel_slab_normals_face_camera() {
    let cam = fronto_cam(16, 16);
    let out = render_stubbed(&const_slab(), &cam, 256);
    let dn = render_depth_normal(&out, &cam);
    let axis = cam.optical_axis();
    let mut checked = 0;
    for i in 0..dn.depth.len() {
        if !dn.valid[i] {
            continue;
        }
        let n = dn.normal[i];
        let dot = n[0] * axis[0] + n[1] * axis[1] + n[2] * axis[2];
        assert!(dot < -0.999, "normal {n:?} not anti-parallel to axis (dot {dot})");
        checked += 1;
    }
    assert!(checked > 200, "only {checked} valid pixels");
}

#[test]
fn sphere_normals_within_5_degrees() {
    let side = 32usize;
    let cam = fronto_cam(side, side);
    let field = Field::Sphere {
        center: [0.0, 0.0, 0.0],
        radius: 0.55,
        sigma: 400.0,
        albedo: [0.8, 0.65, 0.3],
    };
    let out = render_stubbed(&field, &cam, 256);
    let dn = render_depth_normal(&out, &cam);
    let opacity = out.opacity.to_vec();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for y in 1..side - 1 {
        for x in 1..side - 1 {
            let i = y * side + x;
            if !dn.valid[i] || opacity[i] < 0.9 {
                continue;
            }
            // skip pixels whose neighbourhood leaves the high-opacity disk
            let neighbors_solid = [i - 1, i + 1, i - side, i + side]
                .iter()
                .all(|&j| opacity[j] > 0.9);
            if !neighbors_solid {
                continue;
            }
            // analytic normal: surface point from rendered depth
            let p = cam.unproject(x as f64 + 0.5, y as f64 + 0.5, dn.depth[i]);
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            let want = [p[0] / r, p[1] / r, p[2] / r];
            let got = dn.normal[i];
            let dot = (got[0] * want[0] + got[1] * want[1] + got[2] * want[2]).clamp(-1.0, 1.0);
            let angle = dot.acos().to_degrees();
            worst = worst.max(angle);
            checked += 1;
        }
    }
    assert!(checked > 100, "only {checked} solid pixels checked");
    assert!(worst < 5.0, "worst normal error {worst:.2} degrees over {checked} pixels");
}
