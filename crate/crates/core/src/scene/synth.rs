//! Synthetic scenes with closed-form density and color fields. These stand
//! in for real capture data at desk scale and give every rendering test an
//! analytic ground truth. The generator renders views by marching the same
//! compositing math as the engine at a high sample count.

use crate::error::Error;
use crate::geometry::{look_at, make_rays, v_dot, v_normalize, v_sub, CameraView, DepthSpacing, Vec3};
use crate::render::composite_ray_f64;
use crate::scene::{ppm, save_manifest, SceneManifest, ViewSpec};
use crate::Result;
use std::path::Path;

/// Albedo of the slab field. The CLI preset uses a smooth world-anchored
/// pattern so that views actually differ by parallax; the constant variant
/// exists for closed-form oracle checks.
#[derive(Debug, Clone, Copy)]
pub enum Albedo {
    Constant([f64; 3]),
    Smooth,
}

#[derive(Debug, Clone, Copy)]
pub enum Field {
    /// Constant density between two z planes.
    Slab {
        z0: f64,
        z1: f64,
        sigma: f64,
        albedo: Albedo,
    },
    /// Solid sphere with Lambertian-style shading.
    Sphere {
        center: Vec3,
        radius: f64,
        sigma: f64,
        albedo: [f64; 3],
    },
    /// Two solid spheres that occlude each other across views.
    TwoSpheres,
}

pub const SLAB_Z0: f64 = -0.13;
pub const SLAB_Z1: f64 = 0.61;
pub const SLAB_SIGMA: f64 = 8.0;
pub const SPHERE_RADIUS: f64 = 0.55;
pub const SPHERE_SIGMA: f64 = 120.0;
const LIGHT_DIR: Vec3 = [0.46829290979483744, 0.7492686556717399, -0.46829290979483744];

fn smooth_albedo(p: Vec3) -> [f64; 3] {
    [
        0.5 + 0.4 * (2.3 * p[0] + 0.7).sin(),
        0.5 + 0.4 * (2.9 * p[1] - 0.4).sin(),
        0.5 + 0.4 * (1.7 * (p[0] + p[1])).sin(),
    ]
}

fn lambert(albedo: [f64; 3], n: Vec3) -> [f64; 3] {
    let shade = 0.25 + 0.75 * v_dot(n, LIGHT_DIR).max(0.0);
    [albedo[0] * shade, albedo[1] * shade, albedo[2] * shade]
}

fn sphere_field(p: Vec3, center: Vec3, radius: f64, sigma: f64, albedo: [f64; 3]) -> (f64, [f64; 3]) {
    let rel = v_sub(p, center);
    let r = v_dot(rel, rel).sqrt();
    if r <= radius {
        let n = if r > 1e-9 { v_normalize(rel) } else { [0.0, 1.0, 0.0] };
        (sigma, lambert(albedo, n))
    } else {
        (0.0, [0.0; 3])
    }
}

impl Field {
    /// Density and color at a world point; both are deterministic closed
    /// forms with sigma >= 0 everywhere.
    pub fn eval(&self, p: Vec3) -> (f64, [f64; 3]) {
        match *self {
            Field::Slab { z0, z1, sigma, albedo } => {
                if p[2] >= z0 && p[2] <= z1 {
                    let c = match albedo {
                        Albedo::Constant(c) => c,
                        Albedo::Smooth => smooth_albedo(p),
                    };
                    (sigma, c)
                } else {
                    (0.0, [0.0; 3])
                }
            }
            Field::Sphere {
                center,
                radius,
                sigma,
                albedo,
            } => sphere_field(p, center, radius, sigma, albedo),
            Field::TwoSpheres => {
                let a = sphere_field(p, [-0.35, 0.0, 0.1], 0.40, SPHERE_SIGMA, [0.85, 0.25, 0.2]);
                if a.0 > 0.0 {
                    return a;
                }
                sphere_field(p, [0.45, 0.05, -0.3], 0.35, SPHERE_SIGMA, [0.2, 0.35, 0.9])
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Slab,
    Sphere,
    TwoSpheres,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "slab" => Self::Slab,
            "sphere" => Self::Sphere,
            "two-spheres" => Self::TwoSpheres,
            _ => return None,
        })
    }

    pub fn field(&self) -> Field {
        match self {
            Preset::Slab => Field::Slab {
                z0: SLAB_Z0,
                z1: SLAB_Z1,
                sigma: SLAB_SIGMA,
                albedo: Albedo::Smooth,
            },
            Preset::Sphere => Field::Sphere {
                center: [0.0, 0.0, 0.0],
                radius: SPHERE_RADIUS,
                sigma: SPHERE_SIGMA,
                albedo: [0.8, 0.65, 0.3],
            },
            Preset::TwoSpheres => Field::TwoSpheres,
        }
    }
}

pub const RIG_RADIUS: f64 = 3.0;
pub const RIG_NEAR: f64 = RIG_RADIUS - 1.2;
pub const RIG_FAR: f64 = RIG_RADIUS + 1.2;

/// Cameras on an arc of angular pitch `baseline_deg` in the y=0 plane,
/// looking at the origin, centered on the -z axis. baseline 0 stacks all
/// views on the same pose.
pub fn camera_rig(k: usize, baseline_deg: f64, width: usize, height: usize) -> Vec<ViewSpec> {
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let theta = (i as f64 - (k as f64 - 1.0) / 2.0) * baseline_deg.to_radians();
        let eye = [RIG_RADIUS * theta.sin(), 0.0, -RIG_RADIUS * theta.cos()];
        let pose = look_at(eye, [0.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        out.push(ViewSpec {
            image_path: format!("view_{i:03}.ppm"),
            fx: 1.2 * width as f64,
            fy: 1.2 * width as f64,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            world_to_camera: pose,
            width,
            height,
        });
    }
    out
}

pub struct OracleRender {
    pub rgb: Vec<f64>,   // (3,H,W) row-major
    pub depth: Vec<f64>, // (H,W)
}

/// March the analytic field along every pixel ray at `d_oracle` midpoint
/// samples, compositing exactly like the engine.
pub fn oracle_render(field: &Field, cam: &CameraView<f64>, d_oracle: usize) -> OracleRender {
    let rays = make_rays(cam, 1, d_oracle, DepthSpacing::Linear).expect("oracle rays");
    let (h, w) = (rays.height, rays.width);
    let deltas = rays.deltas();
    let nr = rays.n_rays();
    let mut rgb = vec![0.0; 3 * h * w];
    let mut depth = vec![0.0; h * w];
    let mut sig = vec![0.0; d_oracle];
    let mut col = vec![[0.0; 3]; d_oracle];
    let mut del = vec![0.0; d_oracle];
    let mut dep = vec![0.0; d_oracle];
    for r in 0..nr {
        for d in 0..d_oracle {
            let p = rays.point(r, d);
            let (s, c) = field.eval(p);
            sig[d] = s;
            col[d] = c;
            del[d] = deltas[d * nr + r];
            dep[d] = rays.depths.at(r, d);
        }
        let out = composite_ray_f64(&sig, &col, &del, &dep);
        for c in 0..3 {
            rgb[c * h * w + r] = out.rgb[c].clamp(0.0, 1.0);
        }
        depth[r] = out.depth;
    }
    OracleRender { rgb, depth }
}

/// Generate a full scene directory: PPM views, PFM ground-truth depths and
/// the manifest. Deterministic for a fixed seed (the fields are closed
/// forms; the seed only names the directory contents).
pub fn synth_scene(
    preset: Preset,
    k_views: usize,
    baseline_deg: f64,
    width: usize,
    height: usize,
    d_oracle: usize,
    out_dir: &Path,
) -> Result<SceneManifest> {
    if k_views == 0 {
        return Err(Error::Contract("synth: need at least one view".into()));
    }
    if d_oracle < 2 {
        return Err(Error::Contract(format!(
            "synth: d_oracle must be >= 2, got {d_oracle}"
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let field = preset.field();
    let views = camera_rig(k_views, baseline_deg, width, height);
    let manifest = SceneManifest {
        near: RIG_NEAR,
        far: RIG_FAR,
        views,
    };
    for (i, spec) in manifest.views.iter().enumerate() {
        let cam: CameraView<f64> = spec.to_camera(manifest.near, manifest.far);
        let render = oracle_render(&field, &cam, d_oracle);
        let img = crate::tensor::Tensor::constant(&[3, height, width], render.rgb);
        ppm::write_ppm(&out_dir.join(&spec.image_path), &img)?;
        ppm::write_pfm(
            &out_dir.join(format!("depth_{i:03}.pfm")),
            height,
            width,
            &render.depth,
        )?;
    }
    save_manifest(&out_dir.join(super::MANIFEST_NAME), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fronto_cam(width: usize, height: usize) -> CameraView<f64> {
        camera_rig(1, 0.0, width, height)[0].to_camera(RIG_NEAR, RIG_FAR)
    }

    #[test]
    fn slab_fronto_matches_closed_form() {
        // constant-albedo slab: pixel = albedo * (1 - exp(-sigma * L)),
        // L = thickness * |dir| for rays crossing both planes
        let field = Field::Slab {
            z0: SLAB_Z0,
            z1: SLAB_Z1,
            sigma: SLAB_SIGMA,
            albedo: Albedo::Constant([0.3, 0.6, 0.9]),
        };
        let cam = fronto_cam(16, 16);
        let render = oracle_render(&field, &cam, 1024);
        let rays = make_rays(&cam, 1, 4, DepthSpacing::Linear).unwrap();
        for r in 0..rays.n_rays() {
            let dirn = crate::geometry::v_norm(rays.dirs[r]);
            // slab planes are world z; fronto camera looks down +z from -z
            let l = (SLAB_Z1 - SLAB_Z0) * dirn;
            let opacity = 1.0 - (-SLAB_SIGMA * l).exp();
            for c in 0..3 {
                let want = [0.3, 0.6, 0.9][c] * opacity;
                let got = render.rgb[c * 256 + r];
                assert!((got - want).abs() < 2e-3, "ray {r} ch {c}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn oracle_converges_in_sample_count() {
        let field = Preset::Sphere.field();
        let cam = fronto_cam(8, 8);
        let a = oracle_render(&field, &cam, 512);
        let b = oracle_render(&field, &cam, 1024);
        let max_diff = a
            .rgb
            .iter()
            .zip(&b.rgb)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-2, "max diff {max_diff}");
        let mean_diff: f64 =
            a.rgb.iter().zip(&b.rgb).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.rgb.len() as f64;
        assert!(mean_diff < 1e-3, "mean diff {mean_diff}");
    }

    #[test]
    fn zero_baseline_views_identical() {
        let dir = tempfile::tempdir().unwrap();
        synth_scene(Preset::Slab, 3, 0.0, 8, 8, 64, dir.path()).unwrap();
        let a = std::fs::read(dir.path().join("view_000.ppm")).unwrap();
        let b = std::fs::read(dir.path().join("view_001.ppm")).unwrap();
        let c = std::fs::read(dir.path().join("view_002.ppm")).unwrap();
        assert_eq!(a, b);
        assert_eq!(b, c);
    }

    #[test]
    fn scene_dir_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        synth_scene(Preset::TwoSpheres, 3, 10.0, 8, 8, 64, dir.path()).unwrap();
        let scene = crate::scene::load_scene::<f32>(dir.path()).unwrap();
        assert_eq!(scene.views.len(), 3);
        assert!(scene.views[0].image.is_some());
    }

    #[test]
    fn depth_of_slab_front_within_bin() {
        let field = Field::Slab {
            z0: SLAB_Z0,
            z1: SLAB_Z1,
            sigma: 400.0,
            albedo: Albedo::Constant([1.0, 1.0, 1.0]),
        };
        let cam = fronto_cam(8, 8);
        let d = 256;
        let render = oracle_render(&field, &cam, d);
        let bin = (RIG_FAR - RIG_NEAR) / d as f64;
        // center pixel: front of slab sits at camera depth rig_radius + z0
        let front = RIG_RADIUS + SLAB_Z0;
        let center = render.depth[4 * 8 + 4];
        assert!(
            (center - front).abs() < bin + 1.0 / 400.0,
            "depth {center} vs front {front} (bin {bin})"
        );
    }
}
