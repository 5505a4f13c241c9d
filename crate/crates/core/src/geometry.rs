//! Cameras, rays and plane-sweep depth discretization.
//!
//! Conventions (fixed; every test depends on them):
//! - right-handed, camera looks down +z, image x right, image y down;
//! - pixel (i, j) has its center at (i + 0.5, j + 0.5) in pixel units;
//! - `world_to_camera` is a row-major rigid 4x4, p_cam = R p + t;
//! - depth means camera-z of the target view, not distance along the ray.
//!
//! All geometry runs in f64 regardless of the engine precision.

use crate::error::Error;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

pub type Vec3 = [f64; 3];
pub type Mat4 = [[f64; 4]; 4];

pub fn v_add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn v_sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn v_scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn v_dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn v_cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn v_norm(a: Vec3) -> f64 {
    v_dot(a, a).sqrt()
}

pub fn v_normalize(a: Vec3) -> Vec3 {
    let n = v_norm(a);
    v_scale(a, 1.0 / n)
}

pub fn mat4_identity() -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

/// Depth plane spacing along the target camera's z axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthSpacing {
    Linear,
    Inverse,
}

/// A posed pinhole view; `image` is absent for a pure target pose.
#[derive(Clone)]
pub struct CameraView<T: Scalar> {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_camera: Mat4,
    pub near: f64,
    pub far: f64,
    pub width: usize,
    pub height: usize,
    pub image: Option<Tensor<T>>,
}

impl<T: Scalar> CameraView<T> {
    pub fn validate(&self, rot_tol: f64) -> Result<()> {
        if !(self.far > self.near && self.near > 0.0) {
            return Err(Error::Contract(format!(
                "camera depth bounds must satisfy far > near > 0, got near={} far={}",
                self.near, self.far
            )));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Contract(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for (ri, rj) in r.iter().map(|row| (row[i], row[j])) {
                    dot += ri * rj;
                }
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > rot_tol {
                    return Err(Error::Contract(format!(
                        "rotation block not orthonormal: |RtR - I|[{i}][{j}] = {:.3e}",
                        (dot - want).abs()
                    )));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > rot_tol * 10.0 {
            return Err(Error::Contract(format!(
                "rotation block determinant {det} is not +1"
            )));
        }
        Ok(())
    }

    fn rotation(&self) -> [[f64; 3]; 3] {
        let m = &self.world_to_camera;
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }

    fn translation(&self) -> Vec3 {
        [
            self.world_to_camera[0][3],
            self.world_to_camera[1][3],
            self.world_to_camera[2][3],
        ]
    }

    pub fn camera_center(&self) -> Vec3 {
        // C = -R^T t
        let r = self.rotation();
        let t = self.translation();
        [
            -(r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2]),
            -(r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2]),
            -(r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2]),
        ]
    }

    pub fn world_to_cam_point(&self, p: Vec3) -> Vec3 {
        let r = self.rotation();
        let t = self.translation();
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    pub fn cam_to_world_dir(&self, d: Vec3) -> Vec3 {
        let r = self.rotation();
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    /// Project a world point: returns (u, v, camera-z). Points with
    /// z <= 1e-6 are flagged behind-camera, not an error.
    pub fn project(&self, p: Vec3) -> Projection {
        let pc = self.world_to_cam_point(p);
        let z = pc[2];
        if z <= 1e-6 {
            return Projection {
                u: f64::NAN,
                v: f64::NAN,
                depth: z,
                behind: true,
            };
        }
        Projection {
            u: self.fx * pc[0] / z + self.cx,
            v: self.fy * pc[1] / z + self.cy,
            depth: z,
            behind: false,
        }
    }

    /// Exact inverse of `project` for valid depths.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        assert!(depth > 0.0, "unproject: depth must be positive, got {depth}");
        let x = (u - self.cx) / self.fx * depth;
        let y = (v - self.cy) / self.fy * depth;
        let pc = [x, y, depth];
        let c = self.camera_center();
        v_add(c, self.cam_to_world_dir(pc))
    }

    /// World direction of the optical axis.
    pub fn optical_axis(&self) -> Vec3 {
        self.cam_to_world_dir([0.0, 0.0, 1.0])
    }

    /// Same pose and depth range, intrinsics shifted for a crop whose top
    /// left corner is at pixel (x0, y0).
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> CameraView<T> {
        CameraView {
            cx: self.cx - x0 as f64,
            cy: self.cy - y0 as f64,
            width: w,
            height: h,
            image: None,
            ..self.clone()
        }
    }

    /// Padded camera: same intrinsics, larger canvas (content top-left).
    pub fn padded(&self, w: usize, h: usize) -> CameraView<T> {
        CameraView {
            width: w,
            height: h,
            image: None,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub behind: bool,
}

/// world_to_camera for a camera at `eye` looking at `center`.
pub fn look_at(eye: Vec3, center: Vec3, up: Vec3) -> Mat4 {
    let z = v_normalize(v_sub(center, eye));
    let x = v_normalize(v_cross(z, up));
    let y = v_cross(z, x); // y points "down" for an up-ish `up`
    let mut m = mat4_identity();
    for (i, axis) in [x, y, z].iter().enumerate() {
        m[i][0] = axis[0];
        m[i][1] = axis[1];
        m[i][2] = axis[2];
        m[i][3] = -v_dot(*axis, eye);
    }
    m
}

/// Per-sample depths: one shared plane set, or per-ray values (fine stage).
#[derive(Clone)]
pub enum Depths {
    Shared(Vec<f64>),
    PerRay { d: usize, values: Vec<f64> }, // ray-major (h*w, d), each row ascending
}

impl Depths {
    pub fn count(&self) -> usize {
        match self {
            Depths::Shared(v) => v.len(),
            Depths::PerRay { d, .. } => *d,
        }
    }

    pub fn at(&self, ray: usize, d: usize) -> f64 {
        match self {
            Depths::Shared(v) => v[d],
            Depths::PerRay { d: nd, values } => values[ray * nd + d],
        }
    }
}

/// Rays through the target view: one per s x s pixel block, plus the depth
/// discretization shared by volume construction and compositing.
pub struct RayBundle {
    pub width: usize,
    pub height: usize,
    pub subsample: usize,
    /// world-space ray origins (camera center), one per ray, row-major (y, x)
    pub origins: Vec<Vec3>,
    /// world-space directions scaled so the target-camera-z component is 1
    pub dirs: Vec<Vec3>,
    pub depths: Depths,
}

impl RayBundle {
    pub fn n_rays(&self) -> usize {
        self.width * self.height
    }

    pub fn n_depths(&self) -> usize {
        self.depths.count()
    }

    /// World point of sample (d, ray).
    pub fn point(&self, ray: usize, d: usize) -> Vec3 {
        let t = self.depths.at(ray, d);
        v_add(self.origins[ray], v_scale(self.dirs[ray], t))
    }

    /// Per-sample distances along each ray, (D, h, w) layout row-major;
    /// delta[d] = (depth[d+1] - depth[d]) * |dir|, last one replicated.
    pub fn deltas(&self) -> Vec<f64> {
        let (nr, nd) = (self.n_rays(), self.n_depths());
        let mut out = vec![0.0; nd * nr];
        for r in 0..nr {
            let norm = v_norm(self.dirs[r]);
            for d in 0..nd {
                let gap = if d + 1 < nd {
                    self.depths.at(r, d + 1) - self.depths.at(r, d)
                } else if nd >= 2 {
                    self.depths.at(r, nd - 1) - self.depths.at(r, nd - 2)
                } else {
                    1.0
                };
                out[d * nr + r] = gap * norm;
            }
        }
        out
    }

    pub fn deltas_tensor<T: Scalar>(&self) -> Tensor<T> {
        let d = self.deltas();
        Tensor::constant(
            &[self.n_depths(), self.height, self.width],
            d.into_iter().map(T::from_f64).collect(),
        )
    }

    /// Sample depths as a (D, h, w) tensor (camera-z of the target view).
    pub fn depths_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (nr, nd) = (self.n_rays(), self.n_depths());
        let mut out = vec![T::ZERO; nd * nr];
        for r in 0..nr {
            for d in 0..nd {
                out[d * nr + r] = T::from_f64(self.depths.at(r, d));
            }
        }
        Tensor::constant(&[nd, self.height, self.width], out)
    }

    /// All sample points in (d, y, x) row-major order.
    pub fn points(&self) -> Vec<Vec3> {
        let (nr, nd) = (self.n_rays(), self.n_depths());
        let mut out = Vec::with_capacity(nr * nd);
        for d in 0..nd {
            for r in 0..nr {
                out.push(self.point(r, d));
            }
        }
        out
    }
}

pub fn plane_depths(near: f64, far: f64, d: usize, spacing: DepthSpacing) -> Vec<f64> {
    let step = 1.0 / d as f64;
    (0..d)
        .map(|i| {
            let t = (i as f64 + 0.5) * step;
            match spacing {
                DepthSpacing::Linear => near + t * (far - near),
                DepthSpacing::Inverse => 1.0 / (1.0 / near + t * (1.0 / far - 1.0 / near)),
            }
        })
        .collect()
}

/// Cast one ray per s x s pixel block of the target view through the block
/// center, with D depth planes at bin midpoints between near and far.
pub fn make_rays<T: Scalar>(
    target: &CameraView<T>,
    s: usize,
    d: usize,
    spacing: DepthSpacing,
) -> Result<RayBundle> {
    if d < 2 {
        return Err(Error::Contract(format!("make_rays: D must be >= 2, got {d}")));
    }
    if target.near >= target.far {
        return Err(Error::Contract(format!(
            "make_rays: near {} must be < far {}",
            target.near, target.far
        )));
    }
    if target.width % s != 0 || target.height % s != 0 {
        return Err(Error::Contract(format!(
            "make_rays: subsample {s} must divide target size {}x{} (pad first)",
            target.width, target.height
        )));
    }
    let (w, h) = (target.width / s, target.height / s);
    let center = target.camera_center();
    let mut origins = Vec::with_capacity(w * h);
    let mut dirs = Vec::with_capacity(w * h);
    for by in 0..h {
        for bx in 0..w {
            let u = (bx as f64 + 0.5) * s as f64;
            let v = (by as f64 + 0.5) * s as f64;
            let dir_cam = [(u - target.cx) / target.fx, (v - target.cy) / target.fy, 1.0];
            origins.push(center);
            dirs.push(target.cam_to_world_dir(dir_cam));
        }
    }
    Ok(RayBundle {
        width: w,
        height: h,
        subsample: s,
        origins,
        dirs,
        depths: Depths::Shared(plane_depths(target.near, target.far, d, spacing)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn cam(fx: f64, fy: f64, cx: f64, cy: f64, pose: Mat4) -> CameraView<f64> {
        CameraView {
            fx,
            fy,
            cx,
            cy,
            world_to_camera: pose,
            near: 1.0,
            far: 3.0,
            width: 8,
            height: 8,
            image: None,
        }
    }

    fn random_pose(rng: &mut RngStream) -> Mat4 {
        let eye = [
            rng.uniform_in(-2.0, 2.0),
            rng.uniform_in(-2.0, 2.0),
            rng.uniform_in(-6.0, -3.0),
        ];
        let center = [
            rng.uniform_in(-0.5, 0.5),
            rng.uniform_in(-0.5, 0.5),
            rng.uniform_in(-0.5, 0.5),
        ];
        look_at(eye, center, [0.0, 1.0, 0.0])
    }

    #[test]
    fn depth_planes_midpoint_rule() {
        let d = plane_depths(1.0, 3.0, 4, DepthSpacing::Linear);
        assert_eq!(d, vec![1.25, 1.75, 2.25, 2.75]);
    }

    #[test]
    fn depth_planes_arithmetic_sequence() {
        let d = plane_depths(0.7, 5.3, 64, DepthSpacing::Linear);
        let step = (5.3 - 0.7) / 64.0;
        for w in d.windows(2) {
            assert!(((w[1] - w[0]) - step).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_spacing_is_increasing() {
        let d = plane_depths(0.5, 10.0, 16, DepthSpacing::Inverse);
        for w in d.windows(2) {
            assert!(w[1] > w[0]);
        }
        assert!(d[0] > 0.5 && *d.last().unwrap() < 10.0);
    }

    #[test]
    fn principal_point_ray_is_optical_axis() {
        let mut rng = RngStream::new(42);
        let pose = random_pose(&mut rng);
        let c = cam(97.0, 88.0, 4.0, 4.0, pose);
        let rays = make_rays(&c, 8, 4, DepthSpacing::Linear).unwrap();
        // single ray through (4, 4) = principal point
        assert_eq!(rays.n_rays(), 1);
        let axis = c.optical_axis();
        let dir = v_normalize(rays.dirs[0]);
        for i in 0..3 {
            assert!((dir[i] - axis[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_intrinsics_ray_formula() {
        let c = CameraView::<f64> {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            world_to_camera: mat4_identity(),
            near: 1.0,
            far: 3.0,
            width: 1,
            height: 1,
            image: None,
        };
        let rays = make_rays(&c, 1, 2, DepthSpacing::Linear).unwrap();
        assert_eq!(rays.dirs[0], [0.5, 0.5, 1.0]);
    }

    #[test]
    fn project_point_on_axis() {
        let c = cam(100.0, 100.0, 50.0, 40.0, mat4_identity());
        let p = c.project([0.0, 0.0, 2.0]);
        assert!(!p.behind);
        assert!((p.u - 50.0).abs() < 1e-12 && (p.v - 40.0).abs() < 1e-12);
        assert!((p.depth - 2.0).abs() < 1e-12);
    }

    #[test]
    fn project_offaxis_formula() {
        let c = cam(100.0, 100.0, 50.0, 50.0, mat4_identity());
        let p = c.project([1.0, 0.0, 2.0]);
        assert!((p.u - 100.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_flagged() {
        let c = cam(100.0, 100.0, 50.0, 50.0, mat4_identity());
        assert!(c.project([0.0, 0.0, -1.0]).behind);
    }

    #[test]
    fn project_unproject_roundtrip_random_poses() {
        let mut rng = RngStream::new(9);
        for _ in 0..1000 {
            let pose = random_pose(&mut rng);
            let c = cam(
                rng.uniform_in(40.0, 200.0),
                rng.uniform_in(40.0, 200.0),
                rng.uniform_in(10.0, 60.0),
                rng.uniform_in(10.0, 60.0),
                pose,
            );
            let u = rng.uniform_in(-20.0, 80.0);
            let v = rng.uniform_in(-20.0, 80.0);
            let depth = rng.uniform_in(0.2, 8.0);
            let p = c.unproject(u, v, depth);
            let proj = c.project(p);
            assert!(!proj.behind);
            assert!((proj.u - u).abs() < 1e-9, "{} vs {}", proj.u, u);
            assert!((proj.v - v).abs() < 1e-9);
            assert!((proj.depth - depth).abs() < 1e-9);
        }
    }

    #[test]
    fn pure_z_translation_moves_along_epipolar_direction() {
        let mut rng = RngStream::new(17);
        let c1 = cam(120.0, 120.0, 33.0, 29.0, mat4_identity());
        let mut pose2 = mat4_identity();
        pose2[2][3] = -0.4; // camera moved +0.4 along its own z
        let c2 = cam(120.0, 120.0, 33.0, 29.0, pose2);
        for _ in 0..100 {
            let p = [
                rng.uniform_in(-1.0, 1.0),
                rng.uniform_in(-1.0, 1.0),
                rng.uniform_in(1.5, 4.0),
            ];
            let a = c1.project(p);
            let b = c2.project(p);
            // radial motion about the shared principal point
            let r1 = [a.u - 33.0, a.v - 29.0];
            let r2 = [b.u - 33.0, b.v - 29.0];
            let cross = r1[0] * r2[1] - r1[1] * r2[0];
            assert!(cross.abs() < 1e-9, "cross = {cross}");
        }
    }

    #[test]
    fn deltas_scale_with_ray_obliquity() {
        let c = cam(4.0, 4.0, 4.0, 4.0, mat4_identity());
        let rays = make_rays(&c, 4, 4, DepthSpacing::Linear).unwrap();
        let deltas = rays.deltas();
        let step = (3.0 - 1.0) / 4.0;
        for (r, dir) in rays.dirs.iter().enumerate() {
            let expect = step * v_norm(*dir);
            for d in 0..4 {
                assert!((deltas[d * rays.n_rays() + r] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn make_rays_contract_errors() {
        let c = cam(4.0, 4.0, 4.0, 4.0, mat4_identity());
        assert!(make_rays(&c, 8, 1, DepthSpacing::Linear).is_err());
        let mut bad = c.clone();
        bad.near = 5.0;
        assert!(make_rays(&bad, 8, 4, DepthSpacing::Linear).is_err());
        assert!(make_rays(&c, 3, 4, DepthSpacing::Linear).is_err());
    }

    #[test]
    fn validate_rejects_sheared_rotation() {
        let mut pose = mat4_identity();
        pose[0][1] = 0.01;
        let c = cam(10.0, 10.0, 4.0, 4.0, pose);
        assert!(c.validate(1e-4).is_err());
        assert!(cam(10.0, 10.0, 4.0, 4.0, mat4_identity()).validate(1e-6).is_ok());
    }
}
