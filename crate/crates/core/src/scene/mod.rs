//! Scene manifests, image I/O, checkpoints and the synthetic-scene
//! generator.
//!
//! Manifest grammar (UTF-8, `#` comments):
//!   near = <float>
//!   far = <float>
//!   view {
//!     image_path = <relative path>
//!     width = <int>      height = <int>   (one key per line)
//!     fx = <float>  fy = <float>  cx = <float>  cy = <float>
//!     world_to_camera = <16 floats, row-major>
//!   }

pub mod checkpoint;
pub mod ppm;
pub mod synth;

use crate::error::Error;
use crate::geometry::{CameraView, Mat4};
use crate::scalar::Scalar;
use crate::Result;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSpec {
    pub image_path: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_camera: Mat4,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneManifest {
    pub near: f64,
    pub far: f64,
    pub views: Vec<ViewSpec>,
}

impl SceneManifest {
    pub fn validate(&self, path: &Path) -> Result<()> {
        if !(self.far > self.near) {
            return Err(Error::Contract(format!(
                "manifest {}: field `far` ({}) must exceed `near` ({})",
                path.display(),
                self.far,
                self.near
            )));
        }
        for (i, v) in self.views.iter().enumerate() {
            let cam: CameraView<f64> = v.to_camera(self.near, self.far);
            cam.validate(1e-4).map_err(|e| {
                Error::Contract(format!("manifest {} view {i}: {e}", path.display()))
            })?;
        }
        Ok(())
    }
}

impl ViewSpec {
    pub fn to_camera<T: Scalar>(&self, near: f64, far: f64) -> CameraView<T> {
        CameraView {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            world_to_camera: self.world_to_camera,
            near,
            far,
            width: self.width,
            height: self.height,
            image: None,
        }
    }
}

pub fn save_manifest(path: &Path, m: &SceneManifest) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "near = {}", m.near);
    let _ = writeln!(out, "far = {}", m.far);
    for v in &m.views {
        let _ = writeln!(out, "view {{");
        let _ = writeln!(out, "  image_path = {}", v.image_path);
        let _ = writeln!(out, "  width = {}", v.width);
        let _ = writeln!(out, "  height = {}", v.height);
        let _ = writeln!(out, "  fx = {}", v.fx);
        let _ = writeln!(out, "  fy = {}", v.fy);
        let _ = writeln!(out, "  cx = {}", v.cx);
        let _ = writeln!(out, "  cy = {}", v.cy);
        let mut mat = String::new();
        for r in 0..4 {
            for c in 0..4 {
                if !mat.is_empty() {
                    mat.push(' ');
                }
                let _ = write!(mat, "{}", v.world_to_camera[r][c]);
            }
        }
        let _ = writeln!(out, "  world_to_camera = {mat}");
        let _ = writeln!(out, "}}");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct ViewBuilder {
    opened_at: usize,
    image_path: Option<String>,
    fx: Option<f64>,
    fy: Option<f64>,
    cx: Option<f64>,
    cy: Option<f64>,
    width: Option<usize>,
    height: Option<usize>,
    world_to_camera: Option<Mat4>,
}

impl ViewBuilder {
    fn new(line: usize) -> Self {
        Self {
            opened_at: line,
            image_path: None,
            fx: None,
            fy: None,
            cx: None,
            cy: None,
            width: None,
            height: None,
            world_to_camera: None,
        }
    }

    fn finish(self, path: &Path) -> Result<ViewSpec> {
        let missing = |field: &str| {
            Error::parse(
                path,
                self.opened_at,
                format!("view block missing field `{field}`"),
            )
        };
        Ok(ViewSpec {
            image_path: self.image_path.ok_or_else(|| missing("image_path"))?,
            fx: self.fx.ok_or_else(|| missing("fx"))?,
            fy: self.fy.ok_or_else(|| missing("fy"))?,
            cx: self.cx.ok_or_else(|| missing("cx"))?,
            cy: self.cy.ok_or_else(|| missing("cy"))?,
            width: self.width.ok_or_else(|| missing("width"))?,
            height: self.height.ok_or_else(|| missing("height"))?,
            world_to_camera: self.world_to_camera.ok_or_else(|| missing("world_to_camera"))?,
        })
    }
}

pub fn load_manifest(path: &Path) -> Result<SceneManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut near: Option<f64> = None;
    let mut far: Option<f64> = None;
    let mut views: Vec<ViewSpec> = Vec::new();
    let mut current: Option<ViewBuilder> = None;

    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line == "view {" {
            if current.is_some() {
                return Err(Error::parse(path, line_no, "nested view block"));
            }
            current = Some(ViewBuilder::new(line_no));
            continue;
        }
        if line == "}" {
            let b = current
                .take()
                .ok_or_else(|| Error::parse(path, line_no, "unmatched `}`"))?;
            views.push(b.finish(path)?);
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::parse(path, line_no, format!("expected `key = value`, got `{line}`"))
        })?;
        let (key, value) = (key.trim(), value.trim());
        let fparse = |v: &str, field: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::parse(path, line_no, format!("invalid float for `{field}`: `{v}`")))
        };
        let iparse = |v: &str, field: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::parse(path, line_no, format!("invalid integer for `{field}`: `{v}`")))
        };
        match (&mut current, key) {
            (None, "near") => near = Some(fparse(value, "near")?),
            (None, "far") => far = Some(fparse(value, "far")?),
            (None, other) => {
                return Err(Error::parse(path, line_no, format!("unknown scene key `{other}`")))
            }
            (Some(b), "image_path") => b.image_path = Some(value.to_string()),
            (Some(b), "fx") => b.fx = Some(fparse(value, "fx")?),
            (Some(b), "fy") => b.fy = Some(fparse(value, "fy")?),
            (Some(b), "cx") => b.cx = Some(fparse(value, "cx")?),
            (Some(b), "cy") => b.cy = Some(fparse(value, "cy")?),
            (Some(b), "width") => b.width = Some(iparse(value, "width")?),
            (Some(b), "height") => b.height = Some(iparse(value, "height")?),
            (Some(b), "world_to_camera") => {
                let vals: Vec<f64> = value
                    .split_whitespace()
                    .map(|s| fparse(s, "world_to_camera"))
                    .collect::<Result<_>>()?;
                if vals.len() != 16 {
                    return Err(Error::parse(
                        path,
                        line_no,
                        format!("world_to_camera wants 16 floats, got {}", vals.len()),
                    ));
                }
                let mut m = [[0.0; 4]; 4];
                for r in 0..4 {
                    for c in 0..4 {
                        m[r][c] = vals[r * 4 + c];
                    }
                }
                b.world_to_camera = Some(m);
            }
            (Some(_), other) => {
                return Err(Error::parse(path, line_no, format!("unknown view key `{other}`")))
            }
        }
    }
    if current.is_some() {
        return Err(Error::parse(path, text.lines().count(), "unterminated view block"));
    }
    let manifest = SceneManifest {
        near: near.ok_or_else(|| Error::parse(path, 1, "missing scene field `near`"))?,
        far: far.ok_or_else(|| Error::parse(path, 1, "missing scene field `far`"))?,
        views,
    };
    manifest.validate(path)?;
    Ok(manifest)
}

/// A loaded scene: cameras with images attached, ready for the pipeline.
pub struct Scene<T: Scalar> {
    pub dir: PathBuf,
    pub manifest: SceneManifest,
    pub views: Vec<CameraView<T>>,
}

pub const MANIFEST_NAME: &str = "scene.txt";

/// Load manifest + all referenced images; checks that image dimensions
/// match the manifest.
pub fn load_scene<T: Scalar>(dir: &Path) -> Result<Scene<T>> {
    let mpath = dir.join(MANIFEST_NAME);
    let manifest = load_manifest(&mpath)?;
    let mut views = Vec::with_capacity(manifest.views.len());
    for (i, spec) in manifest.views.iter().enumerate() {
        let ipath = dir.join(&spec.image_path);
        let image = ppm::read_ppm::<T>(&ipath)?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        if h != spec.height || w != spec.width {
            return Err(Error::Contract(format!(
                "view {i}: image {} is {w}x{h} but manifest says {}x{}",
                ipath.display(),
                spec.width,
                spec.height
            )));
        }
        let mut cam: CameraView<T> = spec.to_camera(manifest.near, manifest.far);
        cam.image = Some(image);
        views.push(cam);
    }
    Ok(Scene {
        dir: dir.to_path_buf(),
        manifest,
        views,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::mat4_identity;

    fn manifest_fixture() -> SceneManifest {
        SceneManifest {
            near: 1.25,
            far: 4.5,
            views: vec![ViewSpec {
                image_path: "view_000.ppm".into(),
                fx: 64.0,
                fy: 60.0,
                cx: 32.0,
                cy: 31.5,
                world_to_camera: mat4_identity(),
                width: 8,
                height: 8,
            }],
        }
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scene.txt");
        let m = manifest_fixture();
        save_manifest(&p, &m).unwrap();
        let back = load_manifest(&p).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn far_not_above_near_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scene.txt");
        let mut m = manifest_fixture();
        m.far = 1.0;
        save_manifest(&p, &m).unwrap();
        match load_manifest(&p) {
            Err(Error::Contract(msg)) => assert!(msg.contains("far"), "{msg}"),
            other => panic!("expected contract error, got {other:?}"),
        }
    }

    #[test]
    fn non_orthonormal_rotation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scene.txt");
        let mut m = manifest_fixture();
        m.views[0].world_to_camera[0][0] = 1.01;
        save_manifest(&p, &m).unwrap();
        assert!(load_manifest(&p).is_err());
    }

    #[test]
    fn missing_field_names_it() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scene.txt");
        std::fs::write(
            &p,
            "near = 1\nfar = 2\nview {\n  image_path = a.ppm\n}\n",
        )
        .unwrap();
        match load_manifest(&p) {
            Err(Error::Parse { msg, .. }) => assert!(msg.contains("fx"), "{msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_image_is_io_error_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(MANIFEST_NAME);
        save_manifest(&p, &manifest_fixture()).unwrap();
        match load_scene::<f32>(dir.path()) {
            Err(Error::Io { path, .. }) => {
                assert!(path.to_string_lossy().contains("view_000.ppm"))
            }
            Err(other) => panic!("expected io error, got {other:?}"),
            Ok(_) => panic!("expected io error, got success"),
        }
    }
}
