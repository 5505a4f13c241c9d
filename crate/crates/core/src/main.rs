use clap::{Parser, Subcommand};
use frustumfield::config::{Stage, TrainConfig};
use frustumfield::error::Error;
use frustumfield::geometry::CameraView;
use frustumfield::model::Model;
use frustumfield::render;
use frustumfield::scene::synth::Preset;
use frustumfield::scene::{load_scene, ppm};
use frustumfield::tensor::{no_grad, Tensor};
use frustumfield::train;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "frustumfield", about = "Feed-forward radiance-field engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene (PPM views + ground-truth depth + manifest)
    Synth {
        #[arg(long)]
        preset: String,
        #[arg(long, default_value_t = 3)]
        views: usize,
        #[arg(long = "baseline-deg", default_value_t = 10.0)]
        baseline_deg: f64,
        /// resolution as HxW, e.g. 64x64
        #[arg(long, default_value = "64x64")]
        res: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// oracle samples per ray
        #[arg(long = "d-oracle", default_value_t = 512)]
        d_oracle: usize,
    },
    /// Train a coarse or fine model on a scene directory
    Train {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value = "coarse")]
        stage: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "coarse-ckpt")]
        coarse_ckpt: Option<PathBuf>,
    },
    /// Render a view (by id or pose file) from a checkpoint
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        view: Option<usize>,
        #[arg(long)]
        pose: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        patches: usize,
        #[arg(long, default_value_t = 0)]
        overlap: usize,
        #[arg(long = "input-views", default_value_t = 3)]
        input_views: usize,
        /// also write a depth map (PPM grayscale, or PFM if the path ends .pfm)
        #[arg(long)]
        depth: Option<PathBuf>,
        /// also write a normal map (PPM, components mapped to [0,1])
        #[arg(long)]
        normal: Option<PathBuf>,
    },
    /// Render held-out views and report PSNR/SSIM
    Eval {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// comma-separated view ids
        #[arg(long)]
        views: String,
        #[arg(long)]
        report: PathBuf,
        #[arg(long = "input-views", default_value_t = 3)]
        input_views: usize,
        /// directory for rendered PPMs (defaults next to the report)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every differentiable op (f64)
    Gradcheck {
        #[arg(long)]
        op: Option<String>,
    },
}

fn parse_res(s: &str) -> Result<(usize, usize), Error> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("bad --res `{s}`, want HxW")))?;
    let h = h.parse().map_err(|_| Error::Config(format!("bad height in --res `{s}`")))?;
    let w = w.parse().map_err(|_| Error::Config(format!("bad width in --res `{s}`")))?;
    Ok((h, w))
}

/// Pose file: flat `key = value` lines (fx, fy, cx, cy, width, height,
/// world_to_camera, optional near/far).
fn load_pose(path: &Path, near: f64, far: f64) -> Result<CameraView<f32>, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cam = CameraView::<f32> {
        fx: 0.0,
        fy: 0.0,
        cx: 0.0,
        cy: 0.0,
        world_to_camera: frustumfield::geometry::mat4_identity(),
        near,
        far,
        width: 0,
        height: 0,
        image: None,
    };
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, ln + 1, "expected `key = value`"))?;
        let (key, value) = (key.trim(), value.trim());
        let fval = |v: &str| -> Result<f64, Error> {
            v.parse().map_err(|_| Error::parse(path, ln + 1, format!("bad float `{v}`")))
        };
        match key {
            "fx" => cam.fx = fval(value)?,
            "fy" => cam.fy = fval(value)?,
            "cx" => cam.cx = fval(value)?,
            "cy" => cam.cy = fval(value)?,
            "near" => cam.near = fval(value)?,
            "far" => cam.far = fval(value)?,
            "width" => cam.width = value.parse().map_err(|_| Error::parse(path, ln + 1, "bad width"))?,
            "height" => cam.height = value.parse().map_err(|_| Error::parse(path, ln + 1, "bad height"))?,
            "world_to_camera" => {
                let vals: Vec<f64> = value
                    .split_whitespace()
                    .map(fval)
                    .collect::<Result<_, _>>()?;
                if vals.len() != 16 {
                    return Err(Error::parse(path, ln + 1, "world_to_camera wants 16 floats"));
                }
                for r in 0..4 {
                    for c in 0..4 {
                        cam.world_to_camera[r][c] = vals[r * 4 + c];
                    }
                }
            }
            other => return Err(Error::parse(path, ln + 1, format!("unknown pose key `{other}`"))),
        }
    }
    if cam.fx <= 0.0 || cam.width == 0 || cam.height == 0 {
        return Err(Error::Contract(format!(
            "pose file {} must set fx, fy, width, height",
            path.display()
        )));
    }
    cam.validate(1e-4)?;
    Ok(cam)
}

fn write_depth_map(path: &Path, out: &render::RenderOutput<f32>, near: f64, far: f64) -> Result<(), Error> {
    let sh = out.depth.shape().to_vec();
    let (h, w) = (sh[0], sh[1]);
    let depth: Vec<f64> = out.depth.data().iter().map(|v| *v as f64).collect();
    if path.extension().is_some_and(|e| e == "pfm") {
        return ppm::write_pfm(path, h, w, &depth);
    }
    let mut rgb = vec![0.0f32; 3 * h * w];
    for (i, d) in depth.iter().enumerate() {
        let v = (((d - near) / (far - near)).clamp(0.0, 1.0)) as f32;
        for c in 0..3 {
            rgb[c * h * w + i] = v;
        }
    }
    ppm::write_ppm(path, &Tensor::constant(&[3, h, w], rgb))
}

fn write_normal_map(path: &Path, out: &render::RenderOutput<f32>, cam: &CameraView<f32>) -> Result<(), Error> {
    let dn = render::render_depth_normal(out, cam);
    let (h, w) = (dn.height, dn.width);
    let mut rgb = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            let v = if dn.valid[i] { (dn.normal[i][c] * 0.5 + 0.5) as f32 } else { 0.0 };
            rgb[c * w * h + i] = v;
        }
    }
    ppm::write_ppm(path, &Tensor::constant(&[3, h, w], rgb))
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth {
            preset,
            views,
            baseline_deg,
            res,
            out,
            seed,
            d_oracle,
        } => {
            let preset = Preset::parse(&preset)
                .ok_or_else(|| Error::Config(format!("unknown preset `{preset}`")))?;
            let (h, w) = parse_res(&res)?;
            let _ = seed; // fields are closed forms; the rig is deterministic
            frustumfield::scene::synth::synth_scene(preset, views, baseline_deg, w, h, d_oracle, &out)?;
            println!("wrote {views} views to {}", out.display());
            Ok(())
        }
        Command::Train {
            scene,
            stage,
            steps,
            seed,
            config,
            out,
            coarse_ckpt,
        } => {
            let mut cfg = match config {
                Some(path) => TrainConfig::from_file(&path)?,
                None => TrainConfig::toy(),
            };
            cfg.stage = match stage.as_str() {
                "coarse" => Stage::Coarse,
                "fine" => Stage::Fine,
                other => return Err(Error::Config(format!("stage must be coarse|fine, got `{other}`"))),
            };
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let report = train::train(&cfg, &scene, &out, coarse_ckpt.as_deref())?;
            for (step, loss) in &report.log {
                println!("step {step:6}  loss {loss:.6}");
            }
            println!(
                "trained {} steps ({} params), final loss {:.6} -> {}",
                report.steps,
                report.params,
                report.final_loss,
                out.display()
            );
            Ok(())
        }
        Command::Render {
            scene,
            ckpt,
            view,
            pose,
            out,
            patches,
            overlap,
            input_views,
            depth,
            normal,
        } => {
            let sc = load_scene::<f32>(&scene)?;
            let model = Model::<f32>::load(&ckpt)?;
            let target: CameraView<f32> = match (view, pose) {
                (Some(id), None) => {
                    if id >= sc.views.len() {
                        return Err(Error::UnknownView(id));
                    }
                    let mut c = sc.views[id].clone();
                    c.image = None;
                    c
                }
                (None, Some(p)) => load_pose(&p, sc.manifest.near, sc.manifest.far)?,
                _ => {
                    return Err(Error::Config(
                        "render: pass exactly one of --view ID or --pose FILE".into(),
                    ))
                }
            };
            let pool: Vec<usize> = (0..sc.views.len())
                .filter(|&i| view != Some(i))
                .collect();
            let idx = train::nearest_views(&sc.views, &target, input_views.min(pool.len()), &pool);
            let inputs: Vec<CameraView<f32>> = idx.iter().map(|&i| sc.views[i].clone()).collect();
            let rendered = no_grad(|| -> Result<render::RenderOutput<f32>, Error> {
                if patches > 1 {
                    render::render_patched(&model, &inputs, &target, patches, overlap)
                } else {
                    let r = render::render(&model, &inputs, &target, false, None)?;
                    Ok(r.fine.unwrap_or(r.coarse))
                }
            })?;
            ppm::write_ppm(&out, &rendered.rgb)?;
            if let Some(p) = depth {
                write_depth_map(&p, &rendered, target.near, target.far)?;
            }
            if let Some(p) = normal {
                write_normal_map(&p, &rendered, &target)?;
            }
            println!("rendered {}x{} -> {}", target.width, target.height, out.display());
            Ok(())
        }
        Command::Eval {
            scene,
            ckpt,
            views,
            report,
            input_views,
            out,
        } => {
            let sc = load_scene::<f32>(&scene)?;
            let model = Model::<f32>::load(&ckpt)?;
            let ids: Vec<usize> = views
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad view id `{s}`"))))
                .collect::<Result<_, _>>()?;
            let render_dir = out.unwrap_or_else(|| {
                report
                    .parent()
                    .map(|p| p.join("renders"))
                    .unwrap_or_else(|| PathBuf::from("renders"))
            });
            let rep = train::evaluate(&model, &sc, &ids, input_views, None, Some(&render_dir))?;
            let mut text = String::new();
            for e in &rep.entries {
                text.push_str(&format!(
                    "view {:3}  psnr {:7.3}  ssim {:.4}\n",
                    e.view, e.metrics.psnr, e.metrics.ssim
                ));
            }
            text.push_str(&format!(
                "mean      psnr {:7.3}  ssim {:.4}\n",
                rep.mean.psnr, rep.mean.ssim
            ));
            std::fs::write(&report, &text).map_err(|e| Error::io(&report, e))?;
            print!("{text}");
            Ok(())
        }
        Command::Gradcheck { op } => {
            let results = frustumfield::gradsuite::run(op.as_deref());
            if results.is_empty() {
                return Err(Error::Config("no gradcheck matches that name".into()));
            }
            let mut any_fail = false;
            println!("{:<26} {:>12} {:>10}  result", "op", "max_rel_err", "tol");
            for r in &results {
                let status = if r.pass { "PASS" } else { "FAIL" };
                any_fail |= !r.pass;
                println!("{:<26} {:>12.3e} {:>10.0e}  {status}", r.name, r.max_err, r.tol);
                if let Some(d) = &r.detail {
                    println!("    {d}");
                }
            }
            if any_fail {
                return Err(Error::NonFinite("gradcheck failures (see table)".into()));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
