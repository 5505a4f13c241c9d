//! Losses, metrics, the two-stage training loop and evaluation. Training is
//! bitwise reproducible for a fixed seed: every random choice (crops,
//! target selection, stratified samples) comes from streams derived from it.

use crate::config::{Stage, TrainConfig};
use crate::error::Error;
use crate::geometry::CameraView;
use crate::model::Model;
use crate::nn::{param_count, Adam, ParamGroup, Params};
use crate::render;
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::scene::{load_scene, ppm, Scene};
use crate::tensor::{no_grad, Tensor};
use crate::Result;
use std::path::Path;

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel<T: Scalar>() -> Vec<T> {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k.into_iter().map(T::from_f64).collect()
}

/// Separable Gaussian filter, valid padding: (1,H,W,1) -> (1,H-10,W-10,1).
fn gaussian_filter<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let k = gaussian_kernel::<T>();
    let kv = Tensor::constant(&[1, 1, SSIM_WINDOW, 1, 1], k.clone());
    let kh = Tensor::constant(&[1, 1, 1, SSIM_WINDOW, 1], k);
    x.conv3d(&kv, [1, 1, 1], [0, 0, 0])
        .conv3d(&kh, [1, 1, 1], [0, 0, 0])
}

/// Mean structural similarity over channels and windows; 11x11 Gaussian
/// window (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range 1. Differentiable.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let sh = a.shape().to_vec();
    if b.shape() != sh.as_slice() {
        return Err(Error::Dim(format!(
            "ssim: shape mismatch {:?} vs {:?}",
            sh,
            b.shape()
        )));
    }
    if sh.len() != 3 || sh[0] != 3 {
        return Err(Error::Dim(format!("ssim: want (3,H,W), got {sh:?}")));
    }
    let (h, w) = (sh[1], sh[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "ssim: image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut acc: Option<Tensor<T>> = None;
    for c in 0..3 {
        let x = a.slice(0, c, 1).reshape(&[1, h, w, 1]);
        let y = b.slice(0, c, 1).reshape(&[1, h, w, 1]);
        let mx = gaussian_filter(&x);
        let my = gaussian_filter(&y);
        let mxx = gaussian_filter(&x.mul(&x));
        let myy = gaussian_filter(&y.mul(&y));
        let mxy = gaussian_filter(&x.mul(&y));
        let vx = mxx.sub(&mx.mul(&mx));
        let vy = myy.sub(&my.mul(&my));
        let cov = mxy.sub(&mx.mul(&my));
        let num = mx
            .mul(&my)
            .scale(2.0)
            .add_scalar(c1)
            .mul(&cov.scale(2.0).add_scalar(c2));
        let den = mx
            .mul(&mx)
            .add(&my.mul(&my))
            .add_scalar(c1)
            .mul(&vx.add(&vy).add_scalar(c2));
        let m = num.div(&den).mean_all();
        acc = Some(match acc {
            Some(t) => t.add(&m),
            None => m,
        });
    }
    Ok(acc.unwrap().scale(1.0 / 3.0))
}

/// 10 log10(1/MSE) in dB, capped at 99 for MSE < 1e-10. Values in [0,1].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "psnr: shape mismatch");
    let ad = a.data();
    let bd = b.data();
    let mse: f64 = ad
        .iter()
        .zip(bd.iter())
        .map(|(x, y)| (x.to_f64() - y.to_f64()).powi(2))
        .sum::<f64>()
        / ad.len() as f64;
    if mse < 1e-10 {
        99.0
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
}

/// lambda_l1 * mean|pred-gt| + lambda_ssim * (1 - SSIM(pred, gt)).
pub fn loss<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    lambda_l1: f64,
    lambda_ssim: f64,
) -> Result<Tensor<T>> {
    if pred.shape() != gt.shape() {
        return Err(Error::Dim(format!(
            "loss: shape mismatch {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let l1 = pred.sub(gt).abs().mean_all().scale(lambda_l1);
    if lambda_ssim == 0.0 {
        return Ok(l1);
    }
    let s = ssim(pred, gt)?;
    Ok(l1.add(&s.neg().add_scalar(1.0).scale(lambda_ssim)))
}

/// FNV-1a over the f32 bit patterns of all parameters; used by the
/// fine-stage freeze assertion and the determinism tests.
pub fn param_hash<T: Scalar>(params: &Params<T>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (name, p) in params {
        for b in name.as_bytes() {
            h = (h ^ *b as u64).wrapping_mul(0x100_0000_01b3);
        }
        for v in p.data().iter() {
            for b in v.to_f32().to_bits().to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
        }
    }
    h
}

/// Indices of the `k` nearest other views by camera-center distance.
pub fn nearest_views<T: Scalar>(
    views: &[CameraView<T>],
    target: &CameraView<T>,
    k: usize,
    pool: &[usize],
) -> Vec<usize> {
    let tc = target.camera_center();
    let mut scored: Vec<(f64, usize)> = pool
        .iter()
        .map(|&i| {
            let c = views[i].camera_center();
            let d2 = (0..3).map(|a| (c[a] - tc[a]).powi(2)).sum::<f64>();
            (d2, i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, i)| i).collect()
}

pub struct TrainReport {
    pub steps: usize,
    pub final_loss: f64,
    pub log: Vec<(usize, f64)>,
    pub params: usize,
}

/// Two-stage training. Coarse: encoder + volume + decoder with per-group
/// learning rates. Fine: coarse weights loaded and frozen; only the fine
/// volume net and U-Net receive updates (asserted by hash).
pub fn train(
    cfg: &TrainConfig,
    scene_dir: &Path,
    out_ckpt: &Path,
    coarse_ckpt: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let scene: Scene<f32> = load_scene(scene_dir)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.fine = cfg.stage == Stage::Fine;
    let model: Model<f32> = Model::new(&model_cfg, cfg.seed)?;
    if cfg.stage == Stage::Fine {
        let path = coarse_ckpt.ok_or_else(|| {
            Error::Contract("fine stage requires a coarse checkpoint (--coarse-ckpt)".into())
        })?;
        model.load_coarse_from(path)?;
    }

    let train_views: Vec<usize> = if cfg.train_views.is_empty() {
        (0..scene.views.len()).collect()
    } else {
        for &v in &cfg.train_views {
            if v >= scene.views.len() {
                return Err(Error::UnknownView(v));
            }
        }
        cfg.train_views.clone()
    };
    if train_views.len() < cfg.input_views + 1 {
        return Err(Error::Contract(format!(
            "need at least input_views+1 = {} training views, have {}",
            cfg.input_views + 1,
            train_views.len()
        )));
    }

    let groups = match cfg.stage {
        Stage::Coarse => vec![
            ParamGroup {
                lr: cfg.lr_encoder,
                params: model.encoder_params(),
            },
            ParamGroup {
                lr: cfg.lr_decoder,
                params: model.decoder_params(),
            },
        ],
        Stage::Fine => vec![ParamGroup {
            lr: cfg.lr_decoder,
            params: model.fine_stage_params(),
        }],
    };
    let n_params = param_count(&model.parameters());
    let mut opt = Adam::new(groups);
    let coarse_hash_before = param_hash(&model.coarse_stage_params());

    let root = RngStream::new(cfg.seed);
    let mut pick = root.child("targets");
    let mut crops = root.child("crops");
    let mut fine_rng = root.child("fine_samples");

    let mut log = Vec::new();
    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        let target_id = train_views[pick.below(train_views.len())];
        let pool: Vec<usize> = train_views.iter().copied().filter(|&v| v != target_id).collect();
        let inputs_idx = nearest_views(&scene.views, &scene.views[target_id], cfg.input_views, &pool);
        let inputs: Vec<CameraView<f32>> = inputs_idx.iter().map(|&i| scene.views[i].clone()).collect();

        let tv = &scene.views[target_id];
        let (cw, ch) = (cfg.crop.min(tv.width), cfg.crop.min(tv.height));
        let x0 = if tv.width > cw { crops.below(tv.width - cw + 1) } else { 0 };
        let y0 = if tv.height > ch { crops.below(tv.height - ch + 1) } else { 0 };
        let target_cam = tv.crop(x0, y0, cw, ch);
        let gt = tv
            .image
            .as_ref()
            .unwrap()
            .slice(1, y0, ch)
            .slice(2, x0, cw)
            .detach();

        let pred = match cfg.stage {
            Stage::Coarse => render::render_coarse(&model, &inputs, &target_cam)?.out.rgb,
            Stage::Fine => {
                // frozen coarse pass runs without graph recording
                let (pyramids, coarse_out) = no_grad(|| -> Result<_> {
                    let pyr = render::encode_inputs(&model, &inputs)?;
                    let c = render::render_coarse_with(&model, &inputs, &pyr, &target_cam)?;
                    Ok((pyr, c.out))
                })?;
                render::render_fine_with(
                    &model,
                    &inputs,
                    &pyramids,
                    &target_cam,
                    &coarse_out,
                    true,
                    Some(&mut fine_rng),
                )?
                .out
                .rgb
            }
        };
        let l = loss(&pred, &gt, cfg.lambda_l1, cfg.lambda_ssim)?;
        let lv = l.item() as f64;
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at step {step} (target view {target_id}, crop {x0},{y0})"
            )));
        }
        final_loss = lv;
        opt.zero_grad();
        l.backward();
        opt.step();
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            log.push((step, lv));
        }
    }

    if cfg.stage == Stage::Fine {
        let after = param_hash(&model.coarse_stage_params());
        assert_eq!(
            coarse_hash_before, after,
            "coarse parameters changed during fine training"
        );
    }
    model.save(out_ckpt)?;
    Ok(TrainReport {
        steps: cfg.steps,
        final_loss,
        log,
        params: n_params,
    })
}

pub struct EvalEntry {
    pub view: usize,
    pub metrics: Metrics,
}

pub struct EvalReport {
    pub entries: Vec<EvalEntry>,
    pub mean: Metrics,
}

/// Render each listed view from its nearest `input_views` neighbours (drawn
/// from `pool`, or all other views) and score against ground truth. Writes
/// rendered PPMs next to `out_dir` when given.
pub fn evaluate(
    model: &Model<f32>,
    scene: &Scene<f32>,
    view_ids: &[usize],
    input_views: usize,
    pool: Option<&[usize]>,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    let mut entries = Vec::new();
    for &id in view_ids {
        if id >= scene.views.len() {
            return Err(Error::UnknownView(id));
        }
        let target = &scene.views[id];
        let all: Vec<usize> = (0..scene.views.len()).collect();
        let pool_vec: Vec<usize> = pool
            .map(|p| p.to_vec())
            .unwrap_or(all)
            .into_iter()
            .filter(|&v| v != id)
            .collect();
        if pool_vec.len() < input_views {
            return Err(Error::Contract(format!(
                "view {id}: need {input_views} input views, pool has {}",
                pool_vec.len()
            )));
        }
        let idx = nearest_views(&scene.views, target, input_views, &pool_vec);
        let inputs: Vec<CameraView<f32>> = idx.iter().map(|&i| scene.views[i].clone()).collect();
        let mut target_cam = target.clone();
        target_cam.image = None;
        let result = no_grad(|| render::render(model, &inputs, &target_cam, false, None))?;
        let pred = result.fine.unwrap_or(result.coarse).rgb;
        let gt = target.image.as_ref().unwrap();
        let m = Metrics {
            psnr: psnr(&pred, gt),
            ssim: ssim(&pred, gt)?.item() as f64,
        };
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            ppm::write_ppm(&dir.join(format!("render_{id:03}.ppm")), &pred)?;
        }
        entries.push(EvalEntry { view: id, metrics: m });
    }
    let mean = if entries.is_empty() {
        Metrics { psnr: 0.0, ssim: 0.0 }
    } else {
        Metrics {
            psnr: entries.iter().map(|e| e.metrics.psnr).sum::<f64>() / entries.len() as f64,
            ssim: entries.iter().map(|e| e.metrics.ssim).sum::<f64>() / entries.len() as f64,
        }
    };
    Ok(EvalReport { entries, mean })
}

/// Use the nearest input view's own pixels as the prediction for a target
/// view; the floor any learned model must beat on held-out views.
pub fn nearest_view_baseline(scene: &Scene<f32>, target_id: usize, pool: &[usize]) -> Result<Metrics> {
    if target_id >= scene.views.len() {
        return Err(Error::UnknownView(target_id));
    }
    let target = &scene.views[target_id];
    let pool: Vec<usize> = pool.iter().copied().filter(|&v| v != target_id).collect();
    let idx = nearest_views(&scene.views, target, 1, &pool);
    let near = scene.views[idx[0]]
        .image
        .as_ref()
        .ok_or_else(|| Error::Contract("baseline: view has no image".into()))?;
    let gt = target.image.as_ref().unwrap();
    if near.shape() != gt.shape() {
        return Err(Error::Contract("baseline: image size mismatch".into()));
    }
    Ok(Metrics {
        psnr: psnr(near, gt),
        ssim: ssim(near, gt)?.item() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_multi;

    fn img(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = RngStream::new(seed);
        Tensor::leaf(&[3, h, w], (0..3 * h * w).map(|_| rng.uniform()).collect(), true)
    }

    #[test]
    fn ssim_self_is_one() {
        let a = img(1, 16, 16);
        let s = ssim(&a, &a).unwrap().item();
        assert!((s - 1.0).abs() < 1e-9, "ssim(x,x) = {s}");
    }

    #[test]
    fn ssim_inverted_checkerboard_is_negative() {
        let (h, w) = (16, 16);
        let mut data = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[(c * h + y) * w + x] = ((x + y) % 2) as f64;
                }
            }
        }
        let a = Tensor::leaf(&[3, h, w], data.clone(), false);
        let inv: Vec<f64> = data.iter().map(|v| 1.0 - v).collect();
        let b = Tensor::leaf(&[3, h, w], inv, false);
        let s = ssim(&a, &b).unwrap().item();
        assert!(s < 0.0, "ssim of inverted checkerboard = {s}");
    }

    #[test]
    fn ssim_constant_offset_closed_form() {
        let (m1, m2) = (0.4f64, 0.5f64);
        let a = Tensor::<f64>::full(&[3, 12, 12], m1);
        let b = Tensor::<f64>::full(&[3, 12, 12], m2);
        let c1 = 0.01f64 * 0.01;
        let c2 = 0.03f64 * 0.03;
        // variances are zero: ssim = luminance * (C2 / C2) = luminance term
        let want = (2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1) * (c2 / c2);
        let got = ssim(&a, &b).unwrap().item();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn ssim_too_small_rejected() {
        let a = img(1, 8, 8);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn psnr_analytic_values() {
        let a = Tensor::<f64>::full(&[3, 4, 4], 0.5);
        assert_eq!(psnr(&a, &a), 99.0);
        let b = a.add_scalar(0.1); // MSE = 0.01
        assert!((psnr(&a, &b) - 20.0).abs() < 1e-9);
        let c = a.add_scalar(0.01); // MSE = 1e-4
        assert!((psnr(&a, &c) - 40.0).abs() < 1e-9);
    }

    #[test]
    fn loss_zero_iff_equal() {
        let a = img(2, 16, 16);
        let l = loss(&a, &a.detach(), 1.0, 0.5).unwrap().item();
        assert!(l.abs() < 1e-12);
        let b = a.detach().add_scalar(0.1);
        let l1_only = loss(&a, &b, 1.0, 0.0).unwrap().item();
        assert!((l1_only - 0.1).abs() < 1e-9, "l1 = {l1_only}");
        assert!(loss(&a, &b, 1.0, 0.5).unwrap().item() > 0.0);
    }

    #[test]
    fn loss_gradcheck_8x8_crop_l1_only() {
        // SSIM needs >= 11 px; check the l1 path at 8x8 and full loss at 12x12
        let a = img(3, 8, 8);
        let gt = img(4, 8, 8).detach();
        let err = grad_check_multi(|ins| loss(&ins[0], &gt, 1.0, 0.0).unwrap(), &[a], 1e-5).unwrap();
        assert!(err < 1e-3, "l1 gradcheck err = {err}");
    }

    #[test]
    fn full_loss_gradcheck_12x12() {
        let a = img(5, 12, 12);
        let gt = img(6, 12, 12).detach();
        let err = grad_check_multi(
            |ins| loss(&ins[0], &gt, 1.0, 0.5).unwrap(),
            &[a],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "loss gradcheck err = {err}");
    }

    #[test]
    fn param_hash_detects_single_bit() {
        let p: Params<f32> = vec![("w".into(), Tensor::leaf(&[4], vec![1.0, 2.0, 3.0, 4.0], true))];
        let h1 = param_hash(&p);
        p[0].1.data_mut()[2] = f32::from_bits(3.0f32.to_bits() ^ 1);
        assert_ne!(h1, param_hash(&p));
    }
}
