//! Finite-difference validation table covering every differentiable op and
//! every decoder variant, at tiny shapes in f64. Backs both the `gradcheck`
//! CLI subcommand and the acceptance suite.

use crate::config::{DecoderVariant, Elements, ModelConfig};
use crate::decoder::{Decoder, FineUnet};
use crate::encoder::Encoder;
use crate::geometry::{make_rays, mat4_identity, CameraView, Depths, DepthSpacing};
use crate::nn::{Activation, Linear, MultiHeadAttention, Norm, Params};
use crate::rng::RngStream;
use crate::tensor::{grad_check_multi, Tensor};
use crate::volume::{build_volume, FrustumVolume, VolumeNet};

pub const OP_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;

pub struct CheckResult {
    pub name: &'static str,
    pub tol: f64,
    pub max_err: f64,
    pub pass: bool,
    pub detail: Option<String>,
}

fn randn(shape: &[usize], rng: &mut RngStream, scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::leaf(shape, (0..n).map(|_| rng.normal() * scale).collect(), true)
}

fn randu(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::leaf(shape, (0..n).map(|_| rng.uniform()).collect(), true)
}

/// Fixed mixing weights make the scalarized loss sensitive to every output.
fn probe(shape: &[usize], salt: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::constant(shape, (0..n).map(|i| (i as f64 * 0.731 + salt).sin()).collect())
}

fn scalarize(x: &Tensor<f64>, salt: f64) -> Tensor<f64> {
    x.mul(&probe(x.shape(), salt)).sum_all()
}

type CheckFn = Box<dyn Fn(u64) -> Result<f64, String>>;

fn checks() -> Vec<(&'static str, f64, usize, CheckFn)> {
    let mut out: Vec<(&'static str, f64, usize, CheckFn)> = Vec::new();
    let mut op = |name: &'static str, seeds: usize, f: CheckFn| out.push((name, OP_TOL, seeds, f));

    op(
        "add_sub_broadcast",
        5,
        Box::new(|s| {
            let mut rng = RngStream::new(s);
            let a = randn(&[3, 4, 5], &mut rng, 1.0);
            let b = randn(&[4, 1], &mut rng, 1.0);
            grad_check_multi(|i| scalarize(&i[0].add(&i[1]).sub(&i[1].scale(0.3)), 0.1), &[a, b], 1e-5)
        }),
    );
    op(
        "mul_div_broadcast",
        5,
        Box::new(|s| {
            let mut rng = RngStream::new(s);
            let a = randn(&[2, 3, 4], &mut rng, 1.0);
            let b = randu(&[3, 1], &mut rng).add_scalar(0.5); // keep divisor away from 0
            grad_check_multi(
                |i| scalarize(&i[0].mul(&i[1]).div(&i[1].add_scalar(0.3)), 0.2),
                &[a, b],
                1e-5,
            )
        }),
    );
    op(
        "matmul",
        5,
        Box::new(|s| {
            let mut rng = RngStream::new(s);
            let a = randn(&[4, 5], &mut rng, 1.0);
            let b = randn(&[5, 3], &mut rng, 1.0);
            grad_check_multi(|i| scalarize(&i[0].matmul(&i[1]), 0.3), &[a, b], 1e-5)
        }),
    );
    op(
        "bmm_and_sorted",
        5,
        Box::new(|s| {
            let mut rng = RngStream::new(s);
            let a = randn(&[2, 3, 4], &mut rng, 1.0);
            let b = randn(&[2, 4, 2], &mut rng, 1.0);
            grad_check_multi(
                |i| {
                    let x = i[0].bmm(&i[1]);
                    let y = i[0].bmm_sorted(&i[1]);
                    scalarize(&x, 0.4).add(&scalarize(&y, 0.5))
                },
                &[a, b],
                1e-5,
            )
        }),
    );
    op(
        "conv3d_333",
        5,
        Box::new(|s| {
            let mut rng = RngStream::new(s);
            let x = randn(&[2, 4, 4, 3], &mut rng, 1.0);
            let k = randn(&[2, 2, 3, 3, 3], &mut rng, 0.5);
            grad_check_multi(
                |i| scalarize(&i[0].conv3d(&i[1], [1, 1, 1], [1, 1, 1]), 0.6),
                &[x, k],
                1e-5,
            )
        }),
    );
    op(
        "conv3d_331",
        5,
        Box::new(|s| {
            let mut rng = RngStream::new(s);
            let x = randn(&[2, 4, 4, 2], &mut rng, 1.0);
            let k = randn(&[3, 2, 3, 3, 1], &mut rng, 0.5);
            grad_check_multi(
                |i| scalarize(&i[0].conv3d(&i[1], [1, 1, 1], [1, 1, 0]), 0.7),
                &[x, k],
                1e-5,
            )
        }),
    );
    op(
        "conv3d_113",
        5,
        Box::new(|s| {
            let mut rng = RngStream::new(s);
            let x = randn(&[2, 3, 3, 4], &mut rng, 1.0);
            let k = randn(&[2, 2, 1, 1, 3], &mut rng, 0.5);
            grad_check_multi(
                |i| scalarize(&i[0].conv3d(&i[1], [1, 1, 1], [0, 0, 1]), 0.8),
                &[x, k],
                1e-5,
            )
        }),
    );
    op(
        "conv2d_stride2",
        5,
        Box::new(|s| {
            let mut rng = RngStream::new(s);
            let x = randn(&[2, 6, 6], &mut rng, 1.0);
            let k = randn(&[3, 2, 3, 3], &mut rng, 0.5);
            grad_check_multi(|i| scalarize(&i[0].conv2d(&i[1], 2, 1), 0.9), &[x, k], 1e-5)
        }),
    );
    op(
        "grid_sample_bilinear",
        5,
        Box::new(|s| {
            let mut rng = RngStream::new(s);
            let m = randn(&[3, 5, 6], &mut rng, 1.0);
            let coords: Vec<[f64; 2]> = (0..7)
                .map(|_| [rng.uniform_in(0.1, 4.9), rng.uniform_in(0.1, 3.9)])
                .collect();
            grad_check_multi(
                |i| scalarize(&i[0].grid_sample_bilinear(&coords).0, 1.0),
                &[m],
                1e-5,
            )
        }),
    );
    op(
        "grid_sample_trilinear",
        5,
        Box::new(|s| {
            let mut rng = RngStream::new(s);
            let f = randn(&[2, 3, 4, 5], &mut rng, 1.0);
            let coords: Vec<[f64; 3]> = (0..6)
                .map(|_| {
                    [
                        rng.uniform_in(0.1, 3.9),
                        rng.uniform_in(0.1, 2.9),
                        rng.uniform_in(0.1, 1.9),
                    ]
                })
                .collect();
            grad_check_multi(
                |i| scalarize(&i[0].grid_sample_trilinear(&coords).0, 1.1),
                &[f],
                1e-5,
            )
        }),
    );
    op(
        "pixel_shuffle_pair",
        5,
        Box::new(|s| {
            let mut rng = RngStream::new(s);
            let x = randn(&[8, 2, 3, 3], &mut rng, 1.0);
            grad_check_multi(
                |i| {
                    scalarize(&i[0].pixel_shuffle(2), 1.2)
                        .add(&scalarize(&i[0].pixel_unshuffle(1), 1.3))
                },
                &[x],
                1e-5,
            )
        }),
    );
    op(
        "upsample_nearest",
        5,
        Box::new(|s| {
            let mut rng = RngStream::new(s);
            let x = randn(&[2, 2, 3, 2], &mut rng, 1.0);
            grad_check_multi(|i| scalarize(&i[0].upsample_nearest2(), 1.4), &[x], 1e-5)
        }),
    );
    op(
        "softmax_both",
        5,
        Box::new(|s| {
            let mut rng = RngStream::new(s);
            let x = randn(&[3, 4, 2], &mut rng, 2.0);
            grad_check_multi(
                |i| {
                    scalarize(&i[0].softmax(1), 1.5).add(&scalarize(&i[0].softmax_sorted(0), 1.6))
                },
                &[x],
                1e-5,
            )
        }),
    );
    op(
        "cumsum_exclusive",
        5,
        Box::new(|s| {
            let mut rng = RngStream::new(s);
            let x = randn(&[4, 3, 2], &mut rng, 1.0);
            grad_check_multi(|i| scalarize(&i[0].cumsum_exclusive(0), 1.7), &[x], 1e-5)
        }),
    );
    op(
        "pointwise_smooth",
        5,
        Box::new(|s| {
            let mut rng = RngStream::new(s);
            let x = randn(&[12], &mut rng, 0.8);
            grad_check_multi(
                |i| {
                    let e = i[0].exp();
                    let l = e.add_scalar(1.5).ln();
                    let q = l.mul(&l).add_scalar(0.3).sqrt();
                    scalarize(&q.sigmoid(), 1.8)
                        .add(&scalarize(&i[0].softplus(), 1.9))
                        .add(&scalarize(&i[0].tanh(), 2.0))
                        .add(&scalarize(&i[0].gelu(), 2.1))
                },
                &[x],
                1e-5,
            )
        }),
    );
    op(
        "abs_clamp_off_kink",
        5,
        Box::new(|s| {
            let mut rng = RngStream::new(s);
            // keep inputs away from the kinks at 0
            let n = 10;
            let data: Vec<f64> = (0..n)
                .map(|_| {
                    let v = rng.normal();
                    v.signum() * (v.abs() + 0.2)
                })
                .collect();
            let x = Tensor::leaf(&[n], data, true);
            grad_check_multi(
                |i| scalarize(&i[0].abs(), 2.2).add(&scalarize(&i[0].clamp_min(0.0), 2.3)),
                &[x],
                1e-5,
            )
        }),
    );
    op(
        "reductions_and_shape",
        5,
        Box::new(|s| {
            let mut rng = RngStream::new(s);
            let x = randn(&[3, 4, 2], &mut rng, 1.0);
            grad_check_multi(
                |i| {
                    let a = i[0].sum_axis_sorted(0, true);
                    let b = i[0].mean_axis(1, false);
                    let c = i[0].permute(&[2, 0, 1]).reshape(&[2, 12]).slice(1, 2, 6);
                    let d = i[0].index_select(1, &[3, 0, 0]);
                    let e = i[0].zero_pad(2, 1, 1);
                    scalarize(&a, 2.4)
                        .add(&scalarize(&b, 2.5))
                        .add(&scalarize(&c, 2.6))
                        .add(&scalarize(&d, 2.7))
                        .add(&scalarize(&e, 2.8))
                },
                &[x],
                1e-5,
            )
        }),
    );
    op(
        "concat",
        5,
        Box::new(|s| {
            let mut rng = RngStream::new(s);
            let a = randn(&[2, 3], &mut rng, 1.0);
            let b = randn(&[2, 2], &mut rng, 1.0);
            grad_check_multi(
                |i| scalarize(&Tensor::concat(&[&i[0], &i[1]], 1), 2.9),
                &[a, b],
                1e-5,
            )
        }),
    );
    op(
        "norm_layer",
        5,
        Box::new(|s| {
            let mut rng = RngStream::new(s);
            let x = randn(&[4, 6], &mut rng, 1.0);
            let gain = randu(&[4], &mut rng).add_scalar(0.5);
            let bias = randn(&[4], &mut rng, 0.2);
            grad_check_multi(
                |i| {
                    let n = Norm {
                        gain: i[1].clone(),
                        bias: i[2].clone(),
                        eps: 1e-5,
                    };
                    scalarize(&n.forward(&i[0], 0), 3.0)
                },
                &[x, gain, bias],
                1e-5,
            )
        }),
    );
    op(
        "linear_layer",
        5,
        Box::new(|s| {
            let mut rng = RngStream::new(s);
            let lin = Linear::<f64>::new(5, 3, true, &mut rng);
            let x = randn(&[5, 4], &mut rng, 1.0);
            let mut leaves = vec![x];
            let mut params = Params::new();
            lin.params("l", &mut params);
            leaves.extend(params.into_iter().map(|(_, p)| p));
            grad_check_multi(|i| scalarize(&lin.forward_cols(&i[0]), 3.1), &leaves, 1e-5)
        }),
    );
    op(
        "attention_sorted",
        3,
        Box::new(|s| {
            let mut rng = RngStream::new(s);
            let att = MultiHeadAttention::<f64>::new(4, 2, &mut rng);
            let q = randn(&[2, 3, 4], &mut rng, 0.7);
            let kv = randn(&[2, 5, 4], &mut rng, 0.7);
            let mut leaves = vec![q, kv];
            let mut params = Params::new();
            att.params("a", &mut params);
            leaves.extend(params.into_iter().map(|(_, p)| p));
            grad_check_multi(
                |i| scalarize(&att.forward(&i[0], &i[1], true), 3.2),
                &leaves,
                1e-5,
            )
        }),
    );
    op(
        "composite_render",
        5,
        Box::new(|s| {
            let mut rng = RngStream::new(s);
            let d = 6;
            let density = randu(&[d, 2, 2], &mut rng).scale(3.0);
            let color = randu(&[3, d, 2, 2], &mut rng);
            grad_check_multi(
                |i| {
                    let deltas = Tensor::full(&[d, 2, 2], 0.15);
                    let depths = Tensor::constant(
                        &[d, 2, 2],
                        (0..d * 4).map(|x| 1.0 + (x / 4) as f64 * 0.15).collect(),
                    );
                    let out = crate::render::composite_image(&i[0], &i[1], &deltas, &depths);
                    scalarize(&out.rgb, 3.3)
                        .add(&scalarize(&out.depth, 3.4))
                        .add(&scalarize(&out.weights, 3.5))
                },
                &[density, color],
                1e-5,
            )
        }),
    );

    let mut comp = |name: &'static str, seeds: usize, f: CheckFn| {
        out.push((name, COMPOSITE_TOL, seeds, f))
    };

    comp(
        "encoder_full",
        2,
        Box::new(|s| {
            let cfg = ModelConfig {
                c2: 4,
                c4: 4,
                c8: 8,
                transformer_blocks: 1,
                heads: 2,
                ffn_mult: 1,
                ..ModelConfig::toy()
            };
            let enc = Encoder::<f64>::new(&cfg, &mut RngStream::new(s));
            let mut rng = RngStream::new(s + 1000);
            let img1 = randu(&[3, 8, 8], &mut rng);
            let img2 = randu(&[3, 8, 8], &mut rng);
            grad_check_multi(
                |i| {
                    let pyr = enc.encode_views(&[&i[0], &i[1]]).unwrap();
                    scalarize(&pyr[0].t8, 3.6).add(&scalarize(&pyr[1].f4, 3.7))
                },
                &[img1, img2],
                1e-5,
            )
        }),
    );
    comp(
        "volume_builder",
        2,
        Box::new(|s| {
            let mut rng = RngStream::new(s);
            let (c2, c4, c8) = (4, 4, 8);
            let m = c2 + c4 + c8 + c8;
            let net = VolumeNet::<f64>::new(
                m,
                3,
                2,
                Elements::all(),
                6,
                8,
                Activation::Gelu,
                &mut rng,
            );
            let mk_cam = |dx: f64, img: Option<Tensor<f64>>| CameraView::<f64> {
                fx: 16.0,
                fy: 16.0,
                cx: 8.0,
                cy: 8.0,
                world_to_camera: {
                    let mut m = mat4_identity();
                    m[0][3] = dx;
                    m
                },
                near: 1.0,
                far: 3.0,
                width: 16,
                height: 16,
                image: img,
            };
            let views: Vec<CameraView<f64>> = (0..2)
                .map(|i| mk_cam(0.1 * i as f64, Some(randu(&[3, 16, 16], &mut rng))))
            .collect();
            let pyramids: Vec<crate::encoder::FeaturePyramid<f64>> = (0..2)
                .map(|_| crate::encoder::FeaturePyramid {
                    f2: randn(&[c2, 8, 8], &mut rng, 0.7),
                    f4: randn(&[c4, 4, 4], &mut rng, 0.7),
                    f8: randn(&[c8, 2, 2], &mut rng, 0.7),
                    t8: randn(&[c8, 2, 2], &mut rng, 0.7),
                })
                .collect();
            let target = mk_cam(0.05, None);
            let rays = make_rays(&target, 8, 2, DepthSpacing::Linear).unwrap();
            let mut params = Params::new();
            net.params("v", &mut params);
            let mut leaves: Vec<Tensor<f64>> = params.into_iter().map(|(_, p)| p).collect();
            leaves.push(pyramids[0].t8.clone());
            leaves.push(views[0].image.clone().unwrap());
            grad_check_multi(
                |_| {
                    let vol = build_volume(&net, &views, &pyramids, &rays, &target).unwrap();
                    scalarize(&vol.z, 3.8)
                },
                &leaves,
                1e-5,
            )
        }),
    );
    for (name, variant) in [
        ("decoder_plus21d", DecoderVariant::Plus21d),
        ("decoder_conv3d", DecoderVariant::Conv3d),
        ("decoder_conv2d", DecoderVariant::Conv2d),
        ("decoder_conv1d", DecoderVariant::Conv1d),
        ("decoder_ray_transformer", DecoderVariant::RayTransformer),
        ("decoder_mlp", DecoderVariant::Mlp),
    ] {
        comp(
            name,
            2,
            Box::new(move |s| {
                let cfg = ModelConfig {
                    decoder: variant,
                    volume_channels: 4,
                    decoder_blocks: 1,
                    subsample: 4,
                    upsample_channels: 2,
                    rt_blocks: 1,
                    rt_heads: 2,
                    ffn_mult: 1,
                    ..ModelConfig::toy()
                };
                let dec = Decoder::<f64>::new(&cfg, &mut RngStream::new(s));
                let mut rng = RngStream::new(s + 500);
                let z = randn(&[4, 2, 2, 2], &mut rng, 0.5);
                let mut params = Params::new();
                dec.params("d", &mut params);
                let mut leaves = vec![z];
                leaves.extend(params.into_iter().map(|(_, p)| p));
                grad_check_multi(
                    |i| {
                        let vol = FrustumVolume {
                            z: i[0].clone(),
                            depths: Depths::Shared(vec![1.0, 1.4]),
                            validity: Vec::new(),
                            k: 2,
                            subsample: 4,
                            height: 2,
                            width: 2,
                        };
                        let rf = dec.decode(&vol).unwrap();
                        scalarize(&rf.color, 3.9).add(&scalarize(&rf.density, 4.0))
                    },
                    &leaves,
                    1e-5,
                )
            }),
        );
    }
    comp(
        "upsample_field",
        2,
        Box::new(|s| {
            let cfg = ModelConfig {
                volume_channels: 3,
                decoder_blocks: 1,
                subsample: 4,
                upsample_channels: 2,
                ..ModelConfig::toy()
            };
            let dec = Decoder::<f64>::new(&cfg, &mut RngStream::new(s));
            let mut rng = RngStream::new(s + 11);
            let x = randn(&[3, 2, 2, 2], &mut rng, 0.5);
            let mut params = Params::new();
            dec.params("d", &mut params);
            let mut leaves = vec![x];
            leaves.extend(
                params
                    .into_iter()
                    .filter(|(n, _)| n.contains("up_conv"))
                    .map(|(_, p)| p),
            );
            grad_check_multi(|i| scalarize(&dec.upsample_field(&i[0]), 4.1), &leaves, 1e-5)
        }),
    );
    comp(
        "fine_unet",
        2,
        Box::new(|s| {
            let cfg = ModelConfig {
                fine_channels: 2,
                unet_channels: [2, 3, 4],
                ..ModelConfig::toy()
            };
            let unet = FineUnet::<f64>::new(&cfg, &mut RngStream::new(s));
            let mut rng = RngStream::new(s + 12);
            let x = randn(&[2, 4, 4, 4], &mut rng, 0.5);
            let depths = Depths::Shared(vec![1.0, 1.2, 1.4, 1.6]);
            grad_check_multi(
                |i| {
                    let rf = unet.forward(&i[0], &depths).unwrap();
                    scalarize(&rf.color, 4.2).add(&scalarize(&rf.density, 4.3))
                },
                &[x],
                1e-5,
            )
        }),
    );
    comp(
        "loss_l1_ssim",
        2,
        Box::new(|s| {
            let mut rng = RngStream::new(s);
            let a = randu(&[3, 12, 12], &mut rng);
            let gt = randu(&[3, 12, 12], &mut rng).detach();
            grad_check_multi(
                |i| crate::train::loss(&i[0], &gt, 1.0, 0.5).unwrap(),
                &[a],
                1e-5,
            )
        }),
    );

    out
}

/// Run the table; `filter` restricts by substring match on the name.
pub fn run(filter: Option<&str>) -> Vec<CheckResult> {
    let mut results = Vec::new();
    for (name, tol, seeds, f) in checks() {
        if let Some(pat) = filter {
            if !name.contains(pat) {
                continue;
            }
        }
        let mut max_err = 0.0f64;
        let mut detail = None;
        let mut pass = true;
        for seed in 0..seeds as u64 {
            match f(seed * 31 + 1) {
                Ok(e) => max_err = max_err.max(e),
                Err(msg) => {
                    pass = false;
                    detail = Some(msg);
                    break;
                }
            }
        }
        if max_err > tol {
            pass = false;
        }
        results.push(CheckResult {
            name,
            tol,
            max_err,
            pass,
            detail,
        });
    }
    results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_selects_subset() {
        let r = run(Some("matmul"));
        assert_eq!(r.len(), 1);
        assert!(r[0].pass, "matmul failed: err = {}", r[0].max_err);
    }
}
