//! Multi-view feature encoder: a weight-shared per-image residual CNN
//! producing a 1/2, 1/4, 1/8 pyramid, then a joint transformer over all K
//! views at 1/8 resolution (per-view self-attention + cross-attention into
//! the other views' tokens).
//!
//! Cross-attention uses order-invariant reductions, so permuting the input
//! views permutes the outputs bit-exactly.

use crate::config::ModelConfig;
use crate::error::Error;
use crate::nn::{Activation, Conv2d, FeedForward, MultiHeadAttention, Norm, Params};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

pub struct FeaturePyramid<T: Scalar> {
    pub f2: Tensor<T>,
    pub f4: Tensor<T>,
    pub f8: Tensor<T>,
    pub t8: Tensor<T>,
}

pub struct ResBlock2d<T: Scalar> {
    conv1: Conv2d<T>,
    norm1: Norm<T>,
    conv2: Conv2d<T>,
    norm2: Norm<T>,
    act: Activation,
}

impl<T: Scalar> ResBlock2d<T> {
    fn new(ch: usize, act: Activation, rng: &mut RngStream) -> Self {
        Self {
            conv1: Conv2d::new(ch, ch, 3, 1, 1, true, rng),
            norm1: Norm::new(ch),
            conv2: Conv2d::new(ch, ch, 3, 1, 1, true, rng),
            norm2: Norm::new(ch),
            act,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.act.apply(&self.norm1.forward(&self.conv1.forward(x), 0));
        let y = self.norm2.forward(&self.conv2.forward(&y), 0);
        self.act.apply(&x.add(&y))
    }

    fn params(&self, prefix: &str, out: &mut Params<T>) {
        self.conv1.params(&format!("{prefix}.conv1"), out);
        self.norm1.params(&format!("{prefix}.norm1"), out);
        self.conv2.params(&format!("{prefix}.conv2"), out);
        self.norm2.params(&format!("{prefix}.norm2"), out);
    }
}

struct TransformerBlock<T: Scalar> {
    norm_self: Norm<T>,
    self_attn: MultiHeadAttention<T>,
    norm_cross: Norm<T>,
    cross_attn: MultiHeadAttention<T>,
    norm_ffn: Norm<T>,
    ffn: FeedForward<T>,
}

impl<T: Scalar> TransformerBlock<T> {
    fn new(ch: usize, heads: usize, ffn_mult: usize, act: Activation, rng: &mut RngStream) -> Self {
        Self {
            norm_self: Norm::new(ch),
            self_attn: MultiHeadAttention::new(ch, heads, rng),
            norm_cross: Norm::new(ch),
            cross_attn: MultiHeadAttention::new(ch, heads, rng),
            norm_ffn: Norm::new(ch),
            ffn: FeedForward::new(ch, ffn_mult, act, rng),
        }
    }

    /// tokens: (K, N, C) -> (K, N, C)
    fn forward(&self, tokens: &Tensor<T>) -> Tensor<T> {
        let k = tokens.shape()[0];
        // per-view self-attention, batched over views
        let normed = self.norm_self.forward(tokens, 2);
        let x = tokens.add(&self.self_attn.forward(&normed, &normed, false));
        // cross-attention: view k queries the concatenation of the others
        let normed = self.norm_cross.forward(&x, 2);
        let mut per_view: Vec<Tensor<T>> = Vec::with_capacity(k);
        for i in 0..k {
            let q = normed.slice(0, i, 1);
            let others: Vec<Tensor<T>> = (0..k).filter(|&j| j != i).map(|j| normed.slice(0, j, 1)).collect();
            let refs: Vec<&Tensor<T>> = others.iter().collect();
            let kv = Tensor::concat(&refs, 1); // (1, (K-1)N, C)
            per_view.push(self.cross_attn.forward(&q, &kv, true));
        }
        let refs: Vec<&Tensor<T>> = per_view.iter().collect();
        let x = x.add(&Tensor::concat(&refs, 0));
        // feed-forward
        let normed = self.norm_ffn.forward(&x, 2);
        x.add(&self.ffn.forward(&normed))
    }

    fn params(&self, prefix: &str, out: &mut Params<T>) {
        self.norm_self.params(&format!("{prefix}.norm_self"), out);
        self.self_attn.params(&format!("{prefix}.self_attn"), out);
        self.norm_cross.params(&format!("{prefix}.norm_cross"), out);
        self.cross_attn.params(&format!("{prefix}.cross_attn"), out);
        self.norm_ffn.params(&format!("{prefix}.norm_ffn"), out);
        self.ffn.params(&format!("{prefix}.ffn"), out);
    }
}

pub struct Encoder<T: Scalar> {
    down: [Conv2d<T>; 3],
    blocks: Vec<ResBlock2d<T>>, // 6 blocks, 2 per level
    transformer: Vec<TransformerBlock<T>>,
    act: Activation,
    c8: usize,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut RngStream) -> Self {
        let act = cfg.activation;
        let down = [
            Conv2d::new(3, cfg.c2, 3, 2, 1, true, rng),
            Conv2d::new(cfg.c2, cfg.c4, 3, 2, 1, true, rng),
            Conv2d::new(cfg.c4, cfg.c8, 3, 2, 1, true, rng),
        ];
        let mut blocks = Vec::with_capacity(6);
        for ch in [cfg.c2, cfg.c2, cfg.c4, cfg.c4, cfg.c8, cfg.c8] {
            blocks.push(ResBlock2d::new(ch, act, rng));
        }
        let transformer = (0..cfg.transformer_blocks)
            .map(|_| TransformerBlock::new(cfg.c8, cfg.heads, cfg.ffn_mult, act, rng))
            .collect();
        Self {
            down,
            blocks,
            transformer,
            act,
            c8: cfg.c8,
        }
    }

    /// Per-image CNN pyramid (f2, f4, f8); weights shared across views.
    pub fn encode_cnn(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let sh = image.shape();
        if sh.len() != 3 || sh[0] != 3 {
            return Err(Error::Contract(format!("encode_cnn: want (3,H,W), got {sh:?}")));
        }
        if sh[1] % 8 != 0 || sh[2] % 8 != 0 {
            return Err(Error::Contract(format!(
                "encode_cnn: H,W must be multiples of 8 (caller pads), got {}x{}",
                sh[1], sh[2]
            )));
        }
        let x = self.act.apply(&self.down[0].forward(image));
        let x = self.blocks[1].forward(&self.blocks[0].forward(&x));
        let f2 = x.clone();
        let x = self.act.apply(&self.down[1].forward(&x));
        let x = self.blocks[3].forward(&self.blocks[2].forward(&x));
        let f4 = x.clone();
        let x = self.act.apply(&self.down[2].forward(&x));
        let f8 = self.blocks[5].forward(&self.blocks[4].forward(&x));
        Ok((f2, f4, f8))
    }

    /// Joint multi-view refinement of the K per-view 1/8 features.
    pub fn multiview_transformer(&self, f8s: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let k = f8s.len();
        if k < 2 {
            return Err(Error::Contract(format!(
                "multiview_transformer: need K >= 2 views, got {k}"
            )));
        }
        let sh = f8s[0].shape().to_vec();
        for f in f8s {
            if f.shape() != sh.as_slice() {
                return Err(Error::Contract(format!(
                    "multiview_transformer: mixed f8 shapes {:?} vs {:?}",
                    f.shape(),
                    sh
                )));
            }
        }
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let pe = sinusoidal_pe_2d::<T>(c, h, w);
        let per_view: Vec<Tensor<T>> = f8s
            .iter()
            .map(|f| {
                f.reshape(&[c, h * w])
                    .permute(&[1, 0])
                    .add(&pe)
                    .reshape(&[1, h * w, c])
            })
            .collect();
        let refs: Vec<&Tensor<T>> = per_view.iter().collect();
        let mut tokens = Tensor::concat(&refs, 0); // (K, N, C)
        for block in &self.transformer {
            tokens = block.forward(&tokens);
        }
        Ok((0..k)
            .map(|i| {
                tokens
                    .slice(0, i, 1)
                    .reshape(&[h * w, c])
                    .permute(&[1, 0])
                    .reshape(&[c, h, w])
            })
            .collect())
    }

    /// Full pipeline over K images.
    pub fn encode_views(&self, images: &[&Tensor<T>]) -> Result<Vec<FeaturePyramid<T>>> {
        let mut f2s = Vec::new();
        let mut f4s = Vec::new();
        let mut f8s = Vec::new();
        for img in images {
            let (f2, f4, f8) = self.encode_cnn(img)?;
            f2s.push(f2);
            f4s.push(f4);
            f8s.push(f8);
        }
        let t8s = if images.len() >= 2 {
            self.multiview_transformer(&f8s)?
        } else {
            // single view: nothing to match against; pass features through
            f8s.clone()
        };
        Ok(f2s
            .into_iter()
            .zip(f4s)
            .zip(f8s)
            .zip(t8s)
            .map(|(((f2, f4), f8), t8)| FeaturePyramid { f2, f4, f8, t8 })
            .collect())
    }

    pub fn params(&self, prefix: &str, out: &mut Params<T>) {
        for (i, d) in self.down.iter().enumerate() {
            d.params(&format!("{prefix}.down{i}"), out);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.params(&format!("{prefix}.block{i}"), out);
        }
        for (i, t) in self.transformer.iter().enumerate() {
            t.params(&format!("{prefix}.tf{i}"), out);
        }
    }

    pub fn c8(&self) -> usize {
        self.c8
    }
}

/// Fixed 2-D sinusoidal positional encoding, (h*w, c) with c % 4 == 0.
/// Identical for every view, so it cannot break permutation equivariance.
pub fn sinusoidal_pe_2d<T: Scalar>(c: usize, h: usize, w: usize) -> Tensor<T> {
    assert!(c % 4 == 0, "positional encoding wants channels % 4 == 0, got {c}");
    let quarter = c / 4;
    let mut data = vec![T::ZERO; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let tok = y * w + x;
            for i in 0..quarter {
                let freq = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                let (sx, cx) = (x as f64 * freq).sin_cos();
                let (sy, cy) = (y as f64 * freq).sin_cos();
                data[tok * c + 4 * i] = T::from_f64(sx);
                data[tok * c + 4 * i + 1] = T::from_f64(cx);
                data[tok * c + 4 * i + 2] = T::from_f64(sy);
                data[tok * c + 4 * i + 3] = T::from_f64(cy);
            }
        }
    }
    Tensor::constant(&[h * w, c], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_multi;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            c2: 4,
            c4: 4,
            c8: 8,
            transformer_blocks: 1,
            heads: 2,
            ffn_mult: 1,
            ..ModelConfig::toy()
        }
    }

    fn rand_image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = RngStream::new(seed);
        Tensor::leaf(&[3, h, w], (0..3 * h * w).map(|_| rng.uniform()).collect(), false)
    }

    #[test]
    fn pyramid_shapes_for_64() {
        let cfg = tiny_cfg();
        let enc = Encoder::<f64>::new(&cfg, &mut RngStream::new(0));
        let (f2, f4, f8) = enc.encode_cnn(&rand_image(64, 64, 1)).unwrap();
        assert_eq!(f2.shape(), &[4, 32, 32]);
        assert_eq!(f4.shape(), &[4, 16, 16]);
        assert_eq!(f8.shape(), &[8, 8, 8]);
    }

    #[test]
    fn non_multiple_of_8_rejected() {
        let enc = Encoder::<f64>::new(&tiny_cfg(), &mut RngStream::new(0));
        assert!(enc.encode_cnn(&rand_image(20, 24, 1)).is_err());
    }

    #[test]
    fn identical_images_identical_pyramids() {
        let enc = Encoder::<f64>::new(&tiny_cfg(), &mut RngStream::new(0));
        let img = rand_image(16, 16, 2);
        let (a2, a4, a8) = enc.encode_cnn(&img).unwrap();
        let (b2, b4, b8) = enc.encode_cnn(&img).unwrap();
        for (a, b) in [(a2, b2), (a4, b4), (a8, b8)] {
            for (x, y) in a.to_vec().iter().zip(b.to_vec()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_pyramid() {
        let enc = Encoder::<f64>::new(&tiny_cfg(), &mut RngStream::new(0));
        // biases initialize to zero; norms have zero bias too
        let img = Tensor::<f64>::zeros(&[3, 16, 16]);
        let (f2, f4, f8) = enc.encode_cnn(&img).unwrap();
        for f in [f2, f4, f8] {
            assert!(f.to_vec().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn res_block_matches_handrolled_oracle() {
        // independent forward: 1 channel, 3x3 conv, explicit loops
        let mut rng = RngStream::new(7);
        let block = ResBlock2d::<f64>::new(1, Activation::Gelu, &mut rng);
        let x: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let input = Tensor::leaf(&[1, 4, 4], x.clone(), false);
        let got = block.forward(&input).to_vec();

        let conv = |inp: &[f64], k: &[f64], bias: f64| -> Vec<f64> {
            let mut out = vec![0.0; 16];
            for y in 0..4i64 {
                for xx in 0..4i64 {
                    let mut acc = bias;
                    for dy in -1..=1i64 {
                        for dx in -1..=1i64 {
                            let (sy, sx) = (y + dy, xx + dx);
                            if sy < 0 || sy > 3 || sx < 0 || sx > 3 {
                                continue;
                            }
                            acc += inp[(sy * 4 + sx) as usize]
                                * k[((dy + 1) * 3 + (dx + 1)) as usize];
                        }
                    }
                    out[(y * 4 + xx) as usize] = acc;
                }
            }
            out
        };
        // single-channel norm: variance over the channel axis is zero,
        // so the normed value collapses to the bias (0): y = act(0) = 0 after
        // norm1 -> act -> conv2(bias) -> norm2 -> 0, residual = act(x + 0)?
        // Careful: norm over 1 channel maps everything to bias. Replicate:
        let k1: Vec<f64> = block.conv1.weight.to_vec();
        let b1 = block.conv1.bias.as_ref().unwrap().to_vec()[0];
        let _c1 = conv(&x, &k1, b1);
        // norm1 output = gain*0 + bias = 0 everywhere (single channel)
        let h = vec![0.0; 16];
        let gelu = |v: f64| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh());
        let h: Vec<f64> = h.iter().map(|&v| gelu(v)).collect();
        let k2: Vec<f64> = block.conv2.weight.to_vec();
        let b2 = block.conv2.bias.as_ref().unwrap().to_vec()[0];
        let c2v = conv(&h, &k2, b2);
        let _ = c2v;
        // norm2 collapses to 0 as well; expected = gelu(x + 0)
        let expect: Vec<f64> = x.iter().map(|&v| gelu(v)).collect();
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn transformer_preserves_shape_and_k2_works() {
        let cfg = tiny_cfg();
        let enc = Encoder::<f64>::new(&cfg, &mut RngStream::new(0));
        let mk = |seed| {
            let mut rng = RngStream::new(seed);
            Tensor::leaf(&[8, 2, 3], (0..48).map(|_| rng.normal()).collect(), false)
        };
        let outs = enc.multiview_transformer(&[mk(1), mk(2)]).unwrap();
        assert_eq!(outs.len(), 2);
        assert_eq!(outs[0].shape(), &[8, 2, 3]);
        assert!(enc.multiview_transformer(&[mk(1)]).is_err());
    }

    #[test]
    fn view_permutation_permutes_outputs_bitexact() {
        let cfg = tiny_cfg();
        let enc = Encoder::<f64>::new(&cfg, &mut RngStream::new(3));
        let mk = |seed| {
            let mut rng = RngStream::new(seed);
            Tensor::leaf(&[8, 2, 2], (0..32).map(|_| rng.normal()).collect(), false)
        };
        let (a, b, c) = (mk(1), mk(2), mk(3));
        let abc = enc.multiview_transformer(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let bca = enc.multiview_transformer(&[b, c, a]).unwrap();
        for (orig, perm) in [(0usize, 2usize), (1, 0), (2, 1)] {
            for (x, y) in abc[orig].to_vec().iter().zip(bca[perm].to_vec()) {
                assert_eq!(x.to_bits(), y.to_bits(), "view {orig} not bit-equal");
            }
        }
    }

    #[test]
    fn encoder_end_to_end_gradcheck() {
        let cfg = tiny_cfg();
        let enc = Encoder::<f64>::new(&cfg, &mut RngStream::new(5));
        let mut rng = RngStream::new(6);
        let img1 = Tensor::leaf(&[3, 8, 8], (0..192).map(|_| rng.uniform()).collect(), true);
        let img2 = Tensor::leaf(&[3, 8, 8], (0..192).map(|_| rng.uniform()).collect(), true);
        let mut params: Params<f64> = Vec::new();
        enc.params("enc", &mut params);
        // probe a subset of leaves: both images and a few parameters
        let mut leaves = vec![img1, img2];
        for (name, p) in &params {
            if name.contains("tf0.cross_attn.wq") || name.contains("down0") {
                leaves.push(p.clone());
            }
        }
        let err = grad_check_multi(
            |ins| {
                let pyr = enc.encode_views(&[&ins[0], &ins[1]]).unwrap();
                let mut loss = Tensor::scalar(0.0);
                for (i, p) in pyr.iter().enumerate() {
                    let w = Tensor::constant(
                        p.t8.shape(),
                        (0..p.t8.numel()).map(|v| ((v + i) as f64 * 0.61).sin()).collect(),
                    );
                    loss = loss.add(&p.t8.mul(&w).sum_all());
                    loss = loss.add(&p.f2.mean_all().scale(0.5));
                }
                loss
            },
            &leaves,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "encoder gradcheck err = {err}");
    }
}
