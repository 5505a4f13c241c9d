//! Radiance field decoders. The default trunk stacks 12 factorized
//! (2+1)D residual blocks (3x3 over the image plane, then 3 over depth) on
//! the low-resolution volume; a sub-pixel upsampler lifts it to full
//! resolution and two pointwise heads emit color (sigmoid) and density
//! (softplus). The remaining Table-style variants (full 3D, spatial-only,
//! depth-only, per-ray transformer, per-cell MLP) share the block count and
//! the heads, differing only in context scope.

use crate::config::{DecoderVariant, ModelConfig};
use crate::error::Error;
use crate::geometry::Depths;
use crate::nn::{Activation, Conv3d, FeedForward, MultiHeadAttention, Norm, Params};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::FrustumVolume;
use crate::Result;

pub struct RadianceField<T: Scalar> {
    /// (3, D, H, W) in [0, 1]
    pub color: Tensor<T>,
    /// (1, D, H, W), nonnegative
    pub density: Tensor<T>,
    pub depths: Depths,
}

enum TrunkBlock<T: Scalar> {
    Plus21d {
        spatial: Conv3d<T>,
        norm1: Norm<T>,
        depth: Conv3d<T>,
        norm2: Norm<T>,
    },
    Single {
        conv: Conv3d<T>,
        norm: Norm<T>,
    },
}

impl<T: Scalar> TrunkBlock<T> {
    fn new(variant: DecoderVariant, ch: usize, rng: &mut RngStream) -> Self {
        match variant {
            DecoderVariant::Plus21d => TrunkBlock::Plus21d {
                spatial: Conv3d::new(ch, ch, [1, 3, 3], [1, 1, 1], [0, 1, 1], true, rng),
                norm1: Norm::new(ch),
                depth: Conv3d::new(ch, ch, [3, 1, 1], [1, 1, 1], [1, 0, 0], true, rng),
                norm2: Norm::new(ch),
            },
            DecoderVariant::Conv3d => TrunkBlock::Single {
                conv: Conv3d::new(ch, ch, [3, 3, 3], [1, 1, 1], [1, 1, 1], true, rng),
                norm: Norm::new(ch),
            },
            DecoderVariant::Conv2d => TrunkBlock::Single {
                conv: Conv3d::new(ch, ch, [1, 3, 3], [1, 1, 1], [0, 1, 1], true, rng),
                norm: Norm::new(ch),
            },
            DecoderVariant::Conv1d => TrunkBlock::Single {
                conv: Conv3d::new(ch, ch, [3, 1, 1], [1, 1, 1], [1, 0, 0], true, rng),
                norm: Norm::new(ch),
            },
            DecoderVariant::Mlp => TrunkBlock::Single {
                conv: Conv3d::new(ch, ch, [1, 1, 1], [1, 1, 1], [0, 0, 0], true, rng),
                norm: Norm::new(ch),
            },
            DecoderVariant::RayTransformer => unreachable!("ray transformer has its own trunk"),
        }
    }

    fn forward(&self, x: &Tensor<T>, act: Activation) -> Tensor<T> {
        match self {
            TrunkBlock::Plus21d {
                spatial,
                norm1,
                depth,
                norm2,
            } => {
                let y = act.apply(&norm1.forward(&spatial.forward(x), 0));
                let y = act.apply(&norm2.forward(&depth.forward(&y), 0));
                x.add(&y)
            }
            TrunkBlock::Single { conv, norm } => {
                let y = act.apply(&norm.forward(&conv.forward(x), 0));
                x.add(&y)
            }
        }
    }

    fn params(&self, prefix: &str, out: &mut Params<T>) {
        match self {
            TrunkBlock::Plus21d {
                spatial,
                norm1,
                depth,
                norm2,
            } => {
                spatial.params(&format!("{prefix}.spatial"), out);
                norm1.params(&format!("{prefix}.norm1"), out);
                depth.params(&format!("{prefix}.depth"), out);
                norm2.params(&format!("{prefix}.norm2"), out);
            }
            TrunkBlock::Single { conv, norm } => {
                conv.params(&format!("{prefix}.conv"), out);
                norm.params(&format!("{prefix}.norm"), out);
            }
        }
    }
}

struct RayBlock<T: Scalar> {
    norm_attn: Norm<T>,
    attn: MultiHeadAttention<T>,
    norm_ffn: Norm<T>,
    ffn: FeedForward<T>,
}

pub struct Decoder<T: Scalar> {
    pub variant: DecoderVariant,
    channels: usize,
    subsample: usize,
    act: Activation,
    blocks: Vec<TrunkBlock<T>>,
    ray_blocks: Vec<RayBlock<T>>,
    pub up_conv: Conv3d<T>,
    pub color_head: Conv3d<T>,
    pub density_head: Conv3d<T>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut RngStream) -> Self {
        let ch = cfg.volume_channels;
        let (blocks, ray_blocks) = match cfg.decoder {
            DecoderVariant::RayTransformer => {
                let rb = (0..cfg.rt_blocks)
                    .map(|_| RayBlock {
                        norm_attn: Norm::new(ch),
                        attn: MultiHeadAttention::new(ch, cfg.rt_heads, rng),
                        norm_ffn: Norm::new(ch),
                        ffn: FeedForward::new(ch, cfg.ffn_mult, cfg.activation, rng),
                    })
                    .collect();
                (Vec::new(), rb)
            }
            v => {
                let b = (0..cfg.decoder_blocks)
                    .map(|_| TrunkBlock::new(v, ch, rng))
                    .collect();
                (b, Vec::new())
            }
        };
        let s2c = cfg.subsample * cfg.subsample * cfg.upsample_channels;
        let density_head =
            Conv3d::new(cfg.upsample_channels, 1, [1, 1, 1], [1, 1, 1], [0, 0, 0], true, rng);
        // start mostly transparent: a harsh early push toward empty space
        // otherwise drives the softplus into its dead tail
        density_head.bias.as_ref().unwrap().data_mut()[0] = T::from_f64(-1.5);
        Self {
            variant: cfg.decoder,
            channels: ch,
            subsample: cfg.subsample,
            act: cfg.activation,
            blocks,
            ray_blocks,
            up_conv: Conv3d::new(ch, s2c, [1, 3, 3], [1, 1, 1], [0, 1, 1], true, rng),
            color_head: Conv3d::new(cfg.upsample_channels, 3, [1, 1, 1], [1, 1, 1], [0, 0, 0], true, rng),
            density_head,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Context-modeling trunk at volume resolution; this is where the
    /// variants differ (and what the context-scope probes exercise).
    pub fn decode_trunk(&self, z: &Tensor<T>) -> Tensor<T> {
        if self.variant == DecoderVariant::RayTransformer {
            let sh = z.shape().to_vec();
            let (c, d, h, w) = (sh[0], sh[1], sh[2], sh[3]);
            let pe = depth_pe::<T>(d, c);
            let mut tokens = z
                .reshape(&[c, d, h * w])
                .permute(&[2, 1, 0]) // (rays, D, C)
                .add(&pe.reshape(&[1, d, c]));
            for b in &self.ray_blocks {
                let n = b.norm_attn.forward(&tokens, 2);
                tokens = tokens.add(&b.attn.forward(&n, &n, false));
                let n = b.norm_ffn.forward(&tokens, 2);
                tokens = tokens.add(&b.ffn.forward(&n));
            }
            tokens.permute(&[2, 1, 0]).reshape(&[c, d, h, w])
        } else {
            let mut x = z.clone();
            for b in &self.blocks {
                x = b.forward(&x, self.act);
            }
            x
        }
    }

    /// Per-depth-slice sub-pixel upsampling: 3x3 conv to s^2 * C'' channels
    /// then depth-to-space by s; the depth axis is untouched.
    pub fn upsample_field(&self, lowres: &Tensor<T>) -> Tensor<T> {
        self.up_conv.forward(lowres).pixel_shuffle(self.subsample)
    }

    fn heads(&self, x: &Tensor<T>, depths: &Depths) -> RadianceField<T> {
        RadianceField {
            color: self.color_head.forward(x).sigmoid(),
            density: self.density_head.forward(x).softplus(),
            depths: depths.clone(),
        }
    }

    /// Full decode: trunk at low resolution, upsample, heads.
    pub fn decode(&self, volume: &FrustumVolume<T>) -> Result<RadianceField<T>> {
        let got = volume.z.shape()[0];
        if got != self.channels {
            return Err(Error::Dim(format!(
                "decode: volume has {got} channels but the decoder expects {}",
                self.channels
            )));
        }
        let trunk = self.decode_trunk(&volume.z);
        let up = self.upsample_field(&trunk);
        Ok(self.heads(&up, &volume.depths))
    }

    /// Decode only a patch [y0, y0+ph) x [x0, x0+pw) of the low-res volume.
    pub fn decode_patch(
        &self,
        volume: &FrustumVolume<T>,
        y0: usize,
        x0: usize,
        ph: usize,
        pw: usize,
    ) -> Result<RadianceField<T>> {
        let min = self.receptive_field_radius().max(1);
        if ph < min || pw < min {
            return Err(Error::Contract(format!(
                "decode_patch: patch {ph}x{pw} smaller than decoder kernel support {min}"
            )));
        }
        let z = volume.z.slice(2, y0, ph).slice(3, x0, pw);
        let sub = FrustumVolume {
            z,
            depths: volume.depths.clone(),
            validity: Vec::new(),
            k: volume.k,
            subsample: volume.subsample,
            height: ph,
            width: pw,
        };
        self.decode(&sub)
    }

    /// Spatial receptive-field radius of decode() in low-res cells.
    pub fn receptive_field_radius(&self) -> usize {
        let per_block = match self.variant {
            DecoderVariant::Plus21d | DecoderVariant::Conv3d | DecoderVariant::Conv2d => 1,
            _ => 0,
        };
        per_block * self.blocks.len() + 1 // +1 for the upsampler's 3x3 conv
    }

    pub fn params(&self, prefix: &str, out: &mut Params<T>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.params(&format!("{prefix}.block{i}"), out);
        }
        for (i, b) in self.ray_blocks.iter().enumerate() {
            b.norm_attn.params(&format!("{prefix}.ray{i}.norm_attn"), out);
            b.attn.params(&format!("{prefix}.ray{i}.attn"), out);
            b.norm_ffn.params(&format!("{prefix}.ray{i}.norm_ffn"), out);
            b.ffn.params(&format!("{prefix}.ray{i}.ffn"), out);
        }
        self.up_conv.params(&format!("{prefix}.up_conv"), out);
        self.color_head.params(&format!("{prefix}.color_head"), out);
        self.density_head.params(&format!("{prefix}.density_head"), out);
    }
}

/// 1-D sinusoidal encoding of depth-plane index, (D, C).
fn depth_pe<T: Scalar>(d: usize, c: usize) -> Tensor<T> {
    assert!(c % 2 == 0, "depth encoding wants even channels, got {c}");
    let half = c / 2;
    let mut data = vec![T::ZERO; d * c];
    for i in 0..d {
        for j in 0..half {
            let freq = 1.0 / 10000f64.powf(j as f64 / half as f64);
            let (s, co) = (i as f64 * freq).sin_cos();
            data[i * c + 2 * j] = T::from_f64(s);
            data[i * c + 2 * j + 1] = T::from_f64(co);
        }
    }
    Tensor::constant(&[d, c], data)
}

// ── Fine-stage 3D U-Net ─────────────────────────────────────────────────

struct ResBlock3d<T: Scalar> {
    conv: Conv3d<T>,
    norm: Norm<T>,
}

impl<T: Scalar> ResBlock3d<T> {
    fn new(ch: usize, rng: &mut RngStream) -> Self {
        Self {
            conv: Conv3d::new(ch, ch, [3, 3, 3], [1, 1, 1], [1, 1, 1], true, rng),
            norm: Norm::new(ch),
        }
    }

    fn forward(&self, x: &Tensor<T>, act: Activation) -> Tensor<T> {
        x.add(&act.apply(&self.norm.forward(&self.conv.forward(x), 0)))
    }

    fn params(&self, prefix: &str, out: &mut Params<T>) {
        self.conv.params(&format!("{prefix}.conv"), out);
        self.norm.params(&format!("{prefix}.norm"), out);
    }
}

/// Two-level 3D U-Net over the compact full-resolution fine volume.
/// Downsampling is stride-2 on all three axes; the up path is nearest
/// upsampling + conv with skip concatenation.
pub struct FineUnet<T: Scalar> {
    stem: Conv3d<T>,
    enc0: ResBlock3d<T>,
    down1: Conv3d<T>,
    enc1: ResBlock3d<T>,
    down2: Conv3d<T>,
    bottleneck: ResBlock3d<T>,
    up1_conv: Conv3d<T>,
    fuse1: Conv3d<T>,
    dec1: ResBlock3d<T>,
    up2_conv: Conv3d<T>,
    fuse2: Conv3d<T>,
    dec0: ResBlock3d<T>,
    color_head: Conv3d<T>,
    density_head: Conv3d<T>,
    act: Activation,
    in_channels: usize,
}

impl<T: Scalar> FineUnet<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut RngStream) -> Self {
        let [c0, c1, c2] = cfg.unet_channels;
        let cin = cfg.fine_channels;
        Self {
            stem: Conv3d::new(cin, c0, [3, 3, 3], [1, 1, 1], [1, 1, 1], true, rng),
            enc0: ResBlock3d::new(c0, rng),
            down1: Conv3d::new(c0, c1, [3, 3, 3], [2, 2, 2], [1, 1, 1], true, rng),
            enc1: ResBlock3d::new(c1, rng),
            down2: Conv3d::new(c1, c2, [3, 3, 3], [2, 2, 2], [1, 1, 1], true, rng),
            bottleneck: ResBlock3d::new(c2, rng),
            up1_conv: Conv3d::new(c2, c1, [3, 3, 3], [1, 1, 1], [1, 1, 1], true, rng),
            fuse1: Conv3d::new(2 * c1, c1, [1, 1, 1], [1, 1, 1], [0, 0, 0], true, rng),
            dec1: ResBlock3d::new(c1, rng),
            up2_conv: Conv3d::new(c1, c0, [3, 3, 3], [1, 1, 1], [1, 1, 1], true, rng),
            fuse2: Conv3d::new(2 * c0, c0, [1, 1, 1], [1, 1, 1], [0, 0, 0], true, rng),
            dec0: ResBlock3d::new(c0, rng),
            color_head: Conv3d::new(c0, 3, [1, 1, 1], [1, 1, 1], [0, 0, 0], true, rng),
            density_head: {
                let dh = Conv3d::new(c0, 1, [1, 1, 1], [1, 1, 1], [0, 0, 0], true, rng);
                dh.bias.as_ref().unwrap().data_mut()[0] = T::from_f64(-1.5);
                dh
            },
            act: cfg.activation,
            in_channels: cin,
        }
    }

    pub fn forward(&self, volume: &Tensor<T>, depths: &Depths) -> Result<RadianceField<T>> {
        self.forward_with_ablation(volume, depths, false)
    }

    /// `zero_bottleneck` cuts the deepest path; used by tests to verify the
    /// skip connections carry information on their own.
    pub fn forward_with_ablation(
        &self,
        volume: &Tensor<T>,
        depths: &Depths,
        zero_bottleneck: bool,
    ) -> Result<RadianceField<T>> {
        let sh = volume.shape().to_vec();
        if sh.len() != 4 || sh[0] != self.in_channels {
            return Err(Error::Dim(format!(
                "fine_unet: want ({}, D, H, W), got {sh:?}",
                self.in_channels
            )));
        }
        if sh[1] % 4 != 0 || sh[2] % 4 != 0 || sh[3] % 4 != 0 {
            return Err(Error::Contract(format!(
                "fine_unet: D,H,W must be divisible by 4 (caller pads), got {:?}",
                &sh[1..]
            )));
        }
        let act = self.act;
        let f0 = self.enc0.forward(&act.apply(&self.stem.forward(volume)), act);
        let f1 = self.enc1.forward(&act.apply(&self.down1.forward(&f0)), act);
        let mut b = self.bottleneck.forward(&act.apply(&self.down2.forward(&f1)), act);
        if zero_bottleneck {
            b = b.scale(0.0);
        }
        let u1 = act.apply(&self.up1_conv.forward(&b.upsample_nearest2()));
        let x1 = self.dec1.forward(
            &act.apply(&self.fuse1.forward(&Tensor::concat(&[&u1, &f1], 0))),
            act,
        );
        let u2 = act.apply(&self.up2_conv.forward(&x1.upsample_nearest2()));
        let x0 = self.dec0.forward(
            &act.apply(&self.fuse2.forward(&Tensor::concat(&[&u2, &f0], 0))),
            act,
        );
        Ok(RadianceField {
            color: self.color_head.forward(&x0).sigmoid(),
            density: self.density_head.forward(&x0).softplus(),
            depths: depths.clone(),
        })
    }

    pub fn params(&self, prefix: &str, out: &mut Params<T>) {
        self.stem.params(&format!("{prefix}.stem"), out);
        self.enc0.params(&format!("{prefix}.enc0"), out);
        self.down1.params(&format!("{prefix}.down1"), out);
        self.enc1.params(&format!("{prefix}.enc1"), out);
        self.down2.params(&format!("{prefix}.down2"), out);
        self.bottleneck.params(&format!("{prefix}.bottleneck"), out);
        self.up1_conv.params(&format!("{prefix}.up1_conv"), out);
        self.fuse1.params(&format!("{prefix}.fuse1"), out);
        self.dec1.params(&format!("{prefix}.dec1"), out);
        self.up2_conv.params(&format!("{prefix}.up2_conv"), out);
        self.fuse2.params(&format!("{prefix}.fuse2"), out);
        self.dec0.params(&format!("{prefix}.dec0"), out);
        self.color_head.params(&format!("{prefix}.color_head"), out);
        self.density_head.params(&format!("{prefix}.density_head"), out);
    }
}

/// Conv-kernel parameter count of one trunk block at width `ch` (no bias),
/// used by the factorization arithmetic checks.
pub fn block_conv_params(variant: DecoderVariant, ch: usize) -> usize {
    match variant {
        DecoderVariant::Plus21d => (9 + 3) * ch * ch,
        DecoderVariant::Conv3d => 27 * ch * ch,
        DecoderVariant::Conv2d => 9 * ch * ch,
        DecoderVariant::Conv1d => 3 * ch * ch,
        DecoderVariant::Mlp => ch * ch,
        DecoderVariant::RayTransformer => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::nn::param_count;

    fn cfg_with(variant: DecoderVariant, ch: usize, blocks: usize, s: usize) -> ModelConfig {
        ModelConfig {
            decoder: variant,
            volume_channels: ch,
            decoder_blocks: blocks,
            subsample: s,
            upsample_channels: 4,
            rt_heads: 2,
            rt_blocks: 1,
            ffn_mult: 1,
            ..ModelConfig::toy()
        }
    }

    fn vol(ch: usize, d: usize, h: usize, w: usize, seed: u64) -> FrustumVolume<f64> {
        let mut rng = RngStream::new(seed);
        FrustumVolume {
            z: Tensor::leaf(
                &[ch, d, h, w],
                (0..ch * d * h * w).map(|_| rng.normal() * 0.3).collect(),
                false,
            ),
            depths: Depths::Shared((0..d).map(|i| 1.0 + i as f64 * 0.1).collect()),
            validity: Vec::new(),
            k: 2,
            subsample: 8,
            height: h,
            width: w,
        }
    }

    use crate::rng::RngStream;

    #[test]
    fn per_block_conv_param_arithmetic() {
        assert_eq!(block_conv_params(DecoderVariant::Conv3d, 64), 110_592);
        assert_eq!(block_conv_params(DecoderVariant::Plus21d, 64), 49_152);
        let ratio = block_conv_params(DecoderVariant::Conv3d, 64) as f64
            / block_conv_params(DecoderVariant::Plus21d, 64) as f64;
        assert!((ratio - 2.25).abs() < 1e-12);
        // actual constructed blocks match the arithmetic (conv weights only)
        for (v, expect) in [
            (DecoderVariant::Conv3d, 110_592),
            (DecoderVariant::Plus21d, 49_152),
        ] {
            let dec = Decoder::<f32>::new(&cfg_with(v, 64, 1, 8), &mut RngStream::new(0));
            let mut params = Params::new();
            dec.params("d", &mut params);
            let conv_weights: usize = params
                .iter()
                .filter(|(n, _)| {
                    n.contains("block0") && n.ends_with(".weight")
                })
                .map(|(_, p)| p.numel())
                .sum();
            assert_eq!(conv_weights, expect, "{v:?}");
        }
    }

    #[test]
    fn decode_shapes_and_activation_ranges() {
        let cfg = cfg_with(DecoderVariant::Plus21d, 8, 2, 8);
        let dec = Decoder::<f64>::new(&cfg, &mut RngStream::new(1));
        let v = vol(8, 4, 2, 2, 2);
        let rf = dec.decode(&v).unwrap();
        assert_eq!(rf.color.shape(), &[3, 4, 16, 16]);
        assert_eq!(rf.density.shape(), &[1, 4, 16, 16]);
        assert!(rf.color.to_vec().iter().all(|&c| (0.0..=1.0).contains(&c)));
        assert!(rf.density.to_vec().iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let cfg = cfg_with(DecoderVariant::Plus21d, 8, 1, 8);
        let dec = Decoder::<f64>::new(&cfg, &mut RngStream::new(1));
        assert!(matches!(dec.decode(&vol(6, 4, 2, 2, 2)), Err(Error::Dim(_))));
    }

    #[test]
    fn upsampler_constant_bias_passthrough() {
        let cfg = cfg_with(DecoderVariant::Plus21d, 4, 1, 4);
        let dec = Decoder::<f64>::new(&cfg, &mut RngStream::new(3));
        // zero the conv weights, set bias to 0.7: output must be 0.7 everywhere
        dec.up_conv.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        dec.up_conv
            .bias
            .as_ref()
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.7);
        let x = Tensor::full(&[4, 2, 3, 3], 1.3);
        let up = dec.upsample_field(&x);
        assert_eq!(up.shape(), &[4, 2, 12, 12]);
        assert!(up.to_vec().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn mlp_variant_is_cell_local() {
        let cfg = cfg_with(DecoderVariant::Mlp, 6, 3, 8);
        let dec = Decoder::<f64>::new(&cfg, &mut RngStream::new(4));
        let v = vol(6, 3, 2, 2, 5);
        let base = dec.decode_trunk(&v.z).to_vec();
        // permute cells: swap depth slices 0 and 2 of the input
        let perm_z = v.z.index_select(1, &[2, 1, 0]);
        let permuted = dec.decode_trunk(&perm_z).to_vec();
        let direct = Tensor::leaf(&[6, 3, 2, 2], base, false)
            .index_select(1, &[2, 1, 0])
            .to_vec();
        for (a, b) in permuted.iter().zip(&direct) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn ray_transformer_is_ray_local() {
        let cfg = cfg_with(DecoderVariant::RayTransformer, 8, 0, 8);
        let dec = Decoder::<f64>::new(&cfg, &mut RngStream::new(5));
        let v = vol(8, 4, 2, 2, 6);
        let base = dec.decode_trunk(&v.z).to_vec();
        // perturb every cell of ray (1,1); ray (0,0) must stay bit-identical
        let mut z2 = v.z.to_vec();
        let (c, d, h, w) = (8, 4, 2, 2);
        for ci in 0..c {
            for di in 0..d {
                z2[((ci * d + di) * h + 1) * w + 1] += 0.5;
            }
        }
        let out2 = dec.decode_trunk(&Tensor::leaf(&[c, d, h, w], z2, false)).to_vec();
        for ci in 0..c {
            for di in 0..d {
                let idx = ((ci * d + di) * h) * w; // ray (0,0)
                assert_eq!(base[idx].to_bits(), out2[idx].to_bits());
            }
        }
    }

    #[test]
    fn conv1d_is_ray_local_and_conv2d_is_slice_local() {
        // conv1d: perturbing ray (1,1) leaves ray (0,0) untouched
        let cfg = cfg_with(DecoderVariant::Conv1d, 4, 2, 8);
        let dec = Decoder::<f64>::new(&cfg, &mut RngStream::new(6));
        let v = vol(4, 3, 2, 2, 7);
        let base = dec.decode_trunk(&v.z).to_vec();
        let (c, d, h, w) = (4, 3, 2, 2);
        let mut z2 = v.z.to_vec();
        for ci in 0..c {
            for di in 0..d {
                z2[((ci * d + di) * h + 1) * w + 1] += 1.0;
            }
        }
        let out2 = dec.decode_trunk(&Tensor::leaf(&[c, d, h, w], z2, false)).to_vec();
        for ci in 0..c {
            for di in 0..d {
                let idx = ((ci * d + di) * h) * w;
                assert_eq!(base[idx].to_bits(), out2[idx].to_bits());
            }
        }

        // conv2d: perturbing depth slice 2 leaves slice 0 untouched
        let cfg = cfg_with(DecoderVariant::Conv2d, 4, 2, 8);
        let dec = Decoder::<f64>::new(&cfg, &mut RngStream::new(7));
        let v = vol(4, 3, 2, 2, 8);
        let base = dec.decode_trunk(&v.z).to_vec();
        let mut z2 = v.z.to_vec();
        for ci in 0..c {
            for yi in 0..h {
                for xi in 0..w {
                    z2[((ci * d + 2) * h + yi) * w + xi] -= 0.3;
                }
            }
        }
        let out2 = dec.decode_trunk(&Tensor::leaf(&[c, d, h, w], z2, false)).to_vec();
        for ci in 0..c {
            for yi in 0..h {
                for xi in 0..w {
                    let idx = ((ci * d) * h + yi) * w + xi; // slice 0
                    assert_eq!(base[idx].to_bits(), out2[idx].to_bits());
                }
            }
        }
    }

    #[test]
    fn variant_gradchecks_tiny() {
        for variant in DecoderVariant::all() {
            let cfg = cfg_with(variant, 4, 1, 4);
            let dec = Decoder::<f64>::new(&cfg, &mut RngStream::new(10));
            let v = vol(4, 2, 2, 2, 11);
            let leaf = Tensor::leaf(v.z.shape(), v.z.to_vec(), true);
            let err = crate::tensor::grad_check(
                |z| {
                    let fv = FrustumVolume {
                        z: z.clone(),
                        depths: v.depths.clone(),
                        validity: Vec::new(),
                        k: 2,
                        subsample: 4,
                        height: 2,
                        width: 2,
                    };
                    let rf = dec.decode(&fv).unwrap();
                    let wc = Tensor::constant(
                        rf.color.shape(),
                        (0..rf.color.numel()).map(|i| (i as f64 * 0.7).sin()).collect(),
                    );
                    let wd = Tensor::constant(
                        rf.density.shape(),
                        (0..rf.density.numel()).map(|i| (i as f64 * 0.3).cos()).collect(),
                    );
                    rf.color.mul(&wc).sum_all().add(&rf.density.mul(&wd).sum_all())
                },
                &leaf,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-3, "{variant:?} gradcheck err = {err}");
        }
    }

    #[test]
    fn unet_shape_preserved_and_contract() {
        let cfg = ModelConfig {
            fine_channels: 4,
            unet_channels: [4, 6, 8],
            ..ModelConfig::toy()
        };
        let unet = FineUnet::<f64>::new(&cfg, &mut RngStream::new(12));
        let mut rng = RngStream::new(13);
        let x = Tensor::leaf(&[4, 4, 8, 8], (0..4 * 4 * 64).map(|_| rng.normal()).collect(), false);
        let depths = Depths::Shared(vec![1.0, 1.2, 1.4, 1.6]);
        let rf = unet.forward(&x, &depths).unwrap();
        assert_eq!(rf.color.shape(), &[3, 4, 8, 8]);
        assert_eq!(rf.density.shape(), &[1, 4, 8, 8]);
        // non-divisible-by-4 rejected
        let bad = Tensor::<f64>::zeros(&[4, 4, 6, 8]);
        assert!(unet.forward(&bad, &depths).is_err());
    }

    #[test]
    fn unet_skips_carry_information_past_dead_bottleneck() {
        let cfg = ModelConfig {
            fine_channels: 4,
            unet_channels: [4, 6, 8],
            ..ModelConfig::toy()
        };
        let unet = FineUnet::<f64>::new(&cfg, &mut RngStream::new(14));
        let depths = Depths::Shared(vec![1.0, 1.2, 1.4, 1.6]);
        let mut rng = RngStream::new(15);
        let x1 = Tensor::leaf(&[4, 4, 4, 4], (0..4 * 64).map(|_| rng.normal()).collect(), false);
        let x2 = Tensor::leaf(&[4, 4, 4, 4], (0..4 * 64).map(|_| rng.normal()).collect(), false);
        let y1 = unet.forward_with_ablation(&x1, &depths, true).unwrap();
        let y2 = unet.forward_with_ablation(&x2, &depths, true).unwrap();
        let d: f64 = y1
            .color
            .to_vec()
            .iter()
            .zip(y2.color.to_vec())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(d > 1e-6, "output ignored the input with bottleneck zeroed");
    }

    #[test]
    fn unet_gradcheck_tiny() {
        let cfg = ModelConfig {
            fine_channels: 2,
            unet_channels: [2, 3, 4],
            ..ModelConfig::toy()
        };
        let unet = FineUnet::<f64>::new(&cfg, &mut RngStream::new(16));
        let mut rng = RngStream::new(17);
        let x = Tensor::leaf(&[2, 4, 4, 4], (0..128).map(|_| rng.normal() * 0.5).collect(), true);
        let depths = Depths::Shared(vec![1.0, 1.2, 1.4, 1.6]);
        let err = crate::tensor::grad_check(
            |z| {
                let rf = unet.forward(z, &depths).unwrap();
                let w = Tensor::constant(
                    rf.color.shape(),
                    (0..rf.color.numel()).map(|i| (i as f64 * 0.17).sin()).collect(),
                );
                rf.color.mul(&w).sum_all().add(&rf.density.mean_all())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "unet gradcheck err = {err}");
    }

    #[test]
    fn receptive_field_radius_by_variant() {
        for (v, blocks, want) in [
            (DecoderVariant::Plus21d, 12, 13),
            (DecoderVariant::Conv3d, 12, 13),
            (DecoderVariant::Conv2d, 12, 13),
            (DecoderVariant::Conv1d, 12, 1),
            (DecoderVariant::Mlp, 12, 1),
        ] {
            let dec = Decoder::<f32>::new(&cfg_with(v, 4, blocks, 8), &mut RngStream::new(0));
            assert_eq!(dec.receptive_field_radius(), want, "{v:?}");
        }
    }

    #[test]
    fn whole_model_param_counting() {
        let mut params = Params::<f32>::new();
        let dec = Decoder::<f32>::new(&cfg_with(DecoderVariant::Plus21d, 8, 2, 8), &mut RngStream::new(0));
        dec.params("dec", &mut params);
        assert!(param_count(&params) > 0);
        let names: Vec<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
        assert!(names.iter().all(|n| n.starts_with("dec.")));
        // unique names
        let set: std::collections::HashSet<&&str> = names.iter().collect();
        assert_eq!(set.len(), names.len());
    }
}
