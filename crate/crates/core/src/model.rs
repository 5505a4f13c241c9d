//! The full feed-forward model: shared multi-view encoder, coarse volume
//! builder + convolutional decoder, and the optional fine stage (its own
//! compact volume builder + 3D U-Net). Checkpoints embed the model shape as
//! reserved `config.*` scalars so a file is self-describing.

use crate::config::{DecoderVariant, Elements, ModelConfig, Orientation};
use crate::decoder::{Decoder, FineUnet};
use crate::encoder::Encoder;
use crate::error::Error;
use crate::geometry::DepthSpacing;
use crate::nn::{Activation, Params};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::scene::checkpoint;
use crate::volume::VolumeNet;
use crate::Result;
use std::path::Path;

pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub encoder: Encoder<T>,
    pub coarse_net: VolumeNet<T>,
    pub decoder: Decoder<T>,
    pub fine_net: Option<VolumeNet<T>>,
    pub fine_unet: Option<FineUnet<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngStream::new(seed).child("init");
        let encoder = Encoder::new(cfg, &mut rng);
        let coarse_net = VolumeNet::new(
            cfg.feature_dim(),
            cfg.window,
            cfg.groups,
            cfg.elements,
            cfg.volume_channels,
            cfg.agg_hidden,
            cfg.activation,
            &mut rng,
        );
        let decoder = Decoder::new(cfg, &mut rng);
        let (fine_net, fine_unet) = if cfg.fine {
            let net = VolumeNet::new(
                cfg.feature_dim(),
                cfg.fine_window,
                cfg.groups,
                cfg.elements,
                cfg.fine_channels,
                cfg.agg_hidden,
                cfg.activation,
                &mut rng,
            );
            let unet = FineUnet::new(cfg, &mut rng);
            (Some(net), Some(unet))
        } else {
            (None, None)
        };
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            coarse_net,
            decoder,
            fine_net,
            fine_unet,
        })
    }

    pub fn parameters(&self) -> Params<T> {
        let mut out = Params::new();
        self.encoder.params("encoder", &mut out);
        self.coarse_net.params("volume", &mut out);
        self.decoder.params("decoder", &mut out);
        if let Some(n) = &self.fine_net {
            n.params("fine.volume", &mut out);
        }
        if let Some(u) = &self.fine_unet {
            u.params("fine.unet", &mut out);
        }
        out
    }

    /// Image-encoder parameter group (its own learning rate).
    pub fn encoder_params(&self) -> Params<T> {
        self.parameters()
            .into_iter()
            .filter(|(n, _)| n.starts_with("encoder."))
            .collect()
    }

    /// Everything downstream of the encoder (volume nets + decoders).
    pub fn decoder_params(&self) -> Params<T> {
        self.parameters()
            .into_iter()
            .filter(|(n, _)| !n.starts_with("encoder."))
            .collect()
    }

    /// Coarse-stage parameters (frozen while training the fine stage).
    pub fn coarse_stage_params(&self) -> Params<T> {
        self.parameters()
            .into_iter()
            .filter(|(n, _)| !n.starts_with("fine."))
            .collect()
    }

    pub fn fine_stage_params(&self) -> Params<T> {
        self.parameters()
            .into_iter()
            .filter(|(n, _)| n.starts_with("fine."))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_params(path, &self.parameters(), &config_entries(&self.cfg))
    }

    /// Rebuild a model from a self-describing checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        let cfg = config_from_checkpoint(path)?;
        let model = Self::new(&cfg, 0)?;
        checkpoint::load_into_params(path, &model.parameters(), true)?;
        Ok(model)
    }

    /// Seed the coarse modules from a coarse-stage checkpoint (fine params
    /// keep their fresh initialization).
    pub fn load_coarse_from(&self, path: &Path) -> Result<()> {
        checkpoint::load_into_params(path, &self.coarse_stage_params(), true)
    }
}

fn bool_f(v: bool) -> f32 {
    if v {
        1.0
    } else {
        0.0
    }
}

pub fn config_entries(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let dec_idx = DecoderVariant::all()
        .iter()
        .position(|v| *v == cfg.decoder)
        .unwrap() as f32;
    let mut out = Vec::new();
    let mut push = |k: &str, v: f32| out.push((format!("config.{k}"), vec![1], vec![v]));
    push("c2", cfg.c2 as f32);
    push("c4", cfg.c4 as f32);
    push("c8", cfg.c8 as f32);
    push("transformer_blocks", cfg.transformer_blocks as f32);
    push("heads", cfg.heads as f32);
    push("ffn_mult", cfg.ffn_mult as f32);
    push("subsample", cfg.subsample as f32);
    push("volume_channels", cfg.volume_channels as f32);
    push("window", cfg.window as f32);
    push("groups", cfg.groups as f32);
    push("elements_color", bool_f(cfg.elements.color));
    push("elements_feature", bool_f(cfg.elements.feature));
    push("elements_cosine", bool_f(cfg.elements.cosine));
    push("orientation", if cfg.orientation == Orientation::Target { 0.0 } else { 1.0 });
    push("agg_hidden", cfg.agg_hidden as f32);
    push("decoder", dec_idx);
    push("decoder_blocks", cfg.decoder_blocks as f32);
    push("upsample_channels", cfg.upsample_channels as f32);
    push("rt_blocks", cfg.rt_blocks as f32);
    push("rt_heads", cfg.rt_heads as f32);
    push("d_coarse", cfg.d_coarse as f32);
    push("d_fine", cfg.d_fine as f32);
    push("fine", bool_f(cfg.fine));
    push("fine_channels", cfg.fine_channels as f32);
    push("fine_window", cfg.fine_window as f32);
    push("unet0", cfg.unet_channels[0] as f32);
    push("unet1", cfg.unet_channels[1] as f32);
    push("unet2", cfg.unet_channels[2] as f32);
    push("depth_spacing", if cfg.depth_spacing == DepthSpacing::Linear { 0.0 } else { 1.0 });
    push("activation", if cfg.activation == Activation::Gelu { 0.0 } else { 1.0 });
    out
}

pub fn config_from_checkpoint(path: &Path) -> Result<ModelConfig> {
    let entries = checkpoint::load_config_entries(path)?;
    if entries.is_empty() {
        return Err(Error::Checkpoint(
            "checkpoint carries no config entries; cannot infer a model shape".into(),
        ));
    }
    let mut cfg = ModelConfig::default();
    let mut elements = Elements::all();
    for (key, v) in entries {
        let u = v as usize;
        match key.as_str() {
            "c2" => cfg.c2 = u,
            "c4" => cfg.c4 = u,
            "c8" => cfg.c8 = u,
            "transformer_blocks" => cfg.transformer_blocks = u,
            "heads" => cfg.heads = u,
            "ffn_mult" => cfg.ffn_mult = u,
            "subsample" => cfg.subsample = u,
            "volume_channels" => cfg.volume_channels = u,
            "window" => cfg.window = u,
            "groups" => cfg.groups = u,
            "elements_color" => elements.color = v != 0.0,
            "elements_feature" => elements.feature = v != 0.0,
            "elements_cosine" => elements.cosine = v != 0.0,
            "orientation" => {
                cfg.orientation = if v == 0.0 { Orientation::Target } else { Orientation::Reference }
            }
            "agg_hidden" => cfg.agg_hidden = u,
            "decoder" => {
                cfg.decoder = *DecoderVariant::all()
                    .get(u)
                    .ok_or_else(|| Error::Checkpoint(format!("bad decoder index {u}")))?
            }
            "decoder_blocks" => cfg.decoder_blocks = u,
            "upsample_channels" => cfg.upsample_channels = u,
            "rt_blocks" => cfg.rt_blocks = u,
            "rt_heads" => cfg.rt_heads = u,
            "d_coarse" => cfg.d_coarse = u,
            "d_fine" => cfg.d_fine = u,
            "fine" => cfg.fine = v != 0.0,
            "fine_channels" => cfg.fine_channels = u,
            "fine_window" => cfg.fine_window = u,
            "unet0" => cfg.unet_channels[0] = u,
            "unet1" => cfg.unet_channels[1] = u,
            "unet2" => cfg.unet_channels[2] = u,
            "depth_spacing" => {
                cfg.depth_spacing = if v == 0.0 { DepthSpacing::Linear } else { DepthSpacing::Inverse }
            }
            "activation" => {
                cfg.activation = if v == 0.0 { Activation::Gelu } else { Activation::Relu }
            }
            other => {
                return Err(Error::Checkpoint(format!("unknown config entry `{other}`")));
            }
        }
    }
    cfg.elements = elements;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_names_unique_and_stable() {
        let cfg = ModelConfig {
            fine: true,
            ..ModelConfig::toy()
        };
        let m = Model::<f32>::new(&cfg, 7).unwrap();
        let p1 = m.parameters();
        let names: std::collections::HashSet<String> = p1.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names.len(), p1.len(), "duplicate parameter names");
        let m2 = Model::<f32>::new(&cfg, 8).unwrap();
        let p2 = m2.parameters();
        assert_eq!(
            p1.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
            p2.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn checkpoint_roundtrip_via_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = ModelConfig {
            fine: true,
            decoder: DecoderVariant::Conv2d,
            ..ModelConfig::toy()
        };
        let m = Model::<f32>::new(&cfg, 3).unwrap();
        m.save(&path).unwrap();
        let loaded = Model::<f32>::load(&path).unwrap();
        assert_eq!(loaded.cfg, cfg);
        for ((n1, a), (n2, b)) in m.parameters().iter().zip(loaded.parameters().iter()) {
            assert_eq!(n1, n2);
            for (x, y) in a.data().iter().zip(b.data().iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{n1}");
            }
        }
    }

    #[test]
    fn same_seed_same_init() {
        let cfg = ModelConfig::toy();
        let a = Model::<f32>::new(&cfg, 42).unwrap();
        let b = Model::<f32>::new(&cfg, 42).unwrap();
        for ((_, x), (_, y)) in a.parameters().iter().zip(b.parameters().iter()) {
            assert_eq!(x.to_vec(), y.to_vec());
        }
    }

    #[test]
    fn param_groups_partition() {
        let cfg = ModelConfig {
            fine: true,
            ..ModelConfig::toy()
        };
        let m = Model::<f32>::new(&cfg, 0).unwrap();
        let all = m.parameters().len();
        assert_eq!(m.encoder_params().len() + m.decoder_params().len(), all);
        assert_eq!(m.coarse_stage_params().len() + m.fine_stage_params().len(), all);
        assert!(!m.fine_stage_params().is_empty());
    }

    #[test]
    fn coarse_checkpoint_seeds_fine_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("coarse.ckpt");
        let coarse_cfg = ModelConfig::toy();
        let coarse = Model::<f32>::new(&coarse_cfg, 1).unwrap();
        coarse.save(&path).unwrap();
        let fine_cfg = ModelConfig {
            fine: true,
            ..ModelConfig::toy()
        };
        let fine = Model::<f32>::new(&fine_cfg, 99).unwrap();
        fine.load_coarse_from(&path).unwrap();
        for ((n, a), (_, b)) in coarse.parameters().iter().zip(fine.coarse_stage_params().iter()) {
            assert_eq!(a.to_vec(), b.to_vec(), "{n}");
        }
    }
}
