//! Model and training configuration. Every field is addressable from a
//! config file in the same `key = value` grammar as scene manifests, so all
//! ablation axes (volume orientation, volume elements, decoder variant) are
//! reachable without code edits.

use crate::error::Error;
use crate::geometry::DepthSpacing;
use crate::nn::Activation;
use crate::Result;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Elements {
    pub color: bool,
    pub feature: bool,
    pub cosine: bool,
}

impl Elements {
    pub fn all() -> Self {
        Self {
            color: true,
            feature: true,
            cosine: true,
        }
    }

    pub fn any(&self) -> bool {
        self.color || self.feature || self.cosine
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    Target,
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderVariant {
    Plus21d,
    Conv3d,
    Conv2d,
    Conv1d,
    RayTransformer,
    Mlp,
}

impl DecoderVariant {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "plus21d" => Self::Plus21d,
            "conv3d" => Self::Conv3d,
            "conv2d" => Self::Conv2d,
            "conv1d" => Self::Conv1d,
            "ray_transformer" => Self::RayTransformer,
            "mlp" => Self::Mlp,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Plus21d => "plus21d",
            Self::Conv3d => "conv3d",
            Self::Conv2d => "conv2d",
            Self::Conv1d => "conv1d",
            Self::RayTransformer => "ray_transformer",
            Self::Mlp => "mlp",
        }
    }

    pub fn all() -> [Self; 6] {
        [
            Self::Plus21d,
            Self::Conv3d,
            Self::Conv2d,
            Self::Conv1d,
            Self::RayTransformer,
            Self::Mlp,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    // encoder
    pub c2: usize,
    pub c4: usize,
    pub c8: usize,
    pub transformer_blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    // frustum volume
    pub subsample: usize,
    pub volume_channels: usize,
    pub window: usize,
    pub groups: usize,
    pub elements: Elements,
    pub orientation: Orientation,
    pub agg_hidden: usize,
    // decoder (blocks run at the volume channel width)
    pub decoder: DecoderVariant,
    pub decoder_blocks: usize,
    pub upsample_channels: usize,
    pub rt_blocks: usize,
    pub rt_heads: usize,
    // sampling
    pub d_coarse: usize,
    pub d_fine: usize,
    pub fine: bool,
    pub fine_channels: usize,
    pub fine_window: usize,
    pub unet_channels: [usize; 3],
    pub depth_spacing: DepthSpacing,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c2: 32,
            c4: 48,
            c8: 64,
            transformer_blocks: 2,
            heads: 4,
            ffn_mult: 2,
            subsample: 8,
            volume_channels: 128,
            window: 9,
            groups: 8,
            elements: Elements::all(),
            orientation: Orientation::Target,
            agg_hidden: 32,
            decoder: DecoderVariant::Plus21d,
            decoder_blocks: 12,
            upsample_channels: 16,
            rt_blocks: 2,
            rt_heads: 4,
            d_coarse: 64,
            d_fine: 16,
            fine: false,
            fine_channels: 16,
            fine_window: 1,
            unet_channels: [16, 32, 64],
            depth_spacing: DepthSpacing::Linear,
            activation: Activation::Gelu,
        }
    }
}

impl ModelConfig {
    /// Small widths for desk-scale training and tests.
    pub fn toy() -> Self {
        Self {
            c2: 8,
            c4: 12,
            c8: 16,
            transformer_blocks: 1,
            heads: 4,
            subsample: 8,
            volume_channels: 32,
            window: 9,
            groups: 4,
            d_coarse: 16,
            d_fine: 8,
            upsample_channels: 8,
            unet_channels: [16, 16, 24],
            ..Self::default()
        }
    }

    /// Concatenated per-view feature width (f2 + f4 + f8 + t8).
    pub fn feature_dim(&self) -> usize {
        self.c2 + self.c4 + self.c8 + self.c8
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.subsample, 4 | 8) {
            return Err(Error::Config(format!(
                "subsample must be 4 or 8, got {}",
                self.subsample
            )));
        }
        if !self.elements.any() {
            return Err(Error::Config(
                "all volume elements disabled; enable at least one of color/feature/cosine".into(),
            ));
        }
        if self.window % 2 == 0 {
            return Err(Error::Config(format!("window must be odd, got {}", self.window)));
        }
        if self.fine_window % 2 == 0 {
            return Err(Error::Config(format!(
                "fine_window must be odd, got {}",
                self.fine_window
            )));
        }
        let m = self.feature_dim();
        if m % self.groups != 0 {
            return Err(Error::Config(format!(
                "groups {} must divide the feature dim {m}",
                self.groups
            )));
        }
        if self.d_coarse < 2 || self.d_fine < 2 {
            return Err(Error::Config(format!(
                "need at least 2 depth samples, got d_coarse={} d_fine={}",
                self.d_coarse, self.d_fine
            )));
        }
        if self.c8 % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide c8 {}",
                self.heads, self.c8
            )));
        }
        if self.volume_channels % self.rt_heads != 0 && self.decoder == DecoderVariant::RayTransformer
        {
            return Err(Error::Config(format!(
                "rt_heads {} must divide volume_channels {}",
                self.rt_heads, self.volume_channels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub stage: Stage,
    pub steps: usize,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub crop: usize,
    pub seed: u64,
    pub lambda_l1: f64,
    pub lambda_ssim: f64,
    /// number of input views per rendered target
    pub input_views: usize,
    /// view ids used as training targets; empty = all scene views
    pub train_views: Vec<usize>,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            stage: Stage::Coarse,
            steps: 2000,
            lr_encoder: 5e-5,
            lr_decoder: 5e-4,
            crop: 64,
            seed: 0,
            lambda_l1: 1.0,
            lambda_ssim: 0.5,
            input_views: 3,
            train_views: Vec::new(),
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            crop: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.lambda_l1 < 0.0 || self.lambda_ssim < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.lambda_l1 == 0.0 && self.lambda_ssim == 0.0 {
            return Err(Error::Config("loss weights must not all be zero".into()));
        }
        if self.lambda_ssim > 0.0 && self.crop < 11 {
            return Err(Error::Config(format!(
                "crop {} too small for the 11x11 SSIM window",
                self.crop
            )));
        }
        if self.crop % self.model.subsample != 0 {
            return Err(Error::Config(format!(
                "crop {} must be a multiple of subsample {}",
                self.crop, self.model.subsample
            )));
        }
        if self.input_views == 0 {
            return Err(Error::Config("input_views must be >= 1".into()));
        }
        if self.model.elements.cosine && self.input_views < 2 {
            return Err(Error::Config(
                "cosine volume element requires at least 2 input views".into(),
            ));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        let mut saw_subsample = false;
        let mut saw_volume_channels = false;
        for (ln, raw) in text.lines().enumerate() {
            let line_no = ln + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, line_no, format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "subsample" => saw_subsample = true,
                "volume_channels" => saw_volume_channels = true,
                _ => {}
            }
            cfg.apply_kv(key, value)
                .map_err(|msg| Error::parse(path, line_no, msg))?;
        }
        // paper default ties volume width to the subsampling factor
        if saw_subsample && !saw_volume_channels && cfg.model.subsample == 4 {
            cfg.model.volume_channels = 64;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `key = value` setting; error strings name the key.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn int(v: &str, key: &str) -> std::result::Result<usize, String> {
            v.parse().map_err(|_| format!("invalid integer for {key}: `{v}`"))
        }
        fn float(v: &str, key: &str) -> std::result::Result<f64, String> {
            v.parse().map_err(|_| format!("invalid float for {key}: `{v}`"))
        }
        match key {
            "stage" => {
                self.stage = match value {
                    "coarse" => Stage::Coarse,
                    "fine" => Stage::Fine,
                    _ => return Err(format!("stage must be coarse|fine, got `{value}`")),
                }
            }
            "steps" => self.steps = int(value, key)?,
            "lr_encoder" => self.lr_encoder = float(value, key)?,
            "lr_decoder" => self.lr_decoder = float(value, key)?,
            "crop" => self.crop = int(value, key)?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| format!("invalid integer for seed: `{value}`"))?
            }
            "lambda_l1" => self.lambda_l1 = float(value, key)?,
            "lambda_ssim" => self.lambda_ssim = float(value, key)?,
            "input_views" => self.input_views = int(value, key)?,
            "train_views" => {
                self.train_views = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.trim().parse().map_err(|_| format!("invalid view id `{s}`")))
                    .collect::<std::result::Result<_, _>>()?
            }
            "log_every" => self.log_every = int(value, key)?,
            "elements" => {
                let mut e = Elements {
                    color: false,
                    feature: false,
                    cosine: false,
                };
                for part in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    match part {
                        "color" => e.color = true,
                        "feature" => e.feature = true,
                        "cosine" => e.cosine = true,
                        _ => return Err(format!("unknown volume element `{part}`")),
                    }
                }
                self.model.elements = e;
            }
            "orientation" => {
                self.model.orientation = match value {
                    "target" => Orientation::Target,
                    "reference" => Orientation::Reference,
                    _ => return Err(format!("orientation must be target|reference, got `{value}`")),
                }
            }
            "decoder" => {
                self.model.decoder = DecoderVariant::parse(value)
                    .ok_or_else(|| format!("unknown decoder variant `{value}`"))?
            }
            "subsample" => self.model.subsample = int(value, key)?,
            "volume_channels" => self.model.volume_channels = int(value, key)?,
            "window" => self.model.window = int(value, key)?,
            "groups" => self.model.groups = int(value, key)?,
            "agg_hidden" => self.model.agg_hidden = int(value, key)?,
            "c2" => self.model.c2 = int(value, key)?,
            "c4" => self.model.c4 = int(value, key)?,
            "c8" => self.model.c8 = int(value, key)?,
            "transformer_blocks" => self.model.transformer_blocks = int(value, key)?,
            "heads" => self.model.heads = int(value, key)?,
            "ffn_mult" => self.model.ffn_mult = int(value, key)?,
            "decoder_blocks" => self.model.decoder_blocks = int(value, key)?,
            "upsample_channels" => self.model.upsample_channels = int(value, key)?,
            "rt_blocks" => self.model.rt_blocks = int(value, key)?,
            "rt_heads" => self.model.rt_heads = int(value, key)?,
            "d_coarse" => self.model.d_coarse = int(value, key)?,
            "d_fine" => self.model.d_fine = int(value, key)?,
            "fine" => {
                self.model.fine = match value {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => return Err(format!("fine must be true|false, got `{value}`")),
                }
            }
            "fine_channels" => self.model.fine_channels = int(value, key)?,
            "fine_window" => self.model.fine_window = int(value, key)?,
            "unet_channels" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|_| format!("invalid unet_channels `{value}`")))
                    .collect::<std::result::Result<_, _>>()?;
                if parts.len() != 3 {
                    return Err(format!("unet_channels wants 3 values, got {}", parts.len()));
                }
                self.model.unet_channels = [parts[0], parts[1], parts[2]];
            }
            "depth_spacing" => {
                self.model.depth_spacing = match value {
                    "linear" => DepthSpacing::Linear,
                    "inverse" => DepthSpacing::Inverse,
                    _ => return Err(format!("depth_spacing must be linear|inverse, got `{value}`")),
                }
            }
            "activation" => {
                self.model.activation = match value {
                    "gelu" => Activation::Gelu,
                    "relu" => Activation::Relu,
                    _ => return Err(format!("activation must be gelu|relu, got `{value}`")),
                }
            }
            _ => return Err(format!("unknown config key `{key}`")),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::toy().validate().unwrap();
    }

    #[test]
    fn all_elements_disabled_rejected() {
        let mut cfg = TrainConfig::toy();
        cfg.apply_kv("elements", "").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = TrainConfig::default();
        let err = cfg.apply_kv("warp_speed", "9").unwrap_err();
        assert!(err.contains("warp_speed"));
    }

    #[test]
    fn file_roundtrip_and_s4_channel_rule() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.txt");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "# comment line").unwrap();
        writeln!(f, "steps = 17").unwrap();
        writeln!(f, "subsample = 4").unwrap();
        writeln!(f, "crop = 16").unwrap();
        writeln!(f, "decoder = conv3d").unwrap();
        writeln!(f, "elements = color, cosine").unwrap();
        drop(f);
        let cfg = TrainConfig::from_file(&path).unwrap();
        assert_eq!(cfg.steps, 17);
        assert_eq!(cfg.model.subsample, 4);
        assert_eq!(cfg.model.volume_channels, 64); // tied default
        assert_eq!(cfg.model.decoder, DecoderVariant::Conv3d);
        assert!(cfg.model.elements.color && !cfg.model.elements.feature);
    }

    #[test]
    fn bad_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.txt");
        std::fs::write(&path, "steps = 5\nnot a kv line\n").unwrap();
        match TrainConfig::from_file(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
