//! Run configuration: a flat `section.key = value` document over typed
//! defaults. Omitted keys keep their defaults; unknown keys are rejected;
//! the resolved document is echoed into every run directory.

use thiserror::Error;

use crate::data::AugmentParams;
use crate::loss::SsimParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: unknown configuration key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value for '{key}': {detail}")]
    BadValue {
        line: usize,
        key: String,
        detail: String,
    },
    #[error("line {line}: expected 'section.key = value'")]
    BadSyntax { line: usize },
}

/// Training phase selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

/// Every tunable of the pipeline. Defaults follow the published training
/// details where stated (Adam constants, patience windows) and the
/// recorded desk-scale choices elsewhere.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub arch: String,
    pub base_channels: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub validate_every: usize,
    pub max_epochs: Option<usize>,
    pub max_images: Option<usize>,

    pub alpha: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,

    pub lr_patience_epochs: usize,
    pub lr_factor: f32,
    pub pretrain_stop_epochs: usize,
    pub finetune_stop_images: usize,

    pub augment_enabled: bool,
    pub augment: AugmentParams,
    pub ssim: SsimParams,

    pub compare: CompareConfig,
}

/// Grid of the comparison sweep.
#[derive(Clone, Debug)]
pub struct CompareConfig {
    pub archs: Vec<String>,
    pub modes: Vec<String>,
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub pretrain_pool: usize,
    pub seg_pool: usize,
    pub image_size: usize,
    pub pathology: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: "unet".into(),
            base_channels: 64,
            batch_size: 4,
            seed: 0,
            validate_every: 1,
            max_epochs: None,
            max_images: None,
            alpha: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr_patience_epochs: 25,
            lr_factor: 10.0,
            pretrain_stop_epochs: 100,
            finetune_stop_images: 3900,
            augment_enabled: true,
            augment: AugmentParams::default(),
            ssim: SsimParams::default(),
            compare: CompareConfig {
                archs: vec!["unet".into(), "enet".into()],
                modes: vec!["fs".into(), "mp".into()],
                sizes: vec![1, 5, 10, 15],
                seeds: vec![0, 1, 2],
                pretrain_pool: 59,
                seg_pool: 20,
                image_size: 64,
                pathology: 0.5,
            },
        }
    }
}

fn parse<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::BadValue {
        line,
        key: key.to_string(),
        detail: e.to_string(),
    })
}

fn parse_opt(line: usize, key: &str, v: &str) -> Result<Option<usize>, ConfigError> {
    if v == "none" {
        Ok(None)
    } else {
        parse(line, key, v).map(Some)
    }
}

fn parse_list<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(line, key, s))
        .collect()
}

impl RunConfig {
    /// Apply a configuration document on top of the defaults.
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Apply `section.key = value` lines to this configuration.
    pub fn apply(&mut self, text: &str) -> Result<(), ConfigError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let Some((key, value)) = stripped.split_once('=') else {
                return Err(ConfigError::BadSyntax { line });
            };
            let key = key.trim();
            let v = value.trim();
            match key {
                "train.arch" => self.arch = v.to_string(),
                "train.base_channels" => self.base_channels = parse(line, key, v)?,
                "train.batch_size" => self.batch_size = parse(line, key, v)?,
                "train.seed" => self.seed = parse(line, key, v)?,
                "train.validate_every" => self.validate_every = parse(line, key, v)?,
                "train.max_epochs" => self.max_epochs = parse_opt(line, key, v)?,
                "train.max_images" => self.max_images = parse_opt(line, key, v)?,
                "adam.alpha" => self.alpha = parse(line, key, v)?,
                "adam.beta1" => self.beta1 = parse(line, key, v)?,
                "adam.beta2" => self.beta2 = parse(line, key, v)?,
                "adam.epsilon" => self.epsilon = parse(line, key, v)?,
                "schedule.lr_patience_epochs" => self.lr_patience_epochs = parse(line, key, v)?,
                "schedule.lr_factor" => self.lr_factor = parse(line, key, v)?,
                "schedule.pretrain_stop_epochs" => {
                    self.pretrain_stop_epochs = parse(line, key, v)?
                }
                "schedule.finetune_stop_images" => {
                    self.finetune_stop_images = parse(line, key, v)?
                }
                "augment.enabled" => self.augment_enabled = parse(line, key, v)?,
                "augment.rotation_deg" => self.augment.rotation_deg = parse(line, key, v)?,
                "augment.scale_min" => self.augment.scale.0 = parse(line, key, v)?,
                "augment.scale_max" => self.augment.scale.1 = parse(line, key, v)?,
                "augment.translation_frac" => {
                    self.augment.translation_frac = parse(line, key, v)?
                }
                "augment.flip_h" => self.augment.flip_h = parse(line, key, v)?,
                "augment.flip_v" => self.augment.flip_v = parse(line, key, v)?,
                "augment.brightness" => self.augment.brightness = parse(line, key, v)?,
                "augment.contrast" => self.augment.contrast = parse(line, key, v)?,
                "augment.hue" => self.augment.hue = parse(line, key, v)?,
                "ssim.sigma" => self.ssim.gaussian_sigma = parse(line, key, v)?,
                "ssim.window_radius" => self.ssim.window_radius = parse(line, key, v)?,
                "ssim.c1" => self.ssim.c1 = parse(line, key, v)?,
                "ssim.c2" => self.ssim.c2 = parse(line, key, v)?,
                "ssim.dynamic_range" => self.ssim.dynamic_range = parse(line, key, v)?,
                "compare.archs" => self.compare.archs = parse_list(line, key, v)?,
                "compare.modes" => self.compare.modes = parse_list(line, key, v)?,
                "compare.sizes" => self.compare.sizes = parse_list(line, key, v)?,
                "compare.seeds" => self.compare.seeds = parse_list(line, key, v)?,
                "compare.pretrain_pool" => self.compare.pretrain_pool = parse(line, key, v)?,
                "compare.seg_pool" => self.compare.seg_pool = parse(line, key, v)?,
                "compare.image_size" => self.compare.image_size = parse(line, key, v)?,
                "compare.pathology" => self.compare.pathology = parse(line, key, v)?,
                _ => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: key.to_string(),
                    })
                }
            }
        }
        Ok(())
    }

    /// Serialize every key in a fixed order; `parse(resolved())` is the
    /// identity.
    pub fn resolved(&self) -> String {
        let opt = |o: Option<usize>| o.map_or("none".to_string(), |v| v.to_string());
        let list = |v: &[String]| v.join(",");
        let nums = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let seeds = |v: &[u64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "train.arch = {}\n\
             train.base_channels = {}\n\
             train.batch_size = {}\n\
             train.seed = {}\n\
             train.validate_every = {}\n\
             train.max_epochs = {}\n\
             train.max_images = {}\n\
             adam.alpha = {}\n\
             adam.beta1 = {}\n\
             adam.beta2 = {}\n\
             adam.epsilon = {}\n\
             schedule.lr_patience_epochs = {}\n\
             schedule.lr_factor = {}\n\
             schedule.pretrain_stop_epochs = {}\n\
             schedule.finetune_stop_images = {}\n\
             augment.enabled = {}\n\
             augment.rotation_deg = {}\n\
             augment.scale_min = {}\n\
             augment.scale_max = {}\n\
             augment.translation_frac = {}\n\
             augment.flip_h = {}\n\
             augment.flip_v = {}\n\
             augment.brightness = {}\n\
             augment.contrast = {}\n\
             augment.hue = {}\n\
             ssim.sigma = {}\n\
             ssim.window_radius = {}\n\
             ssim.c1 = {}\n\
             ssim.c2 = {}\n\
             ssim.dynamic_range = {}\n\
             compare.archs = {}\n\
             compare.modes = {}\n\
             compare.sizes = {}\n\
             compare.seeds = {}\n\
             compare.pretrain_pool = {}\n\
             compare.seg_pool = {}\n\
             compare.image_size = {}\n\
             compare.pathology = {}\n",
            self.arch,
            self.base_channels,
            self.batch_size,
            self.seed,
            self.validate_every,
            opt(self.max_epochs),
            opt(self.max_images),
            self.alpha,
            self.beta1,
            self.beta2,
            self.epsilon,
            self.lr_patience_epochs,
            self.lr_factor,
            self.pretrain_stop_epochs,
            self.finetune_stop_images,
            self.augment_enabled,
            self.augment.rotation_deg,
            self.augment.scale.0,
            self.augment.scale.1,
            self.augment.translation_frac,
            self.augment.flip_h,
            self.augment.flip_v,
            self.augment.brightness,
            self.augment.contrast,
            self.augment.hue,
            self.ssim.gaussian_sigma,
            self.ssim.window_radius,
            self.ssim.c1,
            self.ssim.c2,
            self.ssim.dynamic_range,
            list(&self.compare.archs),
            list(&self.compare.modes),
            nums(&self.compare.sizes),
            seeds(&self.compare.seeds),
            self.compare.pretrain_pool,
            self.compare.seg_pool,
            self.compare.image_size,
            self.compare.pathology,
        )
    }
}
