//! TOML run configuration. Every key is optional; unknown keys are errors.

use std::path::Path;

use protoseg::annotations::{AnnotationKind, ScribbleConfig};
use protoseg::encoder::{BlockConfig, EncoderConfig};
use protoseg::episodes::{make_split, ClassSplit, ShapeDatasetConfig, SplitPart};
use protoseg::eval::EvalConfig;
use protoseg::trainer::TrainConfig;
use protoseg::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed: class split, initialisation, episodes and augmentation.
    pub seed: u64,
    pub dataset: DatasetSection,
    pub encoder: EncoderSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub annotations: AnnotationSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub num_classes: usize,
    pub unseen_fraction: f64,
    pub image_size: usize,
    pub noise_std: f64,
    pub fg_intensity: [f64; 2],
    pub bg_intensity: [f64; 2],
    pub min_shape_fraction: f64,
    pub feature_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub in_channels: usize,
    /// One entry per block, like `pool_strides` and `dilations`.
    pub channels: Vec<usize>,
    pub pool_strides: Vec<usize>,
    pub dilations: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub lambda_par: f64,
    pub alpha: f64,
    pub distance: String,
    pub ways: usize,
    pub shots: usize,
    pub n_query: usize,
    pub hflip: bool,
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub part: String,
    pub ways: usize,
    pub shots: usize,
    pub n_query: usize,
    pub episodes: usize,
    pub runs: usize,
    pub base_seed: u64,
    pub probe_episodes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotationSection {
    pub kind: String,
    pub strokes: usize,
    pub stroke_length: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: TrainConfig::default().seed,
            dataset: DatasetSection::default(),
            encoder: EncoderSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            annotations: AnnotationSection::default(),
        }
    }
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = ShapeDatasetConfig::default();
        Self {
            num_classes: d.num_classes,
            unseen_fraction: 1.0 / 3.0,
            image_size: d.image_size,
            noise_std: d.noise_std,
            fg_intensity: [d.fg_intensity_range.0, d.fg_intensity_range.1],
            bg_intensity: [d.bg_intensity_range.0, d.bg_intensity_range.1],
            min_shape_fraction: d.min_shape_fraction,
            feature_stride: d.feature_stride,
        }
    }
}

impl Default for EncoderSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            in_channels: e.in_channels,
            channels: e.blocks.iter().map(|b| b.out_channels).collect(),
            pool_strides: e.blocks.iter().map(|b| b.pool_stride).collect(),
            dilations: e.blocks.iter().map(|b| b.dilation).collect(),
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            iterations: t.iterations,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            lr_decay_factor: t.lr_decay_factor,
            lr_decay_every: t.lr_decay_every,
            lambda_par: t.lambda_par,
            alpha: t.alpha,
            distance: t.distance.name().to_string(),
            ways: t.ways,
            shots: t.shots,
            n_query: t.n_query,
            hflip: t.hflip_augment,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            part: e.part.name().to_string(),
            ways: e.ways,
            shots: e.shots,
            n_query: e.n_query,
            episodes: e.episodes_per_run,
            runs: e.runs,
            base_seed: e.base_seed,
            probe_episodes: 1000,
            threads: None,
        }
    }
}

impl Default for AnnotationSection {
    fn default() -> Self {
        let s = ScribbleConfig::default();
        Self {
            kind: AnnotationKind::Dense.name().to_string(),
            strokes: s.strokes,
            stroke_length: s.stroke_length,
        }
    }
}

/// Seeds are echoed as TOML integers, which are signed 64-bit.
fn toml_integer(key: &str, v: u64) -> Result<()> {
    if v > i64::MAX as u64 {
        return Err(Error::Config(format!(
            "{key} must be at most {}, got {v}",
            i64::MAX
        )));
    }
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn dataset(&self) -> Result<ShapeDatasetConfig> {
        let d = &self.dataset;
        let cfg = ShapeDatasetConfig {
            num_classes: d.num_classes,
            image_size: d.image_size,
            noise_std: d.noise_std,
            fg_intensity_range: (d.fg_intensity[0], d.fg_intensity[1]),
            bg_intensity_range: (d.bg_intensity[0], d.bg_intensity[1]),
            min_shape_fraction: d.min_shape_fraction,
            feature_stride: d.feature_stride,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn split(&self) -> Result<ClassSplit> {
        make_split(
            self.dataset.num_classes,
            self.dataset.unseen_fraction,
            self.seed,
        )
    }

    pub fn encoder(&self) -> Result<EncoderConfig> {
        let e = &self.encoder;
        if e.channels.len() != e.pool_strides.len() || e.channels.len() != e.dilations.len() {
            return Err(Error::Config(format!(
                "encoder channels, pool_strides and dilations need one entry per block, got {}, {} and {}",
                e.channels.len(),
                e.pool_strides.len(),
                e.dilations.len()
            )));
        }
        let blocks = (0..e.channels.len())
            .map(|i| BlockConfig {
                out_channels: e.channels[i],
                pool_stride: e.pool_strides[i],
                dilation: e.dilations[i],
            })
            .collect();
        let cfg = EncoderConfig {
            in_channels: e.in_channels,
            blocks,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        toml_integer("seed", self.seed)?;
        let t = &self.train;
        let cfg = TrainConfig {
            iterations: t.iterations,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            lr_decay_factor: t.lr_decay_factor,
            lr_decay_every: t.lr_decay_every,
            lambda_par: t.lambda_par,
            alpha: t.alpha,
            distance: t.distance.parse()?,
            ways: t.ways,
            shots: t.shots,
            n_query: t.n_query,
            hflip_augment: t.hflip,
            seed: self.seed,
            checkpoint_every: t.checkpoint_every,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scribble(&self) -> Result<ScribbleConfig> {
        let cfg = ScribbleConfig {
            strokes: self.annotations.strokes,
            stroke_length: self.annotations.stroke_length,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval(&self) -> Result<EvalConfig> {
        let e = &self.eval;
        toml_integer("eval.base_seed", e.base_seed)?;
        let cfg = EvalConfig {
            part: e.part.parse::<SplitPart>()?,
            ways: e.ways,
            shots: e.shots,
            n_query: e.n_query,
            episodes_per_run: e.episodes,
            runs: e.runs,
            base_seed: e.base_seed,
            annotation: self.annotations.kind.parse()?,
            scribble: self.scribble()?,
            threads: e.threads,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every section, so commands fail before any compute.
    pub fn validate(&self) -> Result<()> {
        self.dataset()?;
        self.split()?;
        self.encoder()?;
        self.train()?;
        self.eval()?;
        if self.eval.probe_episodes == 0 {
            return Err(Error::Config("eval probe_episodes must be positive".into()));
        }
        Ok(())
    }
}
