//! Binary checkpoint format. All integers and floats are little-endian.
//!
//! ```text
//! magic        b"PANC"
//! version      u32
//! iteration    u64
//! train        iterations u64, lr f64, momentum f64, weight_decay f64,
//!              lr_decay_factor f64, lr_decay_every u64, lambda_par f64,
//!              alpha f64, distance u8 (0 cosine, 1 squared euclidean),
//!              ways u64, shots u64, n_query u64, hflip u8, seed u64,
//!              checkpoint_every u64
//! encoder      in_channels u64, blocks u32, per block
//!              (out_channels u64, pool_stride u64, dilation u64)
//! dataset      num_classes u64, image_size u64, noise_std f64,
//!              fg lo f64, fg hi f64, bg lo f64, bg hi f64,
//!              min_shape_fraction f64, feature_stride u64
//! split        seen count u32 + u64 ids, unseen count u32 + u64 ids
//! rng          master seed u64, episode counter u64
//! params       tensor list
//! velocity     tensor list
//! ```
//!
//! A tensor list is a u32 count followed by, per tensor, a u32 rank, u64
//! dimensions and f64 values.

use std::fs;
use std::path::Path;

use crate::encoder::{BlockConfig, EncoderConfig, EncoderParams};
use crate::episodes::{ClassSplit, ShapeDatasetConfig};
use crate::error::{Error, Result};
use crate::metric::Distance;
use crate::tensor::Tensor;

use super::{TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PANC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training or evaluate a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub dataset: ShapeDatasetConfig,
    pub split: ClassSplit,
    pub state: TrainState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn ids(&mut self, ids: &[usize]) {
        self.u32(ids.len() as u32);
        for &id in ids {
            self.usize(id);
        }
    }
    fn tensors(&mut self, tensors: &[Tensor<f64>]) {
        self.u32(tensors.len() as u32);
        for t in tensors {
            self.u32(t.ndim() as u32);
            for &d in t.shape() {
                self.usize(d);
            }
            for &v in t.data() {
                self.f64(v);
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

type Parse<T> = std::result::Result<T, String>;

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Parse<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {} (wanted {n} more)", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Parse<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Parse<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Parse<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn usize(&mut self) -> Parse<usize> {
        usize::try_from(self.u64()?).map_err(|e| e.to_string())
    }
    fn f64(&mut self) -> Parse<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn bool(&mut self) -> Parse<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(format!("invalid boolean byte {b}")),
        }
    }
    fn ids(&mut self) -> Parse<Vec<usize>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.usize()).collect()
    }
    fn tensors(&mut self) -> Parse<Vec<Tensor<f64>>> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.usize()).collect::<Parse<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| {
                    n.checked_mul(8)
                        .is_some_and(|b| b <= self.bytes.len() - self.pos)
                })
                .ok_or_else(|| format!("tensor of shape {shape:?} exceeds the file"))?;
            let data = (0..numel).map(|_| self.f64()).collect::<Parse<Vec<_>>>()?;
            out.push(Tensor::new(shape, data).map_err(|e| e.to_string())?);
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u64(self.state.iteration);

        let t = &self.train;
        w.usize(t.iterations);
        w.f64(t.lr);
        w.f64(t.momentum);
        w.f64(t.weight_decay);
        w.f64(t.lr_decay_factor);
        w.usize(t.lr_decay_every);
        w.f64(t.lambda_par);
        w.f64(t.alpha);
        w.u8(match t.distance {
            Distance::Cosine => 0,
            Distance::SquaredEuclidean => 1,
        });
        w.usize(t.ways);
        w.usize(t.shots);
        w.usize(t.n_query);
        w.u8(t.hflip_augment as u8);
        w.u64(t.seed);
        w.usize(t.checkpoint_every);

        w.usize(self.encoder.in_channels);
        w.u32(self.encoder.blocks.len() as u32);
        for b in &self.encoder.blocks {
            w.usize(b.out_channels);
            w.usize(b.pool_stride);
            w.usize(b.dilation);
        }

        let d = &self.dataset;
        w.usize(d.num_classes);
        w.usize(d.image_size);
        w.f64(d.noise_std);
        w.f64(d.fg_intensity_range.0);
        w.f64(d.fg_intensity_range.1);
        w.f64(d.bg_intensity_range.0);
        w.f64(d.bg_intensity_range.1);
        w.f64(d.min_shape_fraction);
        w.usize(d.feature_stride);

        w.ids(self.split.seen());
        w.ids(self.split.unseen());

        // counter-based episode stream: the seed and the next index
        w.u64(t.seed);
        w.u64(self.state.iteration);

        w.tensors(self.state.params.tensors());
        w.tensors(&self.state.velocity);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err("missing PANC magic bytes".into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!(
                "unsupported checkpoint version {version} (this build reads version {CHECKPOINT_VERSION})"
            ));
        }
        let iteration = r.u64()?;

        let train = TrainConfig {
            iterations: r.usize()?,
            lr: r.f64()?,
            momentum: r.f64()?,
            weight_decay: r.f64()?,
            lr_decay_factor: r.f64()?,
            lr_decay_every: r.usize()?,
            lambda_par: r.f64()?,
            alpha: r.f64()?,
            distance: match r.u8()? {
                0 => Distance::Cosine,
                1 => Distance::SquaredEuclidean,
                b => return Err(format!("unknown distance code {b}")),
            },
            ways: r.usize()?,
            shots: r.usize()?,
            n_query: r.usize()?,
            hflip_augment: r.bool()?,
            seed: r.u64()?,
            checkpoint_every: r.usize()?,
        };

        let in_channels = r.usize()?;
        let n_blocks = r.u32()? as usize;
        let blocks = (0..n_blocks)
            .map(|_| {
                Ok(BlockConfig {
                    out_channels: r.usize()?,
                    pool_stride: r.usize()?,
                    dilation: r.usize()?,
                })
            })
            .collect::<Parse<Vec<_>>>()?;
        let encoder = EncoderConfig {
            in_channels,
            blocks,
        };

        let dataset = ShapeDatasetConfig {
            num_classes: r.usize()?,
            image_size: r.usize()?,
            noise_std: r.f64()?,
            fg_intensity_range: (r.f64()?, r.f64()?),
            bg_intensity_range: (r.f64()?, r.f64()?),
            min_shape_fraction: r.f64()?,
            feature_stride: r.usize()?,
        };
        let seen = r.ids()?;
        let unseen = r.ids()?;
        let split = ClassSplit::new(seen, unseen).map_err(|e| e.to_string())?;

        let master = r.u64()?;
        let counter = r.u64()?;
        if master != train.seed || counter != iteration {
            return Err(format!(
                "rng state (seed {master}, counter {counter}) disagrees with seed {} at iteration {iteration}",
                train.seed
            ));
        }

        let params = r.tensors()?;
        let velocity = r.tensors()?;
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        train.validate().map_err(|e| e.to_string())?;
        encoder.validate().map_err(|e| e.to_string())?;
        dataset.validate().map_err(|e| e.to_string())?;
        let params = EncoderParams::from_tensors(&encoder, params).map_err(|e| e.to_string())?;
        if velocity.len() != params.tensors().len()
            || velocity
                .iter()
                .zip(params.tensors())
                .any(|(v, p)| v.shape() != p.shape())
        {
            return Err("momentum buffers do not match the parameters".into());
        }
        Ok(Self {
            train,
            encoder,
            dataset,
            split,
            state: TrainState {
                params,
                velocity,
                iteration,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::format(path, reason))
    }
}
