//! Episodic training: the per-episode objective, SGD with momentum and
//! step decay, episode sources and the training loop.

mod checkpoint;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::encoder::{self, EncoderConfig, EncoderParams};
use crate::episodes::io::read_episode;
use crate::episodes::{sample_episode, ClassSplit, Episode, ShapeDatasetConfig, SplitPart};
use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::metric::{
    compute_prototypes, par_loss, predict_mask, probability_map, seg_loss, total_loss, Distance,
    MetricConfig,
};
use crate::scalar::Scalar;
use crate::seed::{derive_seed, stream};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    /// Iterations between learning-rate decays; 0 disables decay.
    pub lr_decay_every: usize,
    pub lambda_par: f64,
    pub alpha: f64,
    pub distance: Distance,
    pub ways: usize,
    pub shots: usize,
    pub n_query: usize,
    pub hflip_augment: bool,
    pub seed: u64,
    /// Iterations between periodic checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_factor: 0.1,
            lr_decay_every: 2000,
            lambda_par: 1.0,
            alpha: 20.0,
            distance: Distance::Cosine,
            ways: 1,
            shots: 1,
            n_query: 1,
            hflip_augment: true,
            seed: 0,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad(format!(
                "lr_decay_factor must be in (0, 1], got {}",
                self.lr_decay_factor
            ));
        }
        if !(self.lambda_par >= 0.0 && self.lambda_par.is_finite()) {
            return bad(format!("lambda_par must be >= 0, got {}", self.lambda_par));
        }
        if self.ways == 0 || self.shots == 0 || self.n_query == 0 {
            return bad(format!(
                "ways, shots and n_query must be positive, got {}, {}, {}",
                self.ways, self.shots, self.n_query
            ));
        }
        self.metric().validate()
    }

    pub fn metric(&self) -> MetricConfig {
        MetricConfig {
            alpha: self.alpha,
            distance: self.distance,
        }
    }

    /// Step schedule `lr * factor^floor(iteration / every)`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        if self.lr_decay_every == 0 {
            return self.lr;
        }
        self.lr
            * self
                .lr_decay_factor
                .powi((iteration / self.lr_decay_every) as i32)
    }
}

/// Hyper-parameters of one SGD update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdStep {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `g' = g + wd * w; v = m * v + g'; w -= lr * v`, in place.
pub fn sgd_step<S: Scalar>(
    params: &mut [Tensor<S>],
    grads: &[Tensor<S>],
    velocity: &mut [Tensor<S>],
    step: &SgdStep,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::InvalidArgument(format!(
            "sgd_step: {} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((w, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        if w.shape() != g.shape() || w.shape() != v.shape() {
            return Err(Error::shape("sgd_step", w.shape(), g.shape()));
        }
    }
    let (lr, m, wd) = (
        S::lit(step.lr),
        S::lit(step.momentum),
        S::lit(step.weight_decay),
    );
    for ((w, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let g_reg = gi + wd * *wi;
            *vi = m * *vi + g_reg;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

/// Loss terms of one episode, recorded on a tape.
#[derive(Clone, Debug)]
pub struct EpisodeObjective<'t, S: Scalar> {
    pub seg: Var<'t, S>,
    /// `None` when `lambda == 0` and the reverse loss was never built.
    pub par: Option<Var<'t, S>>,
    pub total: Var<'t, S>,
    /// Query predictions at feature resolution.
    pub predictions: Vec<LabelMask>,
}

/// Builds the training objective of `episode`: support prototypes, query
/// segmentation loss and, for `lambda > 0`, the reverse loss. Both losses
/// are averaged over the queries.
///
/// `fixed_predictions` replaces the query argmax masks used for the reverse
/// direction, which keeps the objective smooth for finite differences.
pub fn episode_objective<'t, S: Scalar>(
    encoder_cfg: &EncoderConfig,
    params: &[Var<'t, S>],
    episode: &Episode,
    metric: &MetricConfig,
    lambda: S,
    fixed_predictions: Option<&[LabelMask]>,
) -> Result<EpisodeObjective<'t, S>> {
    let tape = params
        .first()
        .ok_or_else(|| Error::InvalidArgument("encoder has no parameters".into()))?
        .tape();
    let ds = encoder_cfg.downsample_factor();
    let ways = episode.ways();
    let embed =
        |image: &Tensor<f64>| encoder::forward(encoder_cfg, params, tape.constant(image.cast()));
    let support_feats = episode
        .support
        .iter()
        .map(|s| embed(&s.image))
        .collect::<Result<Vec<_>>>()?;
    let support_masks = episode
        .support
        .iter()
        .map(|s| s.mask.downsample(ds))
        .collect::<Result<Vec<_>>>()?;
    let protos = compute_prototypes(&support_feats, &support_masks, ways)?;

    let mut seg_terms = Vec::with_capacity(episode.query.len());
    let mut query_feats = Vec::with_capacity(episode.query.len());
    let mut predictions = Vec::with_capacity(episode.query.len());
    for q in &episode.query {
        let f = embed(&q.image)?;
        let probs = probability_map(&f, &protos, metric)?;
        seg_terms.push(seg_loss(&probs, &q.mask.downsample(ds)?)?);
        predictions.push(predict_mask(&probs));
        query_feats.push(f);
    }
    let seg = tape.mean_of(&seg_terms)?;
    if lambda == S::zero() {
        return Ok(EpisodeObjective {
            seg,
            par: None,
            total: seg,
            predictions,
        });
    }
    let masks_for_par = fixed_predictions.unwrap_or(&predictions);
    if masks_for_par.len() != query_feats.len() {
        return Err(Error::InvalidArgument(format!(
            "{} fixed predictions for {} queries",
            masks_for_par.len(),
            query_feats.len()
        )));
    }
    let par_terms = query_feats
        .iter()
        .zip(masks_for_par)
        .map(|(f, pred)| par_loss(&support_feats, &support_masks, f, pred, ways, metric))
        .collect::<Result<Vec<_>>>()?;
    let par = tape.mean_of(&par_terms)?;
    Ok(EpisodeObjective {
        seg,
        par: Some(par),
        total: total_loss(seg, par, lambda)?,
        predictions,
    })
}

/// Flips every pair of the episode horizontally with probability 0.5.
pub fn augment(episode: &Episode, seed: u64) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    episode.map_pairs(|image, mask| {
        if rng.random_bool(0.5) {
            (image.flip_horizontal(), mask.flip_horizontal())
        } else {
            (image.clone(), mask.clone())
        }
    })
}

/// Parameters and optimiser state being trained.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: EncoderParams<f64>,
    pub velocity: Vec<Tensor<f64>>,
    /// Number of completed iterations; also the index of the next episode.
    pub iteration: u64,
}

impl TrainState {
    pub fn init(encoder_cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        let params = EncoderParams::init(encoder_cfg, derive_seed(seed, stream::INIT, 0))?;
        let velocity = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Ok(Self {
            params,
            velocity,
            iteration: 0,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub iteration: u64,
    pub lr: f64,
    pub loss_seg: f64,
    pub loss_par: Option<f64>,
}

pub const LOSS_LOG_HEADER: &str = "iter,lr,loss_seg,loss_par";

impl StepLog {
    /// CSV row; the PAR column is empty when the term was not computed.
    pub fn csv_row(&self) -> String {
        let mut row = format!("{},{},{},", self.iteration, self.lr, self.loss_seg);
        if let Some(p) = self.loss_par {
            let _ = write!(row, "{p}");
        }
        row
    }
}

/// One iteration: objective, backward pass and SGD update.
pub fn train_episode(
    state: &mut TrainState,
    encoder_cfg: &EncoderConfig,
    episode: &Episode,
    cfg: &TrainConfig,
) -> Result<StepLog> {
    let tape = Tape::new();
    let vars = state.params.register(&tape);
    let obj = episode_objective(
        encoder_cfg,
        &vars,
        episode,
        &cfg.metric(),
        cfg.lambda_par,
        None,
    )?;
    let loss_seg = obj.seg.value().data()[0];
    let loss_par = obj.par.map(|p| p.value().data()[0]);
    let total = obj.total.value().data()[0];
    let iteration = state.iteration;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss at iteration {iteration}: seg {loss_seg}, par {loss_par:?}"
        )));
    }
    let grads = tape.backward(obj.total)?;
    let grads: Vec<Tensor<f64>> = vars.iter().map(|v| grads.wrt(v)).collect();
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of parameter tensor {i} at iteration {iteration}"
        )));
    }
    let lr = cfg.lr_at(iteration as usize);
    let step = SgdStep {
        lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    sgd_step(
        state.params.tensors_mut(),
        &grads,
        &mut state.velocity,
        &step,
    )?;
    state.iteration += 1;
    Ok(StepLog {
        iteration,
        lr,
        loss_seg,
        loss_par,
    })
}

/// Supplies the training episode of a given iteration.
pub trait EpisodeSource {
    fn episode(&mut self, index: u64) -> Result<Episode>;
}

/// Samples training episodes from the seen classes; episode `i` uses the
/// seed `derive_seed(master, TRAIN_EPISODE, i)`.
#[derive(Clone, Debug)]
pub struct GeneratedEpisodes {
    pub dataset: ShapeDatasetConfig,
    pub split: ClassSplit,
    pub part: SplitPart,
    pub ways: usize,
    pub shots: usize,
    pub n_query: usize,
    pub master_seed: u64,
}

impl GeneratedEpisodes {
    pub fn for_training(
        dataset: &ShapeDatasetConfig,
        split: &ClassSplit,
        cfg: &TrainConfig,
    ) -> Self {
        Self {
            dataset: dataset.clone(),
            split: split.clone(),
            part: SplitPart::Seen,
            ways: cfg.ways,
            shots: cfg.shots,
            n_query: cfg.n_query,
            master_seed: cfg.seed,
        }
    }

    pub fn seed_of(&self, index: u64) -> u64 {
        derive_seed(self.master_seed, stream::TRAIN_EPISODE, index)
    }
}

impl EpisodeSource for GeneratedEpisodes {
    fn episode(&mut self, index: u64) -> Result<Episode> {
        sample_episode(
            &self.dataset,
            &self.split,
            self.part,
            self.ways,
            self.shots,
            self.n_query,
            self.seed_of(index),
        )
    }
}

/// Episodes read from directories; iteration `i` uses `dirs[i % len]`.
#[derive(Clone, Debug)]
pub struct DiskEpisodes {
    dirs: Vec<PathBuf>,
}

impl DiskEpisodes {
    pub fn new(dirs: Vec<PathBuf>) -> Result<Self> {
        if dirs.is_empty() {
            return Err(Error::InvalidArgument("no episode directories".into()));
        }
        Ok(Self { dirs })
    }
}

impl EpisodeSource for DiskEpisodes {
    fn episode(&mut self, index: u64) -> Result<Episode> {
        let dir = &self.dirs[(index % self.dirs.len() as u64) as usize];
        read_episode(dir).map(|(episode, _)| episode)
    }
}

/// Training loop over a checkpointable state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub checkpoint: Checkpoint,
}

impl Trainer {
    pub fn new(
        train: TrainConfig,
        encoder: EncoderConfig,
        dataset: ShapeDatasetConfig,
        split: ClassSplit,
    ) -> Result<Self> {
        train.validate()?;
        encoder.validate()?;
        dataset.validate()?;
        encoder.check_image_size(dataset.image_size, dataset.image_size)?;
        let ds = encoder.downsample_factor();
        if !dataset.feature_stride.is_multiple_of(ds) {
            return Err(Error::Config(format!(
                "dataset feature_stride {} must be a multiple of the encoder downsample factor {ds}",
                dataset.feature_stride
            )));
        }
        let state = TrainState::init(&encoder, train.seed)?;
        Ok(Self {
            checkpoint: Checkpoint {
                train,
                encoder,
                dataset,
                split,
                state,
            },
        })
    }

    pub fn from_checkpoint(checkpoint: Checkpoint) -> Self {
        Self { checkpoint }
    }

    pub fn iteration(&self) -> u64 {
        self.checkpoint.state.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration() >= self.checkpoint.train.iterations as u64
    }

    pub fn generated_source(&self) -> GeneratedEpisodes {
        let ck = &self.checkpoint;
        GeneratedEpisodes::for_training(&ck.dataset, &ck.split, &ck.train)
    }

    /// Runs the next iteration.
    pub fn step(&mut self, source: &mut dyn EpisodeSource) -> Result<StepLog> {
        let ck = &mut self.checkpoint;
        let i = ck.state.iteration;
        let mut episode = source.episode(i)?;
        if ck.train.hflip_augment {
            episode = augment(&episode, derive_seed(ck.train.seed, stream::AUGMENT, i));
        }
        train_episode(&mut ck.state, &ck.encoder, &episode, &ck.train)
    }

    /// Runs until `iterations` is reached, handing every step to `on_step`.
    pub fn run(
        &mut self,
        source: &mut dyn EpisodeSource,
        mut on_step: impl FnMut(&Self, &StepLog) -> Result<()>,
    ) -> Result<()> {
        while !self.is_done() {
            let log = self.step(source)?;
            on_step(self, &log)?;
        }
        Ok(())
    }
}

/// Output files of a training run in `dir`.
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn loss_log(&self) -> PathBuf {
        self.dir.join("loss.csv")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.panc")
    }

    pub fn periodic_checkpoint(&self, iteration: u64) -> PathBuf {
        self.dir.join(format!("checkpoint_{iteration:06}.panc"))
    }
}

/// Trains to completion writing `loss.csv`, periodic checkpoints and
/// `final.panc` into `files.dir`. A resumed trainer appends to the log.
pub fn train_to_dir(
    trainer: &mut Trainer,
    source: &mut dyn EpisodeSource,
    files: &RunFiles,
    mut progress: impl FnMut(&StepLog),
) -> Result<()> {
    fs::create_dir_all(&files.dir).map_err(|e| Error::io(&files.dir, e))?;
    let log_path = files.loss_log();
    let resuming = trainer.iteration() > 0 && log_path.exists();
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resuming)
        .write(true)
        .truncate(!resuming)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    if !resuming {
        writeln!(log, "{LOSS_LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;
    }
    let every = trainer.checkpoint.train.checkpoint_every as u64;
    trainer.run(source, |t, step| {
        writeln!(log, "{}", step.csv_row()).map_err(|e| Error::io(&log_path, e))?;
        progress(step);
        let done = t.iteration();
        if every > 0 && done % every == 0 && !t.is_done() {
            t.checkpoint.save(&files.periodic_checkpoint(done))?;
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    trainer.checkpoint.save(&files.final_checkpoint())
}

/// Trains in memory and returns every step.
pub fn train(trainer: &mut Trainer, source: &mut dyn EpisodeSource) -> Result<Vec<StepLog>> {
    let mut logs = Vec::new();
    trainer.run(source, |_, step| {
        logs.push(*step);
        Ok(())
    })?;
    Ok(logs)
}

/// Moving average over a trailing window (shorter at the start).
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| {
            let tail = &values[(i + 1).saturating_sub(window)..=i];
            tail.iter().sum::<f64>() / tail.len() as f64
        })
        .collect()
}
