//! Episode-level evaluation: IoU metrics, multi-run averaging and the
//! prototype alignment probe.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::annotations::{self, pool_with_weak, AnnotationKind, ScribbleConfig, WeakAnnotation};
use crate::encoder::{self, EncoderConfig, EncoderParams};
use crate::episodes::{sample_episode, ClassSplit, Episode, ShapeDatasetConfig, SplitPart};
use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::metric::{compute_prototypes, predict_mask, probability_map, MetricConfig};
use crate::seed::{derive_seed, stream};
use crate::tensor::{Tape, Tensor};
use crate::trainer::{Checkpoint, TrainState};

/// Environment variable capping the evaluation worker count.
pub const THREADS_ENV: &str = "PROTOSEG_THREADS";

fn check_dims(pred: &LabelMask, gt: &LabelMask) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(
            "iou",
            &[pred.height(), pred.width()],
            &[gt.height(), gt.width()],
        ));
    }
    Ok(())
}

fn ratio(inter: u64, union: u64) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn overlap(pred: &LabelMask, gt: &LabelMask, is: impl Fn(u8) -> bool) -> (u64, u64) {
    let mut inter = 0;
    let mut union = 0;
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        let (a, b) = (is(p), is(g));
        inter += u64::from(a && b);
        union += u64::from(a || b);
    }
    (inter, union)
}

/// Intersection over union of the `label` regions; 1 when both are empty.
pub fn iou(pred: &LabelMask, gt: &LabelMask, label: u8) -> Result<f64> {
    check_dims(pred, gt)?;
    let (i, u) = overlap(pred, gt, |l| l == label);
    Ok(ratio(i, u))
}

fn is_foreground(l: u8) -> bool {
    l != LabelMask::BACKGROUND && l != LabelMask::UNKNOWN
}

/// Mean of the foreground-vs-background IoU pair, all classes merged.
pub fn binary_iou(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    check_dims(pred, gt)?;
    let (fi, fu) = overlap(pred, gt, is_foreground);
    let (bi, bu) = overlap(pred, gt, |l| l == LabelMask::BACKGROUND);
    Ok((ratio(fi, fu) + ratio(bi, bu)) / 2.0)
}

/// Support set handed to a segmentor: images with (possibly weak)
/// annotations, slot-major like [`Episode::support`].
#[derive(Clone, Debug)]
pub struct SupportSet {
    pub ways: usize,
    pub shots: usize,
    pub images: Vec<Tensor<f64>>,
    pub annotations: Vec<WeakAnnotation>,
}

impl SupportSet {
    /// Support of `episode` with annotations of `kind`; the annotation of
    /// support `j` is seeded with `derive_seed(episode_seed, ANNOTATION, j)`.
    pub fn from_episode(
        episode: &Episode,
        kind: AnnotationKind,
        scribble: &ScribbleConfig,
        episode_seed: u64,
    ) -> Result<Self> {
        let annotations = episode
            .support
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let seed = derive_seed(episode_seed, stream::ANNOTATION, j as u64);
                annotations::derive(kind, &s.mask, scribble, seed)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            ways: episode.ways(),
            shots: episode.shots,
            images: episode.support.iter().map(|s| s.image.clone()).collect(),
            annotations,
        })
    }
}

/// Anything that labels query images from a support set. Query ground truth
/// is never passed in.
pub trait Segmentor: Sync {
    /// Image-resolution masks with labels in `0..=ways`, one per query.
    fn segment(
        &self,
        support: &SupportSet,
        queries: &[Tensor<f64>],
        episode_seed: u64,
    ) -> Result<Vec<LabelMask>>;
}

/// Prototype segmentation with a trained (or untrained) encoder.
#[derive(Clone, Debug)]
pub struct ModelSegmentor {
    pub encoder: EncoderConfig,
    pub params: EncoderParams<f64>,
    pub metric: MetricConfig,
}

impl ModelSegmentor {
    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        Self {
            encoder: ck.encoder.clone(),
            params: ck.state.params.clone(),
            metric: ck.train.metric(),
        }
    }

    /// Same architecture and metric with freshly initialised weights.
    pub fn untrained(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            params: TrainState::init(&ck.encoder, ck.train.seed)?.params,
            ..Self::from_checkpoint(ck)
        })
    }
}

impl Segmentor for ModelSegmentor {
    fn segment(
        &self,
        support: &SupportSet,
        queries: &[Tensor<f64>],
        _episode_seed: u64,
    ) -> Result<Vec<LabelMask>> {
        let tape = Tape::new();
        let params = self.params.register_frozen(&tape);
        let ds = self.encoder.downsample_factor();
        let feats = support
            .images
            .iter()
            .map(|im| encoder::forward(&self.encoder, &params, tape.constant(im.clone())))
            .collect::<Result<Vec<_>>>()?;
        let weak = support
            .annotations
            .iter()
            .map(|a| a.downsample(ds))
            .collect::<Result<Vec<_>>>()?;
        let protos = pool_with_weak(&feats, &weak, support.ways)?;
        queries
            .iter()
            .map(|q| {
                let (_, h, w) = q.chw()?;
                let f = encoder::forward(&self.encoder, &params, tape.constant(q.clone()))?;
                predict_mask(&probability_map(&f, &protos, &self.metric)?).resize_nearest(h, w)
            })
            .collect()
    }
}

/// Predicts background everywhere.
#[derive(Clone, Copy, Debug, Default)]
pub struct AllBackground;

impl Segmentor for AllBackground {
    fn segment(
        &self,
        _support: &SupportSet,
        queries: &[Tensor<f64>],
        _episode_seed: u64,
    ) -> Result<Vec<LabelMask>> {
        queries
            .iter()
            .map(|q| {
                let (_, h, w) = q.chw()?;
                Ok(LabelMask::filled(h, w, LabelMask::BACKGROUND))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub part: SplitPart,
    pub ways: usize,
    pub shots: usize,
    pub n_query: usize,
    pub episodes_per_run: usize,
    pub runs: usize,
    pub base_seed: u64,
    pub annotation: AnnotationKind,
    pub scribble: ScribbleConfig,
    /// Worker cap; `None` reads [`THREADS_ENV`], falling back to all cores.
    pub threads: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            part: SplitPart::Unseen,
            ways: 1,
            shots: 1,
            n_query: 1,
            episodes_per_run: 200,
            runs: 5,
            base_seed: 1000,
            annotation: AnnotationKind::Dense,
            scribble: ScribbleConfig::default(),
            threads: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ways == 0 || self.shots == 0 || self.n_query == 0 {
            return Err(Error::Config(format!(
                "eval ways, shots and n_query must be positive, got {}, {}, {}",
                self.ways, self.shots, self.n_query
            )));
        }
        if self.episodes_per_run == 0 || self.runs == 0 {
            return Err(Error::Config(format!(
                "eval needs at least one run and one episode, got {} runs of {}",
                self.runs, self.episodes_per_run
            )));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("eval threads must be positive".into()));
        }
        self.scribble.validate()
    }

    /// Seed of run `run`; listed in the report.
    pub fn run_seed(&self, run: usize) -> u64 {
        derive_seed(self.base_seed, stream::EVAL_EPISODE, run as u64)
    }

    pub fn episode_seed(&self, run: usize, index: usize) -> u64 {
        derive_seed(self.run_seed(run), stream::EVAL_EPISODE, index as u64)
    }
}

/// Worker count from [`THREADS_ENV`], if set to a positive integer.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
    }
}

/// Intersection and union pixel counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: u64,
    pub union: u64,
}

impl Overlap {
    fn add(&mut self, (i, u): (u64, u64)) {
        self.intersection += i;
        self.union += u;
    }

    fn merge(&mut self, other: &Overlap) {
        self.intersection += other.intersection;
        self.union += other.union;
    }

    pub fn iou(&self) -> f64 {
        ratio(self.intersection, self.union)
    }
}

/// Counts accumulated over the episodes of one run, keyed by global class.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunCounts {
    pub classes: BTreeMap<usize, Overlap>,
    pub foreground: Overlap,
    pub background: Overlap,
    pub episodes: usize,
}

impl RunCounts {
    /// Adds one query. `classes[c - 1]` is the global class of slot `c`.
    pub fn add_query(&mut self, classes: &[usize], pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        check_dims(pred, gt)?;
        for (i, &class) in classes.iter().enumerate() {
            let slot = (i + 1) as u8;
            self.classes
                .entry(class)
                .or_default()
                .add(overlap(pred, gt, |l| l == slot));
        }
        self.foreground.add(overlap(pred, gt, is_foreground));
        self.background
            .add(overlap(pred, gt, |l| l == LabelMask::BACKGROUND));
        Ok(())
    }

    pub fn merge(mut self, other: RunCounts) -> RunCounts {
        for (class, o) in &other.classes {
            self.classes.entry(*class).or_default().merge(o);
        }
        self.foreground.merge(&other.foreground);
        self.background.merge(&other.background);
        self.episodes += other.episodes;
        self
    }

    pub fn class_iou(&self) -> BTreeMap<usize, f64> {
        self.classes.iter().map(|(&c, o)| (c, o.iou())).collect()
    }

    pub fn mean_iou(&self) -> f64 {
        let ious = self.class_iou();
        if ious.is_empty() {
            return 0.0;
        }
        ious.values().sum::<f64>() / ious.len() as f64
    }

    pub fn binary_iou(&self) -> f64 {
        (self.foreground.iou() + self.background.iou()) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub annotation: AnnotationKind,
    pub ways: usize,
    pub shots: usize,
    /// Per-class IoU averaged over the runs in which the class occurred.
    pub per_class: BTreeMap<usize, f64>,
    pub mean_iou: f64,
    pub binary_iou: f64,
    pub run_mean_iou: Vec<f64>,
    pub run_binary_iou: Vec<f64>,
    /// Episodes per run.
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub proto_align_distance: Option<f64>,
}

impl EvalReport {
    fn from_runs(cfg: &EvalConfig, runs: &[RunCounts]) -> Self {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for run in runs {
            for (class, iou) in run.class_iou() {
                let e = sums.entry(class).or_default();
                e.0 += iou;
                e.1 += 1;
            }
        }
        let run_mean_iou: Vec<f64> = runs.iter().map(RunCounts::mean_iou).collect();
        let run_binary_iou: Vec<f64> = runs.iter().map(RunCounts::binary_iou).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Self {
            annotation: cfg.annotation,
            ways: cfg.ways,
            shots: cfg.shots,
            per_class: sums
                .into_iter()
                .map(|(c, (s, n))| (c, s / n as f64))
                .collect(),
            mean_iou: mean(&run_mean_iou),
            binary_iou: mean(&run_binary_iou),
            run_mean_iou,
            run_binary_iou,
            episodes: cfg.episodes_per_run,
            seeds: (0..cfg.runs).map(|r| cfg.run_seed(r)).collect(),
            proto_align_distance: None,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{}-way {}-shot, {} annotations, {} runs x {} episodes",
            self.ways,
            self.shots,
            self.annotation.name(),
            self.seeds.len(),
            self.episodes
        );
        let _ = writeln!(s, "mean IoU    {:.4}", self.mean_iou);
        let _ = writeln!(s, "binary IoU  {:.4}", self.binary_iou);
        for (r, (m, b)) in self
            .run_mean_iou
            .iter()
            .zip(&self.run_binary_iou)
            .enumerate()
        {
            let _ = writeln!(
                s,
                "  run {r} (seed {}): mean IoU {m:.4}, binary IoU {b:.4}",
                self.seeds[r]
            );
        }
        for (c, v) in &self.per_class {
            let _ = writeln!(s, "  class {c:>2}: IoU {v:.4}");
        }
        if let Some(d) = self.proto_align_distance {
            let _ = writeln!(s, "prototype alignment distance {d:.4}");
        }
        s
    }

    /// Flat `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "annotation={}", self.annotation.name());
        let _ = writeln!(s, "ways={}", self.ways);
        let _ = writeln!(s, "shots={}", self.shots);
        let _ = writeln!(s, "runs={}", self.seeds.len());
        let _ = writeln!(s, "episodes={}", self.episodes);
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "seeds={}", seeds.join(";"));
        let _ = writeln!(s, "mean_iou={}", self.mean_iou);
        let _ = writeln!(s, "binary_iou={}", self.binary_iou);
        for (r, (m, b)) in self
            .run_mean_iou
            .iter()
            .zip(&self.run_binary_iou)
            .enumerate()
        {
            let _ = writeln!(s, "run{r}.mean_iou={m}");
            let _ = writeln!(s, "run{r}.binary_iou={b}");
        }
        for (c, v) in &self.per_class {
            let _ = writeln!(s, "class{c}.iou={v}");
        }
        if let Some(d) = self.proto_align_distance {
            let _ = writeln!(s, "proto_align_distance={d}");
        }
        s
    }
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let threads = match threads {
        Some(n) => Some(n),
        None => threads_from_env()?,
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start eval workers: {e}")))?;
    Ok(pool.install(f))
}

fn evaluate_episode(
    segmentor: &dyn Segmentor,
    dataset: &ShapeDatasetConfig,
    split: &ClassSplit,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<RunCounts> {
    let episode = sample_episode(
        dataset,
        split,
        cfg.part,
        cfg.ways,
        cfg.shots,
        cfg.n_query,
        seed,
    )?;
    let support = SupportSet::from_episode(&episode, cfg.annotation, &cfg.scribble, seed)?;
    let queries: Vec<Tensor<f64>> = episode.query.iter().map(|q| q.image.clone()).collect();
    let preds = segmentor.segment(&support, &queries, seed)?;
    if preds.len() != queries.len() {
        return Err(Error::InvalidArgument(format!(
            "segmentor returned {} masks for {} queries",
            preds.len(),
            queries.len()
        )));
    }
    let mut counts = RunCounts {
        episodes: 1,
        ..Default::default()
    };
    for (pred, q) in preds.iter().zip(&episode.query) {
        counts.add_query(&episode.classes, pred, &q.mask)?;
    }
    Ok(counts)
}

/// Evaluates `segmentor` on `cfg.runs` independent runs of
/// `cfg.episodes_per_run` episodes each. Class IoUs come from counts
/// accumulated over a whole run; run metrics are then averaged.
pub fn evaluate(
    segmentor: &dyn Segmentor,
    dataset: &ShapeDatasetConfig,
    split: &ClassSplit,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let runs = with_pool(cfg.threads, || {
        (0..cfg.runs)
            .map(|run| {
                (0..cfg.episodes_per_run)
                    .into_par_iter()
                    .map(|i| {
                        evaluate_episode(segmentor, dataset, split, cfg, cfg.episode_seed(run, i))
                    })
                    .try_reduce(RunCounts::default, |a, b| Ok(a.merge(b)))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    Ok(EvalReport::from_runs(cfg, &runs))
}

/// Checkpoint evaluation with the model segmentor.
pub fn evaluate_checkpoint(ck: &Checkpoint, cfg: &EvalConfig) -> Result<EvalReport> {
    check_compatible(ck, cfg)?;
    evaluate(
        &ModelSegmentor::from_checkpoint(ck),
        &ck.dataset,
        &ck.split,
        cfg,
    )
}

fn check_compatible(ck: &Checkpoint, cfg: &EvalConfig) -> Result<()> {
    let available = ck.split.part(cfg.part).len();
    if available < cfg.ways {
        return Err(Error::Config(format!(
            "{}-way evaluation needs {} {} classes, the checkpoint split has {available}",
            cfg.ways,
            cfg.ways,
            cfg.part.name()
        )));
    }
    Ok(())
}

/// Mean Euclidean distance between support prototypes and prototypes pooled
/// from the query images with their ground-truth masks, over `episodes`
/// episodes and every prototype (background included) valid on both sides.
/// Each probe episode carries `ways * shots` queries so that both sides pool
/// the same number of images.
pub fn proto_alignment_distance(
    encoder_cfg: &EncoderConfig,
    params: &EncoderParams<f64>,
    dataset: &ShapeDatasetConfig,
    split: &ClassSplit,
    cfg: &EvalConfig,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    let ds = encoder_cfg.downsample_factor();
    let per_episode = |i: usize| -> Result<(f64, usize)> {
        let es = derive_seed(seed, stream::PROBE_EPISODE, i as u64);
        let n_query = cfg.ways * cfg.shots;
        let episode = sample_episode(dataset, split, cfg.part, cfg.ways, cfg.shots, n_query, es)?;
        let tape = Tape::new();
        let vars = params.register_frozen(&tape);
        let embed =
            |im: &Tensor<f64>| encoder::forward(encoder_cfg, &vars, tape.constant(im.clone()));
        let pool = |pairs: Vec<(&Tensor<f64>, &LabelMask)>| -> Result<Vec<Option<Tensor<f64>>>> {
            let feats = pairs
                .iter()
                .map(|(im, _)| embed(im))
                .collect::<Result<Vec<_>>>()?;
            let masks = pairs
                .iter()
                .map(|(_, m)| m.downsample(ds))
                .collect::<Result<Vec<_>>>()?;
            Ok(compute_prototypes(&feats, &masks, cfg.ways)?.values())
        };
        let sup = pool(
            episode
                .support
                .iter()
                .map(|s| (&s.image, &s.mask))
                .collect(),
        )?;
        let qry = pool(episode.query.iter().map(|q| (&q.image, &q.mask)).collect())?;
        let mut total = 0.0;
        let mut n = 0;
        for (a, b) in sup.iter().zip(&qry) {
            if let (Some(a), Some(b)) = (a, b) {
                total += prototype_distance(a.data(), b.data());
                n += 1;
            }
        }
        Ok((total, n))
    };
    // collected in order so the float sum does not depend on scheduling
    let parts = with_pool(cfg.threads, || {
        (0..episodes)
            .into_par_iter()
            .map(per_episode)
            .collect::<Result<Vec<_>>>()
    })??;
    let total: f64 = parts.iter().map(|p| p.0).sum();
    let n: usize = parts.iter().map(|p| p.1).sum();
    if n == 0 {
        return Err(Error::InvalidArgument(
            "alignment probe found no valid prototype pair".into(),
        ));
    }
    Ok(total / n as f64)
}

/// Euclidean distance between two prototypes.
pub fn prototype_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
