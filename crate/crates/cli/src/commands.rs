use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use protoseg::episodes::io::read_episode;
use protoseg::episodes::io::write_episode;
use protoseg::episodes::pgm::Pgm;
use protoseg::episodes::SplitPart;
use protoseg::eval::{
    evaluate, proto_alignment_distance, EvalConfig, ModelSegmentor, Segmentor, SupportSet,
};
use protoseg::trainer::{
    smooth, train_to_dir, Checkpoint, DiskEpisodes, EpisodeSource, GeneratedEpisodes, RunFiles,
    StepLog, Trainer,
};
use protoseg::{Error, LabelMask, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{AblateArgs, DemoArgs, EvalArgs, GenDataArgs, TrainArgs};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub part: String,
    pub ways: usize,
    pub shots: usize,
    pub n_query: usize,
    pub master_seed: u64,
    pub count: usize,
    pub episodes: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub dir: String,
    /// Decimal string; TOML integers stop at `i64::MAX`.
    pub seed: String,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = args.cfg.load()?;
    cfg.validate()?;
    let part: SplitPart = args.part.parse()?;
    let train = cfg.train()?;
    let mut source = GeneratedEpisodes {
        part,
        ..GeneratedEpisodes::for_training(&cfg.dataset()?, &cfg.split()?, &train)
    };
    create_dir(&args.out)?;
    let mut entries = Vec::with_capacity(args.episodes);
    for i in 0..args.episodes as u64 {
        let name = format!("episode_{i:05}");
        let seed = source.seed_of(i);
        write_episode(&args.out.join(&name), &source.episode(i)?, seed)?;
        entries.push(ManifestEntry {
            dir: name,
            seed: seed.to_string(),
        });
    }
    let manifest = Manifest {
        part: part.name().to_string(),
        ways: train.ways,
        shots: train.shots,
        n_query: train.n_query,
        master_seed: cfg.seed,
        count: entries.len(),
        episodes: entries,
    };
    let text = toml::to_string(&manifest).expect("manifest serialises");
    write_text(&args.out.join(MANIFEST_FILE), &text)?;
    write_text(&args.out.join(CONFIG_ECHO), &cfg.to_toml())?;
    println!(
        "wrote {} episodes to {}",
        manifest.count,
        args.out.display()
    );
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string().trim_end()))
}

fn progress_line(step: &StepLog) -> String {
    let par = step
        .loss_par
        .map_or_else(|| "-".to_string(), |p| format!("{p:.6}"));
    format!(
        "iter={} lr={} seg={:.6} par={par}",
        step.iteration, step.lr, step.loss_seg
    )
}

fn disk_source(dir: &Path, trainer: &Trainer) -> Result<DiskEpisodes> {
    let m = read_manifest(dir)?;
    let t = &trainer.checkpoint.train;
    if (m.ways, m.shots, m.n_query) != (t.ways, t.shots, t.n_query) {
        return Err(Error::Config(format!(
            "episodes in {} are {}-way {}-shot with {} queries, training expects {}-way {}-shot with {}",
            dir.display(),
            m.ways,
            m.shots,
            m.n_query,
            t.ways,
            t.shots,
            t.n_query
        )));
    }
    DiskEpisodes::new(m.episodes.iter().map(|e| dir.join(&e.dir)).collect())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut trainer = match &args.resume {
        Some(path) => {
            let mut ck = Checkpoint::load(path)?;
            if let Some(n) = args.iterations {
                ck.train.iterations = n;
            }
            Trainer::from_checkpoint(ck)
        }
        None => {
            let mut cfg = args.cfg.load()?;
            if let Some(l) = args.lambda_par {
                cfg.train.lambda_par = l;
            }
            if let Some(n) = args.iterations {
                cfg.train.iterations = n;
            }
            cfg.validate()?;
            let trainer = Trainer::new(cfg.train()?, cfg.encoder()?, cfg.dataset()?, cfg.split()?)?;
            create_dir(&args.out)?;
            write_text(&args.out.join(CONFIG_ECHO), &cfg.to_toml())?;
            trainer
        }
    };
    let mut source: Box<dyn EpisodeSource> = match &args.episodes_dir {
        Some(dir) => Box::new(disk_source(dir, &trainer)?),
        None => Box::new(trainer.generated_source()),
    };
    let total = trainer.checkpoint.train.iterations as u64;
    let every = args.log_every as u64;
    let files = RunFiles::new(&args.out);
    train_to_dir(&mut trainer, source.as_mut(), &files, |step| {
        if every > 0 && (step.iteration % every == 0 || step.iteration + 1 == total) {
            println!("{}", progress_line(step));
        }
    })?;
    println!("final checkpoint {}", files.final_checkpoint().display());
    Ok(())
}

fn eval_config(args: &EvalArgs) -> Result<(RunConfig, EvalConfig)> {
    let mut cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let e = &mut cfg.eval;
    if let Some(v) = args.ways {
        e.ways = v;
    }
    if let Some(v) = args.shots {
        e.shots = v;
    }
    if let Some(v) = args.runs {
        e.runs = v;
    }
    if let Some(v) = args.episodes {
        e.episodes = v;
    }
    if let Some(v) = args.base_seed {
        e.base_seed = v;
    }
    if let Some(v) = args.probe_episodes {
        e.probe_episodes = v;
    }
    if args.threads.is_some() {
        e.threads = args.threads;
    }
    if let Some(k) = &args.annotation {
        cfg.annotations.kind = k.clone();
    }
    let eval = cfg.eval()?;
    if cfg.eval.probe_episodes == 0 {
        return Err(Error::Config("probe_episodes must be positive".into()));
    }
    Ok((cfg, eval))
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let (cfg, eval_cfg) = eval_config(&args)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = if args.untrained {
        ModelSegmentor::untrained(&ck)?
    } else {
        ModelSegmentor::from_checkpoint(&ck)
    };
    let mut report = evaluate(&model, &ck.dataset, &ck.split, &eval_cfg)?;
    if args.probe_alignment {
        report.proto_align_distance = Some(proto_alignment_distance(
            &model.encoder,
            &model.params,
            &ck.dataset,
            &ck.split,
            &eval_cfg,
            cfg.eval.probe_episodes,
            eval_cfg.base_seed,
        )?);
    }
    let stem = format!(
        "eval_{}way_{}shot_{}{}",
        eval_cfg.ways,
        eval_cfg.shots,
        eval_cfg.annotation.name(),
        if args.untrained { "_untrained" } else { "" }
    );
    create_dir(&args.out)?;
    write_text(&args.out.join(format!("{stem}.txt")), &report.to_text())?;
    write_text(
        &args.out.join(format!("{stem}.kv")),
        &report.to_key_values(),
    )?;
    write_text(
        &args.out.join(format!("{stem}.config.toml")),
        &cfg.to_toml(),
    )?;
    print!("{}", report.to_text());
    Ok(())
}

/// Scales label ids so that `ways` maps to white.
fn visible(mask: &LabelMask, ways: usize) -> Vec<u8> {
    let step = 255 / ways.max(1);
    mask.labels()
        .iter()
        .map(|&l| (l as usize * step).min(255) as u8)
        .collect()
}

/// Image, ground truth and prediction next to each other.
fn side_by_side(image: &Tensor<f64>, gt: &LabelMask, pred: &LabelMask, ways: usize) -> Result<Pgm> {
    let img = Pgm::from_image(image)?;
    let (h, w) = gt.dims();
    let panels = [img.pixels, visible(gt, ways), visible(pred, ways)];
    let mut pixels = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for p in &panels {
            pixels.extend_from_slice(&p[y * w..(y + 1) * w]);
        }
    }
    Ok(Pgm {
        width: 3 * w,
        height: h,
        pixels,
    })
}

pub fn demo(args: DemoArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (episode, seed) = read_episode(&args.episode)?;
    let kind = args.annotation.parse()?;
    let support = SupportSet::from_episode(&episode, kind, &Default::default(), seed)?;
    let queries: Vec<Tensor<f64>> = episode.query.iter().map(|q| q.image.clone()).collect();
    let preds = ModelSegmentor::from_checkpoint(&ck).segment(&support, &queries, seed)?;
    create_dir(&args.out)?;
    for (i, (pred, q)) in preds.iter().zip(&episode.query).enumerate() {
        Pgm::from_mask(pred).write(&args.out.join(format!("query_{i}_pred.pgm")))?;
        side_by_side(&q.image, &q.mask, pred, episode.ways())?
            .write(&args.out.join(format!("query_{i}_side.pgm")))?;
        let agree = pred
            .labels()
            .iter()
            .zip(q.mask.labels())
            .filter(|(a, b)| a == b)
            .count();
        println!(
            "query {i}: pixel accuracy {:.4}",
            agree as f64 / pred.len() as f64
        );
    }
    Ok(())
}

struct Arm {
    mean_iou: f64,
    probe: f64,
    final_seg: f64,
}

fn run_arm(cfg: &RunConfig, lambda: f64, dir: &Path) -> Result<Arm> {
    let mut cfg = cfg.clone();
    cfg.train.lambda_par = lambda;
    let mut trainer = Trainer::new(cfg.train()?, cfg.encoder()?, cfg.dataset()?, cfg.split()?)?;
    create_dir(dir)?;
    write_text(&dir.join(CONFIG_ECHO), &cfg.to_toml())?;
    let mut source = trainer.generated_source();
    let mut seg = Vec::new();
    train_to_dir(&mut trainer, &mut source, &RunFiles::new(dir), |s| {
        seg.push(s.loss_seg)
    })?;
    let eval_cfg = cfg.eval()?;
    let ck = &trainer.checkpoint;
    let model = ModelSegmentor::from_checkpoint(ck);
    let report = evaluate(&model, &ck.dataset, &ck.split, &eval_cfg)?;
    let probe = proto_alignment_distance(
        &model.encoder,
        &model.params,
        &ck.dataset,
        &ck.split,
        &eval_cfg,
        cfg.eval.probe_episodes,
        eval_cfg.base_seed,
    )?;
    Ok(Arm {
        mean_iou: report.mean_iou,
        probe,
        final_seg: smooth(&seg, 200).last().copied().unwrap_or(f64::NAN),
    })
}

pub fn ablate_par(args: AblateArgs) -> Result<()> {
    let mut cfg = args.cfg.load()?;
    if let Some(n) = args.iterations {
        cfg.train.iterations = n;
    }
    if let Some(v) = args.runs {
        cfg.eval.runs = v;
    }
    if let Some(v) = args.episodes {
        cfg.eval.episodes = v;
    }
    if let Some(v) = args.probe_episodes {
        cfg.eval.probe_episodes = v;
    }
    let lambda = args.lambda_par.unwrap_or(cfg.train.lambda_par);
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(Error::Config(format!(
            "the alignment arm needs lambda_par > 0, got {lambda}"
        )));
    }
    if args.seeds.is_empty() {
        return Err(Error::Config("no seeds given".into()));
    }
    cfg.validate()?;
    create_dir(&args.out)?;

    let mut csv =
        String::from("seed,arm,lambda_par,mean_iou,proto_align_distance,final_smoothed_seg\n");
    let mut rows: Vec<(u64, Arm, Arm)> = Vec::new();
    println!(
        "{:>6} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "seed", "mIoU", "mIoU-", "probe", "probe-", "seg", "seg-"
    );
    for &seed in &args.seeds {
        let mut c = cfg.clone();
        c.seed = seed;
        let base: PathBuf = args.out.join(format!("seed_{seed}"));
        let with = run_arm(&c, lambda, &base.join("par"))?;
        let without = run_arm(&c, 0.0, &base.join("no_par"))?;
        for (name, l, a) in [("par", lambda, &with), ("no_par", 0.0, &without)] {
            let _ = writeln!(
                csv,
                "{seed},{name},{l},{},{},{}",
                a.mean_iou, a.probe, a.final_seg
            );
        }
        println!(
            "{seed:>6} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            with.mean_iou,
            without.mean_iou,
            with.probe,
            without.probe,
            with.final_seg,
            without.final_seg
        );
        rows.push((seed, with, without));
    }
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&(u64, Arm, Arm)) -> f64| rows.iter().map(f).sum::<f64>() / n;
    println!(
        "{:>6} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
        "mean",
        mean(&|r| r.1.mean_iou),
        mean(&|r| r.2.mean_iou),
        mean(&|r| r.1.probe),
        mean(&|r| r.2.probe)
    );
    let lower_seg = rows
        .iter()
        .filter(|r| r.1.final_seg <= r.2.final_seg)
        .count();
    println!(
        "final smoothed seg loss lower with alignment in {lower_seg} of {} pairs",
        rows.len()
    );
    write_text(&args.out.join("ablation.csv"), &csv)?;
    write_text(&args.out.join(CONFIG_ECHO), &cfg.to_toml())
}
