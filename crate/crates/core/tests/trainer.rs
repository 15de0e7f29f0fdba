mod common;

use protoseg::encoder::EncoderConfig;
use protoseg::episodes::io::write_episode;
use protoseg::episodes::{make_split, sample_episode, Episode, ShapeDatasetConfig, SplitPart};
use protoseg::metric::{compute_prototypes, probability_map, seg_loss};
use protoseg::trainer::{
    sgd_step, smooth, train, train_to_dir, Checkpoint, DiskEpisodes, EpisodeSource, RunFiles,
    SgdStep, TrainConfig, TrainState, Trainer, LOSS_LOG_HEADER,
};
use protoseg::{Error, Tape, Tensor};

fn trainer(cfg: TrainConfig) -> Trainer {
    let split = make_split(12, 1.0 / 3.0, cfg.seed).unwrap();
    Trainer::new(
        cfg,
        EncoderConfig::default(),
        ShapeDatasetConfig::default(),
        split,
    )
    .unwrap()
}

fn short(iterations: usize, lambda_par: f64) -> TrainConfig {
    TrainConfig {
        iterations,
        lambda_par,
        seed: 5,
        checkpoint_every: 0,
        ..Default::default()
    }
}

struct Fixed(Episode);

impl EpisodeSource for Fixed {
    fn episode(&mut self, _index: u64) -> protoseg::Result<Episode> {
        Ok(self.0.clone())
    }
}

#[test]
fn lr_schedule_steps_down_at_boundaries() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr_at(0), 1e-3);
    assert_eq!(cfg.lr_at(1999), 1e-3);
    assert_eq!(cfg.lr_at(2000), 1e-3 * 0.1);
    assert_eq!(cfg.lr_at(3999), 1e-3 * 0.1);
    assert!((cfg.lr_at(4000) - 1e-5).abs() < 1e-18);
    let flat = TrainConfig {
        lr_decay_every: 0,
        ..cfg
    };
    assert_eq!(flat.lr_at(10_000), 1e-3);
}

fn one(v: f64) -> Vec<Tensor<f64>> {
    vec![Tensor::scalar(v)]
}

#[test]
fn sgd_reductions() {
    let mut w = one(2.0);
    let mut v = one(0.0);
    let plain = SgdStep {
        lr: 0.1,
        momentum: 0.0,
        weight_decay: 0.0,
    };
    sgd_step(&mut w, &one(3.0), &mut v, &plain).unwrap();
    assert_eq!(w[0].data()[0], 2.0 - 0.1 * 3.0);

    let mut w = one(2.0);
    let mut v = one(0.0);
    let decay = SgdStep {
        lr: 0.1,
        momentum: 0.9,
        weight_decay: 0.5,
    };
    sgd_step(&mut w, &one(0.0), &mut v, &decay).unwrap();
    assert_eq!(w[0].data()[0], 2.0 - 0.1 * (0.5 * 2.0));

    let mut w = one(2.0);
    let mut v = one(0.0);
    let no_decay = SgdStep {
        weight_decay: 0.0,
        ..decay
    };
    sgd_step(&mut w, &one(0.0), &mut v, &no_decay).unwrap();
    assert_eq!(w[0].data()[0], 2.0);

    let mut bad = vec![Tensor::zeros([2])];
    assert!(sgd_step(&mut bad, &one(1.0), &mut one(0.0), &plain).is_err());
}

#[test]
fn sgd_two_steps_on_quadratic_match_hand_recursion() {
    // f(w) = 1.5 w^2, gradient 3 w
    let (lr, m, wd) = (0.05, 0.9, 0.01);
    let step = SgdStep {
        lr,
        momentum: m,
        weight_decay: wd,
    };
    let mut w = one(1.0);
    let mut v = one(0.0);
    let (mut hw, mut hv) = (1.0f64, 0.0f64);
    for _ in 0..2 {
        let g = one(3.0 * w[0].data()[0]);
        sgd_step(&mut w, &g, &mut v, &step).unwrap();
        hv = m * hv + (3.0 * hw + wd * hw);
        hw -= lr * hv;
    }
    // v1 = 3.01, w1 = 0.8495; v2 = 0.9 * 3.01 + 3.01 * 0.8495, w2 = w1 - 0.05 v2
    let v2 = 0.9 * 3.01 + 3.01 * 0.8495;
    assert!((hv - v2).abs() < 1e-15);
    assert!((hw - (0.8495 - 0.05 * v2)).abs() < 1e-15);
    assert_eq!(w[0].data()[0], hw);
    assert_eq!(v[0].data()[0], hv);
}

#[test]
fn zero_iterations_leave_the_initialisation() {
    let mut t = trainer(short(0, 1.0));
    let mut src = t.generated_source();
    assert!(train(&mut t, &mut src).unwrap().is_empty());
    let init = TrainState::init(&EncoderConfig::default(), 5).unwrap();
    assert_eq!(t.checkpoint.state, init);
}

#[test]
fn same_seed_same_losses_and_checkpoint() {
    let run = || {
        let mut t = trainer(short(25, 1.0));
        let mut src = t.generated_source();
        let logs = train(&mut t, &mut src).unwrap();
        (logs, t.checkpoint.to_bytes())
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    assert!(a.iter().all(|l| l.loss_par.is_some()));
}

/// Reference loop that only ever builds the forward segmentation loss.
fn seg_only_run(iterations: usize) -> TrainState {
    let t = trainer(short(iterations, 0.0));
    let ck = &t.checkpoint;
    let mut state = ck.state.clone();
    let mut src = t.generated_source();
    let ds = ck.encoder.downsample_factor();
    for i in 0..iterations as u64 {
        let ep = protoseg::trainer::augment(
            &src.episode(i).unwrap(),
            protoseg::seed::derive_seed(ck.train.seed, protoseg::seed::stream::AUGMENT, i),
        );
        let tape = Tape::new();
        let vars = state.params.register(&tape);
        let embed = |im: &Tensor<f64>| {
            protoseg::encoder::forward(&ck.encoder, &vars, tape.constant(im.clone())).unwrap()
        };
        let feats: Vec<_> = ep.support.iter().map(|s| embed(&s.image)).collect();
        let masks: Vec<_> = ep
            .support
            .iter()
            .map(|s| s.mask.downsample(ds).unwrap())
            .collect();
        let protos = compute_prototypes(&feats, &masks, ep.ways()).unwrap();
        let q = &ep.query[0];
        let probs = probability_map(&embed(&q.image), &protos, &ck.train.metric()).unwrap();
        let loss = seg_loss(&probs, &q.mask.downsample(ds).unwrap()).unwrap();
        let g = tape.backward(loss).unwrap();
        let grads: Vec<_> = vars.iter().map(|v| g.wrt(v)).collect();
        let step = SgdStep {
            lr: ck.train.lr_at(i as usize),
            momentum: ck.train.momentum,
            weight_decay: ck.train.weight_decay,
        };
        sgd_step(
            state.params.tensors_mut(),
            &grads,
            &mut state.velocity,
            &step,
        )
        .unwrap();
        state.iteration += 1;
    }
    state
}

#[test]
fn zero_lambda_matches_a_run_without_the_reverse_loss() {
    let mut t = trainer(short(15, 0.0));
    let mut src = t.generated_source();
    let logs = train(&mut t, &mut src).unwrap();
    assert!(logs.iter().all(|l| l.loss_par.is_none()));
    assert_eq!(t.checkpoint.state, seg_only_run(15));
}

#[test]
fn memorises_a_fixed_episode() {
    let split = make_split(12, 1.0 / 3.0, 0).unwrap();
    let dataset = ShapeDatasetConfig::default();
    let episode = sample_episode(&dataset, &split, SplitPart::Seen, 1, 1, 1, 42).unwrap();
    let cfg = TrainConfig {
        iterations: 300,
        hflip_augment: false,
        ..short(300, 1.0)
    };
    let mut t = Trainer::new(cfg, EncoderConfig::default(), dataset, split).unwrap();
    let logs = train(&mut t, &mut Fixed(episode)).unwrap();
    let last = logs.last().unwrap().loss_seg;
    assert!(last < 0.05, "loss after 300 iterations: {last}");
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let mut full = trainer(short(30, 1.0));
    let mut src = full.generated_source();
    let full_logs = train(&mut full, &mut src).unwrap();

    let mut first = trainer(short(30, 1.0));
    let mut src = first.generated_source();
    let mut logs = Vec::new();
    for _ in 0..12 {
        logs.push(first.step(&mut src).unwrap());
    }
    let bytes = first.checkpoint.to_bytes();
    let mut resumed = Trainer::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap());
    let mut src = resumed.generated_source();
    logs.extend(train(&mut resumed, &mut src).unwrap());
    assert_eq!(logs, full_logs);
    assert_eq!(resumed.checkpoint.to_bytes(), full.checkpoint.to_bytes());
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let mut t = trainer(short(3, 1.0));
    let mut src = t.generated_source();
    train(&mut t, &mut src).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.panc");
    let b = dir.path().join("b.panc");
    t.checkpoint.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    assert_eq!(loaded, t.checkpoint);
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn malformed_checkpoints_are_rejected() {
    let t = trainer(short(0, 1.0));
    let bytes = t.checkpoint.to_bytes();
    let mut wrong_version = bytes.clone();
    wrong_version[4] = 9;
    let err = Checkpoint::from_bytes(&wrong_version).unwrap_err();
    assert!(err.contains("version 9"), "{err}");
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
    assert!(Checkpoint::from_bytes(b"NOPE").is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v9.panc");
    std::fs::write(&path, &wrong_version).unwrap();
    let err = Checkpoint::load(&path).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    assert!(err.to_string().contains("v9.panc"));
    assert!(matches!(
        Checkpoint::load(&dir.path().join("missing")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn run_directory_has_log_rows_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let files = RunFiles::new(dir.path());
    let cfg = TrainConfig {
        checkpoint_every: 4,
        ..short(10, 1.0)
    };
    let mut t = trainer(cfg);
    let mut src = t.generated_source();
    let mut seen = 0;
    train_to_dir(&mut t, &mut src, &files, |_| seen += 1).unwrap();
    assert_eq!(seen, 10);
    let log = std::fs::read_to_string(files.loss_log()).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], LOSS_LOG_HEADER);
    assert_eq!(lines.len(), 11);
    assert!(lines[1].starts_with("0,0.001,"));
    assert!(files.periodic_checkpoint(4).exists());
    assert!(files.periodic_checkpoint(8).exists());
    let last = Checkpoint::load(&files.final_checkpoint()).unwrap();
    assert_eq!(last, t.checkpoint);

    // resuming appends the remaining rows only
    let mut resumed =
        Trainer::from_checkpoint(Checkpoint::load(&files.periodic_checkpoint(8)).unwrap());
    let dir2 = tempfile::tempdir().unwrap();
    let files2 = RunFiles::new(dir2.path());
    std::fs::copy(files.loss_log(), files2.loss_log()).unwrap();
    let mut src = resumed.generated_source();
    train_to_dir(&mut resumed, &mut src, &files2, |_| {}).unwrap();
    let log2 = std::fs::read_to_string(files2.loss_log()).unwrap();
    assert_eq!(log2.lines().count(), 13);
    assert_eq!(
        std::fs::read(files2.final_checkpoint()).unwrap(),
        std::fs::read(files.final_checkpoint()).unwrap()
    );
}

#[test]
fn training_from_disk_equals_training_from_the_generator() {
    let cfg = short(6, 1.0);
    let mut gen_trainer = trainer(cfg.clone());
    let mut gen = gen_trainer.generated_source();
    let dir = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for i in 0..6u64 {
        let d = dir.path().join(format!("episode_{i:05}"));
        write_episode(&d, &gen.episode(i).unwrap(), gen.seed_of(i)).unwrap();
        dirs.push(d);
    }
    let a = train(&mut gen_trainer, &mut gen).unwrap();
    let mut disk_trainer = trainer(cfg);
    let b = train(&mut disk_trainer, &mut DiskEpisodes::new(dirs).unwrap()).unwrap();
    assert_eq!(a, b);
    assert_eq!(gen_trainer.checkpoint, disk_trainer.checkpoint);
}

#[test]
fn nan_input_is_a_numeric_error() {
    let split = make_split(12, 1.0 / 3.0, 0).unwrap();
    let dataset = ShapeDatasetConfig::default();
    let mut episode = sample_episode(&dataset, &split, SplitPart::Seen, 1, 1, 1, 3).unwrap();
    episode.query[0].image.data_mut()[100] = f64::NAN;
    let mut t = Trainer::new(short(1, 1.0), EncoderConfig::default(), dataset, split).unwrap();
    assert!(matches!(
        t.step(&mut Fixed(episode)),
        Err(Error::NonFinite(_))
    ));
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        TrainConfig {
            lr: 0.0,
            ..Default::default()
        },
        TrainConfig {
            momentum: 1.0,
            ..Default::default()
        },
        TrainConfig {
            weight_decay: -1.0,
            ..Default::default()
        },
        TrainConfig {
            lambda_par: -0.5,
            ..Default::default()
        },
        TrainConfig {
            alpha: 0.0,
            ..Default::default()
        },
        TrainConfig {
            ways: 0,
            ..Default::default()
        },
    ] {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn smoothing_window() {
    let s = smooth(&[1.0, 2.0, 3.0, 4.0], 2);
    assert_eq!(s, vec![1.0, 1.5, 2.5, 3.5]);
}

#[test]
fn full_pipeline_gradients_match_finite_differences() {
    for seed in 0..4 {
        for ways in [1, 2] {
            for lambda in [0.0, 1.0] {
                let e = common::pipeline_gradient_error(ways, lambda, seed);
                assert!(e < 1e-4, "seed {seed} ways {ways} lambda {lambda}: {e}");
            }
        }
    }
}

#[test]
fn alignment_loss_speeds_up_early_convergence() {
    let run = |lambda_par| {
        let cfg = TrainConfig {
            iterations: 2000,
            lambda_par,
            seed: 0,
            checkpoint_every: 0,
            ..Default::default()
        };
        let mut t = trainer(cfg);
        let mut src = t.generated_source();
        let seg: Vec<f64> = train(&mut t, &mut src)
            .unwrap()
            .iter()
            .map(|l| l.loss_seg)
            .collect();
        *smooth(&seg, 200).last().unwrap()
    };
    let (with, without) = (run(1.0), run(0.0));
    assert!(
        with <= without,
        "smoothed loss at 2000: {with} vs {without}"
    );
}
