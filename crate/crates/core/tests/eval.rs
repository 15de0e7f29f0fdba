use protoseg::annotations::AnnotationKind;
use protoseg::encoder::{EncoderConfig, EncoderParams};
use protoseg::episodes::{make_split, sample_episode, ClassSplit, ShapeDatasetConfig};
use protoseg::eval::{
    binary_iou, evaluate, iou, proto_alignment_distance, prototype_distance, AllBackground,
    EvalConfig, ModelSegmentor, RunCounts, Segmentor, SupportSet,
};
use protoseg::metric::MetricConfig;
use protoseg::{LabelMask, Tensor};

fn halves() -> (LabelMask, LabelMask) {
    // left half vs top half of a 4x4 image
    let pred = LabelMask::from_fn(4, 4, |_, x| u8::from(x < 2));
    let gt = LabelMask::from_fn(4, 4, |y, _| u8::from(y < 2));
    (pred, gt)
}

#[test]
fn iou_of_crossing_halves_is_one_third() {
    let (pred, gt) = halves();
    assert!((iou(&pred, &gt, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert!((iou(&pred, &gt, 0).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(iou(&gt, &gt, 1).unwrap(), 1.0);
    assert_eq!(iou(&gt, &gt, 7).unwrap(), 1.0);
    assert!(iou(&pred, &LabelMask::filled(3, 4, 0), 1).is_err());
}

#[test]
fn binary_iou_of_all_background_prediction() {
    // gt: half foreground; pred: all background -> (0 + 1/2) / 2
    let gt = LabelMask::from_fn(4, 4, |y, _| if y < 2 { 2 } else { 0 });
    let pred = LabelMask::filled(4, 4, 0);
    assert_eq!(binary_iou(&pred, &gt).unwrap(), 0.25);
}

#[test]
fn run_counts_pool_pixels_before_dividing() {
    let mut counts = RunCounts::default();
    let a = LabelMask::from_fn(2, 2, |y, x| u8::from(y == 0 && x == 0));
    let full = LabelMask::filled(2, 2, 1);
    counts.add_query(&[3], &a, &full).unwrap();
    counts.add_query(&[3], &full, &full).unwrap();
    // class 3: intersection 1 + 4, union 4 + 4
    assert_eq!(counts.class_iou()[&3], 5.0 / 8.0);
    assert_eq!(counts.mean_iou(), 5.0 / 8.0);
}

/// Cheats by regenerating the episode from its seed.
struct Oracle {
    dataset: ShapeDatasetConfig,
    split: ClassSplit,
    cfg: EvalConfig,
}

impl Segmentor for Oracle {
    fn segment(
        &self,
        _: &SupportSet,
        _: &[Tensor<f64>],
        seed: u64,
    ) -> protoseg::Result<Vec<LabelMask>> {
        let c = &self.cfg;
        let ep = sample_episode(
            &self.dataset,
            &self.split,
            c.part,
            c.ways,
            c.shots,
            c.n_query,
            seed,
        )?;
        Ok(ep.query.into_iter().map(|q| q.mask).collect())
    }
}

fn small(ways: usize) -> EvalConfig {
    EvalConfig {
        ways,
        episodes_per_run: 12,
        runs: 2,
        threads: Some(2),
        ..Default::default()
    }
}

fn setup() -> (ShapeDatasetConfig, ClassSplit) {
    (
        ShapeDatasetConfig::default(),
        make_split(12, 1.0 / 3.0, 0).unwrap(),
    )
}

#[test]
fn oracle_scores_one_and_background_scores_zero() {
    let (dataset, split) = setup();
    for ways in [1, 2] {
        let cfg = small(ways);
        let oracle = Oracle {
            dataset: dataset.clone(),
            split: split.clone(),
            cfg: cfg.clone(),
        };
        let r = evaluate(&oracle, &dataset, &split, &cfg).unwrap();
        assert_eq!(r.mean_iou, 1.0);
        assert_eq!(r.binary_iou, 1.0);
        assert!(r.per_class.keys().all(|c| split.unseen().contains(c)));

        let bg = evaluate(&AllBackground, &dataset, &split, &cfg).unwrap();
        assert_eq!(bg.mean_iou, 0.0);
        assert!(bg.binary_iou > 0.0 && bg.binary_iou < 0.5);
    }
}

#[test]
fn reports_do_not_depend_on_the_worker_count() {
    let (dataset, split) = setup();
    let ck_params = EncoderParams::init(&EncoderConfig::default(), 3).unwrap();
    let model = ModelSegmentor {
        encoder: EncoderConfig::default(),
        params: ck_params,
        metric: MetricConfig::default(),
    };
    let one = EvalConfig {
        threads: Some(1),
        annotation: AnnotationKind::Scribble,
        ..small(2)
    };
    let a = evaluate(&model, &dataset, &split, &one).unwrap();
    let b = evaluate(
        &model,
        &dataset,
        &split,
        &EvalConfig {
            threads: Some(3),
            ..one.clone()
        },
    )
    .unwrap();
    let c = evaluate(&model, &dataset, &split, &one).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_eq!(a.seeds.len(), 2);
    assert_ne!(a.seeds[0], a.seeds[1]);
    assert!(a.to_key_values().contains("annotation=scribble"));
}

#[test]
fn different_base_seeds_draw_different_episodes() {
    let cfg = small(1);
    let other = EvalConfig {
        base_seed: cfg.base_seed + 1,
        ..cfg.clone()
    };
    assert_ne!(cfg.episode_seed(0, 0), other.episode_seed(0, 0));
    assert_ne!(cfg.episode_seed(0, 0), cfg.episode_seed(0, 1));
    assert_ne!(cfg.episode_seed(0, 0), cfg.episode_seed(1, 0));
}

#[test]
fn invalid_eval_configs_are_rejected() {
    for cfg in [
        EvalConfig {
            shots: 0,
            ..Default::default()
        },
        EvalConfig {
            runs: 0,
            ..Default::default()
        },
        EvalConfig {
            episodes_per_run: 0,
            ..Default::default()
        },
        EvalConfig {
            threads: Some(0),
            ..Default::default()
        },
    ] {
        assert!(cfg.validate().is_err());
    }
    let (dataset, split) = setup();
    let too_wide = EvalConfig {
        ways: 5,
        ..small(1)
    };
    assert!(evaluate(&AllBackground, &dataset, &split, &too_wide).is_err());
}

#[test]
fn prototype_distance_examples() {
    assert_eq!(prototype_distance(&[0.0, 0.0], &[3.0, 4.0]), 5.0);
    assert_eq!(prototype_distance(&[1.5, -2.0], &[1.5, -2.0]), 0.0);
}

#[test]
fn alignment_probe_is_deterministic_and_positive() {
    let (dataset, split) = setup();
    let enc = EncoderConfig::default();
    let params = EncoderParams::init(&enc, 1).unwrap();
    let cfg = EvalConfig {
        threads: Some(2),
        ..small(1)
    };
    let a = proto_alignment_distance(&enc, &params, &dataset, &split, &cfg, 10, 9).unwrap();
    let b = proto_alignment_distance(
        &enc,
        &params,
        &dataset,
        &split,
        &EvalConfig {
            threads: Some(1),
            ..cfg.clone()
        },
        10,
        9,
    )
    .unwrap();
    assert_eq!(a, b);
    assert!(a > 0.0 && a.is_finite());
    let c = proto_alignment_distance(&enc, &params, &dataset, &split, &cfg, 10, 10).unwrap();
    assert_ne!(a, c);
}

#[test]
fn alignment_probe_of_a_zero_encoder_is_zero() {
    let (dataset, split) = setup();
    let enc = EncoderConfig::default();
    let mut params = EncoderParams::init(&enc, 1).unwrap();
    for t in params.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    let d = proto_alignment_distance(&enc, &params, &dataset, &split, &small(2), 5, 0).unwrap();
    assert_eq!(d, 0.0);
}
