use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use protoseg::encoder::EncoderConfig;
use protoseg::episodes::pgm::Pgm;
use protoseg::episodes::{make_split, ShapeDatasetConfig};
use protoseg::trainer::{Checkpoint, TrainConfig, Trainer};

fn protoseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protoseg"))
        .args(args)
        .env("PROTOSEG_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = protoseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    protoseg(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

#[test]
fn help_documents_the_defaults() {
    let help = ok(&["--help"]);
    for key in [
        "lambda_par = 1.0",
        "iterations = 5000",
        "[annotations]",
        "noise_std = 0.1",
    ] {
        assert!(help.contains(key), "missing {key}");
    }
}

#[test]
fn gen_data_writes_one_directory_per_episode_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["gen-data", "--out", s(&a), "--episodes", "1"]);
    assert_eq!(files(&a), ["config.toml", "episode_00000", "manifest.toml"]);
    // one support pair and one query pair
    assert_eq!(
        files(&a.join("episode_00000")),
        [
            "meta",
            "query_0.pgm",
            "query_0_mask.pgm",
            "support_c0_k0.pgm",
            "support_c0_k0_mask.pgm"
        ]
    );

    ok(&["gen-data", "--out", s(&a), "--episodes", "3", "--seed", "4"]);
    ok(&["gen-data", "--out", s(&b), "--episodes", "3", "--seed", "4"]);
    let manifest = fs::read_to_string(a.join("manifest.toml")).unwrap();
    assert!(manifest.contains("count = 3"));
    assert_eq!(manifest.matches("[[episodes]]").count(), 3);
    for i in 0..3 {
        let ep = format!("episode_{i:05}");
        for f in files(&a.join(&ep)) {
            assert_eq!(
                fs::read(a.join(&ep).join(&f)).unwrap(),
                fs::read(b.join(&ep).join(&f)).unwrap()
            );
        }
    }
}

#[test]
fn zero_iterations_write_the_initialisation() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    ok(&[
        "train",
        "--out",
        s(&out),
        "--iterations",
        "0",
        "--seed",
        "3",
    ]);
    let ck = Checkpoint::load(&out.join("final.panc")).unwrap();
    let cfg = TrainConfig {
        iterations: 0,
        seed: 3,
        ..Default::default()
    };
    let init = Trainer::new(
        cfg,
        EncoderConfig::default(),
        ShapeDatasetConfig::default(),
        make_split(12, 1.0 / 3.0, 3).unwrap(),
    )
    .unwrap();
    assert_eq!(ck, init.checkpoint);
    assert_eq!(
        fs::read_to_string(out.join("loss.csv")).unwrap(),
        "iter,lr,loss_seg,loss_par\n"
    );
}

#[test]
fn config_errors_exit_2_before_any_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let typo = write_config(tmp.path(), "[train]\nlamda_par = 0.0\n");
    let o = protoseg(&["train", "--config", s(&typo), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lamda_par"));
    assert_eq!(code(&["train", "--out", s(&out), "--lambda-par", "-1"]), 2);
    let bad = write_config(
        tmp.path(),
        "[encoder]\npool_strides = [2, 2, 2]\n[dataset]\nimage_size = 36\n",
    );
    assert_eq!(code(&["train", "--config", s(&bad), "--out", s(&out)]), 2);
    assert!(!out.exists());
    assert_eq!(
        code(&[
            "train",
            "--config",
            s(&tmp.path().join("missing.toml")),
            "--out",
            s(&out)
        ]),
        3
    );
}

#[test]
fn divergence_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[train]\nlr = 1e30\n");
    let out = tmp.path().join("run");
    let o = protoseg(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--iterations",
        "50",
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite"));
}

#[test]
fn progress_lines_and_lambda_zero_log() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let stdout = ok(&[
        "train",
        "--out",
        s(&out),
        "--iterations",
        "4",
        "--log-every",
        "2",
    ]);
    let lines: Vec<&str> = stdout.lines().filter(|l| l.starts_with("iter=")).collect();
    assert_eq!(lines.len(), 3, "{stdout}");
    let fields: Vec<&str> = lines[0].split(' ').collect();
    assert_eq!(fields[0], "iter=0");
    assert_eq!(fields[1], "lr=0.001");
    assert!(fields[2].starts_with("seg=") && fields[3].starts_with("par="));
    assert!(fields[3][4..].parse::<f64>().is_ok());

    let echo = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(echo.contains("iterations = 4"));

    let plain = tmp.path().join("plain");
    let stdout = ok(&[
        "train",
        "--out",
        s(&plain),
        "--iterations",
        "3",
        "--lambda-par",
        "0",
        "--log-every",
        "1",
    ]);
    assert!(stdout
        .lines()
        .filter(|l| l.starts_with("iter="))
        .all(|l| l.ends_with("par=-")));
    let log = fs::read_to_string(plain.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.lines().skip(1).all(|l| l.ends_with(',')));
}

#[test]
fn training_from_generated_files_matches_the_generator() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&[
        "gen-data",
        "--out",
        s(&data),
        "--episodes",
        "6",
        "--seed",
        "2",
    ]);
    ok(&[
        "train",
        "--out",
        s(&a),
        "--iterations",
        "6",
        "--seed",
        "2",
        "--episodes-dir",
        s(&data),
    ]);
    ok(&["train", "--out", s(&b), "--iterations", "6", "--seed", "2"]);
    for f in ["final.panc", "loss.csv"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    // the episode shape must match the training configuration
    let two_way = write_config(tmp.path(), "[train]\nways = 2\n");
    let c = tmp.path().join("c");
    assert_eq!(
        code(&[
            "train",
            "--config",
            s(&two_way),
            "--out",
            s(&c),
            "--iterations",
            "1",
            "--episodes-dir",
            s(&data)
        ]),
        2
    );
}

#[test]
fn resumed_training_matches_the_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let full = tmp.path().join("full");
    let part = tmp.path().join("part");
    ok(&["train", "--out", s(&full), "--iterations", "10"]);
    ok(&["train", "--out", s(&part), "--iterations", "4"]);
    ok(&[
        "train",
        "--out",
        s(&part),
        "--resume",
        s(&part.join("final.panc")),
        "--iterations",
        "10",
    ]);
    for f in ["final.panc", "loss.csv"] {
        assert_eq!(
            fs::read(full.join(f)).unwrap(),
            fs::read(part.join(f)).unwrap(),
            "{f}"
        );
    }
}

fn trained(tmp: &Path, iterations: &str) -> PathBuf {
    let out = tmp.join("run");
    ok(&[
        "train",
        "--out",
        s(&out),
        "--iterations",
        iterations,
        "--log-every",
        "0",
    ]);
    out.join("final.panc")
}

fn kv(path: &Path) -> Vec<(String, String)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let (k, v) = l.split_once('=').unwrap();
            (k.to_string(), v.to_string())
        })
        .collect()
}

fn get<'a>(pairs: &'a [(String, String)], key: &str) -> &'a str {
    &pairs.iter().find(|(k, _)| k == key).unwrap().1
}

#[test]
fn eval_reports_are_paired_across_annotations() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = trained(tmp.path(), "5");
    let out = tmp.path().join("eval");
    let common = [
        "eval",
        "--checkpoint",
        s(&ck),
        "--out",
        s(&out),
        "--runs",
        "2",
        "--episodes",
        "3",
    ];
    ok(&[&common[..], &["--annotation", "dense"]].concat());
    ok(&[
        &common[..],
        &[
            "--annotation",
            "scribble",
            "--probe-alignment",
            "--probe-episodes",
            "5",
        ],
    ]
    .concat());
    let dense = kv(&out.join("eval_1way_1shot_dense.kv"));
    let scribble = kv(&out.join("eval_1way_1shot_scribble.kv"));
    assert_eq!(get(&dense, "seeds"), get(&scribble, "seeds"));
    assert_eq!(get(&dense, "runs"), "2");
    assert!(
        get(&scribble, "proto_align_distance")
            .parse::<f64>()
            .unwrap()
            > 0.0
    );
    assert!(out.join("eval_1way_1shot_scribble.config.toml").exists());

    ok(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--out",
        s(&out),
        "--runs",
        "1",
        "--episodes",
        "1",
        "--shots",
        "5",
    ]);
    let five = kv(&out.join("eval_1way_5shot_dense.kv"));
    assert_eq!(get(&five, "shots"), "5");
    assert_eq!(get(&five, "episodes"), "1");
    assert_eq!(get(&five, "runs"), "1");
}

#[test]
fn eval_rejects_other_checkpoint_versions() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = trained(tmp.path(), "0");
    let mut bytes = fs::read(&ck).unwrap();
    bytes[4] = 2;
    let old = tmp.path().join("old.panc");
    fs::write(&old, bytes).unwrap();
    let o = protoseg(&[
        "eval",
        "--checkpoint",
        s(&old),
        "--out",
        s(&tmp.path().join("e")),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unsupported checkpoint version 2"));
}

#[test]
fn demo_writes_image_sized_masks() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = trained(tmp.path(), "3");
    let data = tmp.path().join("data");
    let cfg = write_config(tmp.path(), "[train]\nways = 2\nn_query = 2\n");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    let out = tmp.path().join("demo");
    ok(&[
        "demo",
        "--checkpoint",
        s(&ck),
        "--episode",
        s(&data.join("episode_00000")),
        "--out",
        s(&out),
    ]);
    for i in 0..2 {
        let pred = Pgm::read(&out.join(format!("query_{i}_pred.pgm"))).unwrap();
        assert_eq!((pred.width, pred.height), (32, 32));
        assert!(pred.pixels.iter().all(|&l| l <= 2));
        let side = Pgm::read(&out.join(format!("query_{i}_side.pgm"))).unwrap();
        assert_eq!((side.width, side.height), (96, 32));
    }
    let missing = tmp.path().join("nothing");
    assert_eq!(
        code(&[
            "demo",
            "--checkpoint",
            s(&ck),
            "--episode",
            s(&missing),
            "--out",
            s(&out)
        ]),
        3
    );
}

/// Golden run: 1000 iterations on noiseless seen-class episodes, then the
/// first generated episode. Measured agreement was 0.9707; the stride-4
/// feature grid limits it at shape boundaries.
#[test]
fn noiseless_demo_matches_ground_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[dataset]\nnoise_std = 0.0\n[train]\niterations = 1000\ncheckpoint_every = 0\n",
    );
    let run = tmp.path().join("run");
    let data = tmp.path().join("data");
    let out = tmp.path().join("demo");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&run),
        "--log-every",
        "0",
    ]);
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    let episode = data.join("episode_00000");
    ok(&[
        "demo",
        "--checkpoint",
        s(&run.join("final.panc")),
        "--episode",
        s(&episode),
        "--out",
        s(&out),
    ]);
    let pred = Pgm::read(&out.join("query_0_pred.pgm")).unwrap();
    let gt = Pgm::read(&episode.join("query_0_mask.pgm")).unwrap();
    let agree = pred
        .pixels
        .iter()
        .zip(&gt.pixels)
        .filter(|(a, b)| a == b)
        .count();
    let frac = agree as f64 / gt.pixels.len() as f64;
    assert!(frac >= 0.95, "pixel agreement {frac}");
}

#[test]
fn ablation_writes_one_row_per_arm() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ablate");
    let stdout = ok(&[
        "ablate-par",
        "--out",
        s(&out),
        "--seeds",
        "0,1",
        "--iterations",
        "3",
        "--runs",
        "1",
        "--episodes",
        "2",
        "--probe-episodes",
        "2",
    ]);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.contains("\n1,no_par,0,"));
    assert!(stdout.contains("of 2 pairs"));
    assert!(out.join("seed_1/par/final.panc").exists());
    assert_eq!(
        code(&["ablate-par", "--out", s(&out), "--lambda-par", "0"]),
        2
    );
}
