use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use harmonizer_core::{Frame, Mask};

const TINY: [&str; 10] = [
    "--set",
    "generator.base_channels=4",
    "--set",
    "generator.max_channels=8",
    "--set",
    "generator.depth=2",
    "--set",
    "discriminator.base_channels=4",
    "--set",
    "discriminator.depth=2",
];

fn harmonizer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_harmonizer"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("HARMONIZER_CACHE")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(out: &Path, seed: &str) {
    let res = harmonizer(&[
        "synth",
        "--procedural",
        "6",
        "--resolution",
        "32",
        "--train",
        "3",
        "--val",
        "1",
        "--test",
        "2",
        "--out",
        s(out),
        "--seed",
        seed,
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
}

fn train_tiny(data: &Path, out: &Path) -> PathBuf {
    let mut args = vec![
        "train",
        "--data",
        s(data),
        "--out",
        s(out),
        "--resolution",
        "32",
        "--max-steps",
        "2",
    ];
    args.extend(TINY);
    let res = harmonizer(&args);
    assert!(res.status.success(), "{}", stderr(&res));
    out.join("model.ckpt")
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((
                    path.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

/// Copy the composites and masks of one sample into frame/mask directories.
fn clip_from_dataset(data: &Path, dir: &Path) -> (PathBuf, PathBuf) {
    let sample = first_sample_dir(data);
    let (frames, masks) = (dir.join("frames"), dir.join("masks"));
    fs::create_dir_all(&frames).unwrap();
    fs::create_dir_all(&masks).unwrap();
    for i in 1..=2 {
        fs::copy(
            sample.join(format!("comp_{i}.png")),
            frames.join(format!("{i:04}.png")),
        )
        .unwrap();
        fs::copy(
            sample.join(format!("mask_{i}.png")),
            masks.join(format!("{i:04}.png")),
        )
        .unwrap();
    }
    (frames, masks)
}

fn first_sample_dir(data: &Path) -> PathBuf {
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    data.join(manifest["entries"][0]["dir"].as_str().unwrap())
}

#[test]
fn help_documents_every_flag() {
    let top = harmonizer(&["--help"]);
    assert!(top.status.success());
    let text = stdout(&top);
    for cmd in [
        "synth",
        "train",
        "harmonize",
        "predict-mask",
        "eval",
        "rank",
    ] {
        assert!(text.contains(cmd), "top-level help lacks {cmd}");
    }
    let cases: [(&str, &[&str]); 6] = [
        (
            "synth",
            &[
                "--sources",
                "--procedural",
                "--out",
                "--resolution",
                "--seed",
                "--config",
                "--set",
            ],
        ),
        (
            "train",
            &[
                "--data",
                "--out",
                "--resolution",
                "--checkpoint",
                "--seed",
                "--config",
            ],
        ),
        (
            "harmonize",
            &[
                "--frames",
                "--mask-dir",
                "--mask-free",
                "--checkpoint",
                "--out",
            ],
        ),
        ("predict-mask", &["--frames", "--checkpoint", "--out"]),
        (
            "eval",
            &[
                "--data",
                "--split",
                "--checkpoint",
                "--mask-free",
                "--flows",
                "--resolution",
                "--out",
            ],
        ),
        ("rank", &["--ballots", "--out"]),
    ];
    for (cmd, flags) in cases {
        let out = harmonizer(&[cmd, "--help"]);
        assert!(out.status.success());
        let text = stdout(&out);
        for flag in flags {
            assert!(text.contains(flag), "{cmd} --help lacks {flag}");
        }
    }
}

#[test]
fn usage_errors_exit_2_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let cases: Vec<Vec<String>> = vec![
        vec!["frobnicate".into()],
        vec!["rank".into()],
        vec![
            "rank".into(),
            "--ballots".into(),
            s(&dir.path().join("missing.csv")).into(),
        ],
        vec![
            "harmonize".into(),
            "--frames".into(),
            s(dir.path()).into(),
            "--checkpoint".into(),
            "x".into(),
            "--out".into(),
            "y".into(),
        ],
        vec![
            "synth".into(),
            "--procedural".into(),
            "2".into(),
            "--out".into(),
            s(dir.path()).into(),
            "--set".into(),
            "nope=1".into(),
        ],
    ];
    for args in cases {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = harmonizer(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", stderr(&out));
        let err = stderr(&out);
        let last = err.lines().last().unwrap();
        assert!(last.starts_with("error[usage]: "), "{args:?}: {err}");
    }
}

#[test]
fn bad_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    fs::create_dir(&frames).unwrap();
    Frame::filled(16, 16, [0.5; 3])
        .save_png(&frames.join("0001.png"))
        .unwrap();
    let ckpt = dir.path().join("broken.ckpt");
    fs::write(&ckpt, b"definitely not a checkpoint").unwrap();
    let out = harmonizer(&[
        "predict-mask",
        "--frames",
        s(&frames),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).starts_with("error[data]: "));
}

#[test]
fn synth_is_reproducible_under_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    synth(&a, "5");
    synth(&b, "5");
    synth(&c, "6");
    let fa = files(&a);
    assert!(fa.iter().any(|(p, _)| p.ends_with("manifest.json")));
    assert_eq!(fa, files(&b));
    assert_ne!(fa, files(&c));
}

#[test]
fn synth_reuses_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let run = |out: &Path| {
        Command::new(env!("CARGO_BIN_EXE_harmonizer"))
            .args([
                "synth",
                "--procedural",
                "4",
                "--resolution",
                "32",
                "--train",
                "2",
                "--val",
                "0",
                "--test",
                "0",
            ])
            .args(["--out", s(out)])
            .env("HARMONIZER_CACHE", &cache)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    };
    assert!(run(&dir.path().join("d1")).status.success());
    let index = cache.join("procedural-4-32x32-0").join("index.json");
    assert!(index.is_file());
    assert!(!dir.path().join("d1").join("sources").exists());
    assert!(run(&dir.path().join("d2")).status.success());
    assert_eq!(files(&dir.path().join("d1")), files(&dir.path().join("d2")));
}

#[test]
fn train_harmonize_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "3");
    let run = dir.path().join("run");
    let ckpt = train_tiny(&data, &run);
    assert!(ckpt.is_file());
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(run.join("config.json").is_file());

    // Masked harmonization keeps filenames and every background pixel.
    let (frames, masks) = clip_from_dataset(&data, dir.path());
    let out = dir.path().join("out");
    let res = harmonizer(&[
        "harmonize",
        "--frames",
        s(&frames),
        "--mask-dir",
        s(&masks),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&out),
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    for name in ["0001.png", "0002.png"] {
        let input = Frame::load_png(&frames.join(name)).unwrap();
        let mask = Mask::load_png(&masks.join(name)).unwrap();
        let output = Frame::load_png(&out.join(name)).unwrap();
        assert_eq!(output.dims(), input.dims());
        for y in 0..input.height() {
            for x in 0..input.width() {
                if mask.get(x, y) == 0.0 {
                    assert_eq!(output.get(x, y), input.get(x, y));
                }
            }
        }
    }

    // Mask-free path and mask prediction.
    let out_free = dir.path().join("out_free");
    let res = harmonizer(&[
        "harmonize",
        "--frames",
        s(&frames),
        "--mask-free",
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&out_free),
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    assert!(out_free.join("0002.png").is_file());
    let pred = dir.path().join("pred");
    let res = harmonizer(&[
        "predict-mask",
        "--frames",
        s(&frames),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&pred),
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    assert_eq!(
        Mask::load_png(&pred.join("0001.png")).unwrap().dims(),
        (32, 32)
    );

    // Evaluation: the model and the cut-and-paste baseline.
    let report = dir.path().join("report.json");
    let res = harmonizer(&[
        "eval",
        "--data",
        s(&data),
        "--split",
        "test",
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&report),
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    assert!(stdout(&res).contains("PSNR"));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["samples"], 2);
    assert_eq!(json["method"], "model");
    let res = harmonizer(&["eval", "--data", s(&data), "--split", "test"]);
    assert!(res.status.success(), "{}", stderr(&res));
    assert!(stdout(&res).contains("cut-and-paste"));

    // Resuming continues the step count.
    let mut args = vec![
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--resolution",
        "32",
        "--max-steps",
        "3",
        "--checkpoint",
        s(&ckpt),
    ];
    args.extend(TINY);
    let res = harmonizer(&args);
    assert!(res.status.success(), "{}", stderr(&res));
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["step"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(steps, vec![1, 2, 3]);
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "4");
    let run = dir.path().join("run");
    let mut args = vec![
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--resolution",
        "32",
        "--max-steps",
        "20",
        "--set",
        "lr=1e30",
    ];
    args.extend(TINY);
    let out = harmonizer(&args);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    assert!(stderr(&out).starts_with("error[numeric]: "));
    assert!(run.join("diverged.ckpt").is_file());
}

#[test]
fn rank_prints_centered_scores() {
    let dir = tempfile::tempdir().unwrap();
    let ballots = dir.path().join("b.csv");
    fs::write(
        &ballots,
        "ours,baseline,copy\nours,copy,baseline\nbaseline,ours,copy\nours,baseline,copy\n",
    )
    .unwrap();
    let json = dir.path().join("fit.json");
    let out = harmonizer(&["rank", "--ballots", s(&ballots), "--out", s(&json)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert!(rows[0].starts_with("ours"));
    let fit: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let sum: f64 = ["ours", "baseline", "copy"]
        .iter()
        .map(|m| fit["scores"][m].as_f64().unwrap())
        .sum();
    assert!(sum.abs() < 1e-9);
}
