//! End-to-end runs of the `ntex` binary on tiny models.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ntex_cli::imageio::{read_image, write_image};
use ntex_core::synthetic::desk_corpus;

fn ntex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ntex"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = ntex(args);
    assert!(
        out.status.success(),
        "ntex {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    ntex(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a corpus directory and a config file; returns the config path.
fn setup(dir: &Path, extra: &str, count: usize) -> PathBuf {
    let corpus = dir.join("corpus");
    std::fs::create_dir_all(&corpus).unwrap();
    for (k, img) in desk_corpus(count, 40, 9).unwrap().iter().enumerate() {
        write_image(&corpus.join(format!("ex{k}.png")), img).unwrap();
    }
    let defaults =
        "extractor = minivgg\npatch_size = 32\nbatch = 2\nsteps = 4\noctaves = 4\nseed = 3\n\
                    corpus = corpus\nout_dir = run\ncheckpoint_every = 2\n";
    let overridden = |line: &&str| {
        extra
            .lines()
            .any(|e| e.split('=').next() == line.split('=').next())
    };
    let mut text = String::from("# tiny\n");
    for line in defaults.lines().filter(|l| !overridden(l)) {
        text.push_str(line);
        text.push('\n');
    }
    text.push_str(extra);
    let cfg = dir.join("train.cfg");
    std::fs::write(&cfg, text).unwrap();
    cfg
}

fn train(dir: &Path, extra: &str, count: usize) -> PathBuf {
    let cfg = setup(dir, extra, count);
    let out = ok(&["train", "--config", s(&cfg)]);
    let model = PathBuf::from(String::from_utf8(out.stdout).unwrap().trim());
    assert_eq!(model, dir.join("run").join("model.ntex"));
    model
}

#[test]
fn train_writes_model_checkpoints_and_loss_csv() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), "", 1);
    let run = dir.path().join("run");
    for f in [
        "model.ntex",
        "checkpoint_000002.ntex",
        "checkpoint_000004.ntex",
        "loss.csv",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,loss");
    assert_eq!(lines.len(), 5);
    assert!(lines[1..].iter().all(|l| l
        .split(',')
        .nth(1)
        .unwrap()
        .parse::<f64>()
        .unwrap()
        .is_finite()));
    assert_eq!(
        std::fs::read(run.join("checkpoint_000004.ntex")).unwrap(),
        std::fs::read(run.join("model.ntex")).unwrap()
    );
}

#[test]
fn sample_is_deterministic_and_honours_size_and_format() {
    let dir = tempfile::tempdir().unwrap();
    let model = train(dir.path(), "", 1);
    let a = dir.path().join("a.png");
    let b = dir.path().join("b.png");
    let c = dir.path().join("c.ppm");
    let base = [
        "sample",
        "--checkpoint",
        s(&model),
        "--seed",
        "11",
        "--size",
        "48x20",
        "--tile",
        "16",
    ];
    ok(&[&base[..], &["--out", s(&a)]].concat());
    ok(&[&base[..], &["--out", s(&b)]].concat());
    ok(&[&base[..], &["--out", s(&c), "--window", "-3,1.5:6,2.5"]].concat());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let img = read_image(&a).unwrap();
    assert_eq!((img.width(), img.height()), (48, 20));
    assert_eq!(read_image(&c).unwrap().width(), 48);
}

#[test]
fn usage_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ntex");
    let out = dir.path().join("x.png");
    assert_eq!(
        code(&["sample", "--checkpoint", s(&missing), "--out", s(&out)]),
        2
    );
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["sample", "--size", "12"]), 2);
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "colour = blue\n").unwrap();
    assert_eq!(code(&["train", "--config", s(&cfg)]), 2);
    assert!(!out.exists());
}

#[test]
fn divergence_exits_with_code_3_and_leaves_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "lr = 1e30\nsteps = 40\n", 1);
    let out = ntex(&["train", "--config", s(&cfg)]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = std::fs::read_to_string(dir.path().join("run").join("diverged.txt")).unwrap();
    assert!(report.contains("non-finite"));
    assert!(!dir.path().join("run").join("model.ntex").exists());
}

#[test]
fn three_dimensional_commands() {
    let dir = tempfile::tempdir().unwrap();
    let model = train(dir.path(), "target_dim = 3\n", 1);
    let m = s(&model);
    let sl = dir.path().join("slice.png");
    ok(&[
        "slice",
        "--checkpoint",
        m,
        "--axis",
        "y",
        "--offset",
        "-2.5",
        "--size",
        "24x24",
        "--out",
        s(&sl),
    ]);
    assert_eq!(read_image(&sl).unwrap().width(), 24);
    assert_eq!(
        code(&["slice", "--checkpoint", m, "--axis", "w", "--out", s(&sl)]),
        2
    );

    let obj = dir.path().join("tet.obj");
    std::fs::write(
        &obj,
        "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1 2 3\nf 1 2 4\nf 1 3 4\nf 2 3 4\n",
    )
    .unwrap();
    let ply = dir.path().join("tet.ply");
    ok(&[
        "mesh",
        "--checkpoint",
        m,
        "--in",
        s(&obj),
        "--out",
        s(&ply),
        "--seed",
        "2",
    ]);
    let text = std::fs::read_to_string(&ply).unwrap();
    assert!(text.starts_with("ply\n"));
    assert!(text.contains("element vertex 4\n") && text.contains("element face 4\n"));
    let colored = dir.path().join("tet_out.obj");
    ok(&[
        "mesh",
        "--checkpoint",
        m,
        "--in",
        s(&obj),
        "--out",
        s(&colored),
    ]);
    let first = std::fs::read_to_string(&colored).unwrap();
    let v: Vec<f64> = first
        .lines()
        .next()
        .unwrap()
        .split_whitespace()
        .skip(1)
        .map(|t| t.parse().unwrap())
        .collect();
    assert_eq!(v.len(), 6);
    assert!(v[3..].iter().all(|c| (0.0..=1.0).contains(c)));
}

#[test]
fn slice_and_mesh_reject_2d_models() {
    let dir = tempfile::tempdir().unwrap();
    let model = train(dir.path(), "", 1);
    let out = dir.path().join("s.png");
    assert_eq!(
        code(&[
            "slice",
            "--checkpoint",
            s(&model),
            "--axis",
            "x",
            "--out",
            s(&out)
        ]),
        2
    );
}

#[test]
fn zoom_writes_one_frame_per_factor() {
    let dir = tempfile::tempdir().unwrap();
    let model = train(dir.path(), "", 1);
    let frames = dir.path().join("frames");
    let out = ok(&[
        "zoom",
        "--checkpoint",
        s(&model),
        "--center",
        "-1.25,3",
        "--factors",
        "1,2,4",
        "--size",
        "16x16",
        "--out",
        s(&frames),
    ]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 3);
    for k in 0..3 {
        assert!(frames.join(format!("zoom_{k:03}.png")).is_file());
    }
}

#[test]
fn space_commands_interp_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let model = train(dir.path(), "mode = space\nencoder_channels = 8,8,8\n", 3);
    let m = s(&model);
    let corpus = dir.path().join("corpus");
    let (a, b) = (corpus.join("ex0.png"), corpus.join("ex1.png"));
    let strip = dir.path().join("strip.png");
    ok(&[
        "interp",
        "--checkpoint",
        m,
        "--a",
        s(&a),
        "--b",
        s(&b),
        "--steps",
        "3",
        "--size",
        "16x16",
        "--out",
        s(&strip),
    ]);
    assert_eq!(read_image(&strip).unwrap().width(), 48);
    let out = dir.path().join("x.png");
    assert_eq!(code(&["sample", "--checkpoint", m, "--out", s(&out)]), 2);
    assert_eq!(
        code(&[
            "interp",
            "--checkpoint",
            m,
            "--a",
            s(&a),
            "--b",
            s(&b),
            "--steps",
            "1",
            "--out",
            s(&strip)
        ]),
        2
    );

    let csv = dir.path().join("metrics.csv");
    let table = ok(&[
        "metrics",
        "--checkpoint",
        m,
        "--corpus",
        s(&corpus),
        "--seeds",
        "3",
        "--extractor",
        "minivgg",
        "--out",
        s(&csv),
    ]);
    let table = String::from_utf8(table.stdout).unwrap();
    assert!(table.contains("Sim") && table.contains("model"));
    let rows = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().count(), 2);
    assert!(rows.lines().nth(1).unwrap().starts_with("model,corpus,"));
    let again = dir.path().join("metrics2.csv");
    ok(&[
        "metrics",
        "--checkpoint",
        m,
        "--corpus",
        s(&corpus),
        "--seeds",
        "3",
        "--extractor",
        "minivgg",
        "--out",
        s(&again),
    ]);
    assert_eq!(rows, std::fs::read_to_string(&again).unwrap());
}

#[test]
fn metrics_report_mlp_with_zero_diversity() {
    let dir = tempfile::tempdir().unwrap();
    let mlp_dir = dir.path().join("mlp");
    std::fs::create_dir_all(&mlp_dir).unwrap();
    let model = train(&mlp_dir, "variant = mlp\n", 1);
    let mlp = dir.path().join("mlp.ntex");
    std::fs::copy(&model, &mlp).unwrap();
    let csv = dir.path().join("m.csv");
    ok(&[
        "metrics",
        "--checkpoint",
        s(&mlp),
        "--corpus",
        s(&mlp_dir.join("corpus")),
        "--seeds",
        "4",
        "--extractor",
        "minivgg",
        "--out",
        s(&csv),
    ]);
    let row = std::fs::read_to_string(&csv)
        .unwrap()
        .lines()
        .nth(1)
        .unwrap()
        .to_string();
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields[0], "mlp");
    assert_eq!(fields[3].parse::<f64>().unwrap(), 0.0);
}
