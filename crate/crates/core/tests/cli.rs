//! End-to-end runs of the `ddim-impute` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ddim_impute::data::format_number;
use ddim_impute::eval::make_synthetic_gaussian;

const BIN: &str = env!("CARGO_BIN_EXE_ddim-impute");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Fully observed synthetic table plus a categorical column.
fn write_input(dir: &Path, n: usize) -> PathBuf {
    let ds = make_synthetic_gaussian(n, 0.8, 17).unwrap();
    let mut text = String::from("x1,x2,sign\n");
    for (i, row) in ds.cells().iter().enumerate() {
        let x1 = row[0].as_deref().unwrap();
        let sign = if ds.encoded()[[i, 0]] > 0.0 { "pos" } else { "neg" };
        text.push_str(&format!("{x1},{},{sign}\n", row[1].as_deref().unwrap()));
    }
    let path = dir.join("data.csv");
    fs::write(&path, text).unwrap();
    path
}

struct Pipeline {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Pipeline {
    fn new(n: usize, epochs: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let input = write_input(&root, n);
        ok(&["mask", "--input", p(&input), "--rate", "0.3", "--seed", "5", "--out-dir", p(&root.join("m"))]);
        ok(&[
            "train", "--input", p(&root.join("m/masked.csv")), "--out-dir", p(&root.join("t")),
            "--epochs", epochs, "--width", "16", "--depth", "2", "--time-dim", "8",
        ]);
        Pipeline { _tmp: tmp, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn impute(&self, out: &str, extra: &[&str]) -> Output {
        let mut args = vec![
            "impute".to_string(),
            "--input".into(),
            p(&self.path("m/masked.csv")).into(),
            "--checkpoint".into(),
            p(&self.path("t/checkpoint.bin")).into(),
            "--out-dir".into(),
            p(&self.path(out)).into(),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        run(&args.iter().map(String::as_str).collect::<Vec<_>>())
    }
}

#[test]
fn version_names_checkpoint_format() {
    let out = ok(&["--version"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("MDDIM1"));
}

#[test]
fn mask_rejects_bad_rate_naming_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let input = write_input(tmp.path(), 20);
    let out = run(&["mask", "--input", p(&input), "--rate", "1.5", "--out-dir", p(&tmp.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--rate"));
}

#[test]
fn mask_count_and_idempotence() {
    let tmp = tempfile::tempdir().unwrap();
    // 500 rows x 10 continuous columns, fully observed.
    let mut text = (0..10).map(|j| format!("c{j}")).collect::<Vec<_>>().join(",") + "\n";
    for i in 0..500 {
        let row: Vec<String> = (0..10).map(|j| format_number(((i * 10 + j) as f64 * 0.731).sin())).collect();
        text.push_str(&(row.join(",") + "\n"));
    }
    let input = tmp.path().join("wide.csv");
    fs::write(&input, text).unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        ok(&["mask", "--input", p(&input), "--rate", "0.5", "--seed", "3", "--out-dir", p(dir)]);
    }
    for f in ["masked.csv", "truth.csv", "mask.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let cells = fs::read_to_string(a.join("mask.csv")).unwrap().lines().count() - 1;
    // Binomial(5000, 0.5) 99.9% interval, normal approximation.
    let half = 3.2905 * (5000.0f64 * 0.25).sqrt();
    assert!((cells as f64 - 2500.0).abs() <= half, "{cells} masked cells");
}

#[test]
fn pipeline_artifacts_and_determinism() {
    let pl = Pipeline::new(300, "4");
    for f in ["checkpoint.bin", "loss.csv", "schema.json", "run_config.json"] {
        assert!(pl.path("t").join(f).exists(), "{f}");
    }
    let loss = fs::read_to_string(pl.path("t/loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("epoch,mean_loss"));
    assert_eq!(loss.lines().count(), 5);

    assert!(pl.impute("i1", &[]).status.success());
    assert!(pl.impute("i2", &["--threads", "3"]).status.success());
    let a = fs::read(pl.path("i1/completed.csv")).unwrap();
    assert_eq!(a, fs::read(pl.path("i2/completed.csv")).unwrap());
    assert_eq!(fs::read(pl.path("i1/provenance.csv")).unwrap(), fs::read(pl.path("i2/provenance.csv")).unwrap());

    let completed = String::from_utf8(a).unwrap();
    assert!(completed.lines().skip(1).all(|l| l.split(',').all(|c| !c.is_empty())));
    let masked = fs::read_to_string(pl.path("m/masked.csv")).unwrap();
    // Observed cells pass through verbatim.
    for (m, c) in masked.lines().zip(completed.lines()) {
        for (mc, cc) in m.split(',').zip(c.split(',')) {
            if !mc.is_empty() {
                assert_eq!(mc, cc);
            }
        }
    }
    let timing: serde_json::Value = serde_json::from_slice(&fs::read(pl.path("i1/timing.json")).unwrap()).unwrap();
    assert!(timing["wall_time_s"].as_f64().unwrap() >= 0.0);
    assert_eq!(timing["sampler"]["init"], "zero");

    ok(&[
        "eval", "--completed", p(&pl.path("i1/completed.csv")), "--truth", p(&pl.path("m/truth.csv")),
        "--mask", p(&pl.path("m/mask.csv")), "--schema", p(&pl.path("t/schema.json")),
        "--out-dir", p(&pl.path("e")),
    ]);
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(pl.path("e/metrics.json")).unwrap()).unwrap();
    assert!(metrics["rmse_continuous"].as_f64().unwrap() >= 0.0);
    let cat = metrics["cat_error_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&cat));
    assert_eq!(metrics["rmse_std_across_runs"].as_f64(), Some(0.0));
}

#[test]
fn stochastic_median_protocol_runs() {
    let pl = Pipeline::new(120, "2");
    let out = pl.impute("med", &["--eta", "1", "--samples", "100", "--agg", "median", "--steps", "10"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let timing: serde_json::Value = serde_json::from_slice(&fs::read(pl.path("med/timing.json")).unwrap()).unwrap();
    assert_eq!(timing["sampler"]["n_samples"], 100);
    assert_eq!(timing["sampler"]["aggregation"], "median");

    // DDPM must walk every step.
    let bad = pl.impute("ddpm", &["--method", "ddpm", "--steps", "10", "--samples", "2"]);
    assert_eq!(bad.status.code(), Some(2));
    let good = pl.impute("ddpm", &["--method", "ddpm", "--samples", "2"]);
    assert!(good.status.success());
}

#[test]
fn schema_mismatch_exits_2_and_missing_file_exits_4() {
    let pl = Pipeline::new(60, "1");
    let other = pl.path("other.csv");
    fs::write(&other, "a,b\n1,2\n3,4\n").unwrap();
    let out = run(&[
        "impute", "--input", p(&other), "--checkpoint", p(&pl.path("t/checkpoint.bin")), "--out-dir", p(&pl.path("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&[
        "impute", "--input", p(&pl.path("m/masked.csv")), "--checkpoint", p(&pl.path("nope.bin")),
        "--out-dir", p(&pl.path("x")),
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let pl = Pipeline::new(150, "4");
    let common = |out: &str, epochs: &str| {
        vec![
            "train".to_string(), "--input".into(), p(&pl.path("m/masked.csv")).into(),
            "--out-dir".into(), p(&pl.path(out)).into(), "--epochs".into(), epochs.into(),
            "--width".into(), "16".into(), "--depth".into(), "2".into(), "--time-dim".into(), "8".into(),
        ]
    };
    let args = common("half", "2");
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let mut args = vec![
        "train".to_string(), "--input".into(), p(&pl.path("m/masked.csv")).into(),
        "--out-dir".into(), p(&pl.path("resumed")).into(), "--epochs".into(), "4".into(),
    ];
    args.extend(["--resume".into(), p(&pl.path("half/checkpoint.bin")).into()]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(
        fs::read(pl.path("resumed/checkpoint.bin")).unwrap(),
        fs::read(pl.path("t/checkpoint.bin")).unwrap()
    );
    assert_eq!(fs::read(pl.path("resumed/loss.csv")).unwrap(), fs::read(pl.path("t/loss.csv")).unwrap());
}

#[test]
fn run_config_replays() {
    let pl = Pipeline::new(80, "2");
    let rc: serde_json::Value = serde_json::from_slice(&fs::read(pl.path("t/run_config.json")).unwrap()).unwrap();
    // Defaults are echoed explicitly.
    assert_eq!(rc["resolved"]["train_config"]["batch_size"], 64);
    assert_eq!(rc["resolved"]["schedule"]["kind"], "quadratic");
    ok(&["--config", p(&pl.path("t/run_config.json")), "--replay-out-dir", p(&pl.path("t2"))]);
    for f in ["checkpoint.bin", "loss.csv", "schema.json"] {
        assert_eq!(fs::read(pl.path("t").join(f)).unwrap(), fs::read(pl.path("t2").join(f)).unwrap(), "{f}");
    }

    assert!(pl.impute("i", &["--eta", "0.5", "--steps", "20", "--init-seed", "4"]).status.success());
    ok(&["--config", p(&pl.path("i/run_config.json")), "--replay-out-dir", p(&pl.path("i2"))]);
    assert_eq!(fs::read(pl.path("i/completed.csv")).unwrap(), fs::read(pl.path("i2/completed.csv")).unwrap());

    let both = run(&["--config", p(&pl.path("i/run_config.json")), "mask"]);
    assert_eq!(both.status.code(), Some(2));
}

#[test]
fn ablate_and_bench_write_grids() {
    let pl = Pipeline::new(100, "1");
    for (cmd, rows) in [("ablate", 12), ("bench", 3)] {
        ok(&[
            cmd, "--input", p(&pl.path("m/masked.csv")), "--checkpoint", p(&pl.path("t/checkpoint.bin")),
            "--truth", p(&pl.path("m/truth.csv")), "--out-dir", p(&pl.path(cmd)), "--repeats", "2",
        ]);
        let grid = fs::read_to_string(pl.path(cmd).join("grid.csv")).unwrap();
        let mut lines = grid.lines();
        assert_eq!(lines.next(), Some("eta,steps,n_samples,rmse_mean,rmse_std,cat_error,wall_time_s"));
        let body: Vec<&str> = lines.collect();
        assert_eq!(body.len(), rows, "{cmd}");
        // Fixed init seed: repeats at eta = 0 agree exactly.
        for line in body.iter().filter(|l| l.starts_with("0,")) {
            assert_eq!(line.split(',').nth(4), Some("0"), "{line}");
        }
    }
}
