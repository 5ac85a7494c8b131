use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "image_size=32",
    "--set",
    "embed_dim=16",
    "--set",
    "depth=1",
    "--set",
    "heads=2",
    "--set",
    "synthetic_n=40",
    "--set",
    "epochs=1",
    "--set",
    "batch_size=8",
];

fn lka(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lka"))
        .args(args)
        .current_dir(cwd)
        .env_remove("LKA_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn params_reports_closed_form_match() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("p.cfg"),
        "# width 96, two blocks\nembed_dim = 96\nbottleneck = 8\nkernel = 7\ndepth = 2\n",
    )
    .unwrap();
    let o = lka(&["params", "--config", "p.cfg", "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("per-adapter enumerated: 2040"), "{text}");
    assert!(text.contains("match=true"));
    assert!(dir.path().join("o/effective-config.txt").exists());
}

#[test]
fn unknown_flag_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = lka(&["params", "--frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_config_key_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "colour = red\n").unwrap();
    let o = lka(&["params", "--config", "bad.cfg", "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
}

#[test]
fn missing_checkpoint_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = lka(&["eval", "--ckpt", "nope.lkck", "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.cfg"), "kernel = 7\nbottleneck = 4\n").unwrap();
    let o = lka(
        &[
            "params", "--config", "c.cfg", "--set", "kernel=3", "--out", "o",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let echo = fs::read_to_string(dir.path().join("o/effective-config.txt")).unwrap();
    assert!(echo.contains("kernel = 3\n"));
    assert!(echo.contains("bottleneck = 4\n"));
}

#[test]
fn out_dir_defaults_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_lka"))
        .args(["params"])
        .current_dir(dir.path())
        .env("LKA_OUT_DIR", "from-env")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("from-env/effective-config.txt").exists());
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--kernel", "1,3", "--seeds", "2", "--out", "s"]);
    let o = lka(&args, dir.path());
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let csv = fs::read_to_string(dir.path().join("s/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("kernel,width,seed,test_top1"));
    assert!(lines[1].starts_with("1,8,0,") && lines[4].starts_with("3,8,1,"));
}

fn strip_runtime(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
        .collect()
}

#[test]
fn parallel_sweep_matches_sequential() {
    let dir = tempfile::tempdir().unwrap();
    let run = |jobs: &str, out: &str| {
        let mut args = vec!["sweep"];
        args.extend_from_slice(TINY);
        args.extend_from_slice(&[
            "--kernel", "none,3", "--width", "2,4", "--jobs", jobs, "--out", out,
        ]);
        let o = lka(&args, dir.path());
        assert_eq!(o.status.code(), Some(0));
        fs::read_to_string(dir.path().join(out).join("sweep.csv")).unwrap()
    };
    let seq = run("1", "a");
    let par = run("3", "b");
    assert_eq!(strip_runtime(&seq), strip_runtime(&par));
    assert_eq!(seq.lines().count(), 5);
}

#[test]
fn train_eval_erf_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = lka(
        &[
            "gen-data", "--seed", "2", "--n", "20", "--size", "32", "--out", "d.lkds",
        ],
        p,
    );
    assert_eq!(o.status.code(), Some(0));

    let mut args = vec!["train"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--data", "d.lkds", "--out", "t1"]);
    assert_eq!(lka(&args, p).status.code(), Some(0));
    let metrics = fs::read_to_string(p.join("t1/metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,loss,train_top1\n"));

    // rerun from the echo alone
    let o = lka(
        &[
            "train",
            "--config",
            "t1/effective-config.txt",
            "--out",
            "t2",
        ],
        p,
    );
    assert_eq!(o.status.code(), Some(0));
    for f in ["metrics.csv", "model.lkck"] {
        assert_eq!(
            fs::read(p.join("t1").join(f)).unwrap(),
            fs::read(p.join("t2").join(f)).unwrap()
        );
    }

    let o = lka(
        &[
            "eval",
            "--ckpt",
            "t1/model.lkck",
            "--data",
            "d.lkds",
            "--out",
            "e",
        ],
        p,
    );
    assert_eq!(o.status.code(), Some(0));
    let row = fs::read_to_string(p.join("e/eval.csv")).unwrap();
    assert!(row.starts_with("checkpoint,samples,top1\n"));

    let erf = |out: &str| {
        let o = lka(
            &[
                "erf",
                "--ckpt",
                "t1/model.lkck",
                "--size",
                "32",
                "--images",
                "3",
                "--out",
                out,
            ],
            p,
        );
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
    };
    erf("r1");
    erf("r2");
    for f in ["erf.pgm", "erf.csv"] {
        assert_eq!(
            fs::read(p.join("r1").join(f)).unwrap(),
            fs::read(p.join("r2").join(f)).unwrap()
        );
    }
    let bad = lka(
        &[
            "erf",
            "--ckpt",
            "t1/model.lkck",
            "--size",
            "64",
            "--out",
            "r3",
        ],
        p,
    );
    assert_eq!(bad.status.code(), Some(2));
}
