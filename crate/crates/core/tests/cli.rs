use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"{
  "input_channels": 6,
  "channels": 8,
  "se_bottleneck": 4,
  "fc_hidden": 8,
  "embedding_dim": 4,
  "dtype": "fp64"
}"#;

fn csrep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csrep"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn value<'a>(out: &'a str, key: &str) -> &'a str {
    out.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key} in:\n{out}"))
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(ws.path("small.json"), SMALL).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn build(&self, out: &str, seed: u64) -> Output {
        let o = csrep(&[
            "build",
            "--config",
            &self.arg("small.json"),
            "--seed",
            &seed.to_string(),
            "--out",
            &self.arg(out),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        o
    }
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn build_is_deterministic_and_reports_counts() {
    let ws = Workspace::new();
    let o = ws.build("a.csrp", 5);
    ws.build("b.csrp", 5);
    ws.build("c.csrp", 6);
    assert_eq!(read(ws.path("a.csrp")), read(ws.path("b.csrp")));
    assert_ne!(read(ws.path("a.csrp")), read(ws.path("c.csrp")));
    let out = stdout(&o);
    assert_eq!(value(&out, "branch_groups"), "16");
    assert_eq!(value(&out, "dtype"), "fp64");
    assert!(value(&out, "params").parse::<usize>().unwrap() > 0);
}

#[test]
fn bad_config_field_is_named() {
    let ws = Workspace::new();
    std::fs::write(
        ws.path("bad.json"),
        "{\n  \"channels\": 8,\n  \"chanels\": 3\n}",
    )
    .unwrap();
    let o = csrep(&[
        "build",
        "--config",
        &ws.arg("bad.json"),
        "--out",
        &ws.arg("x.csrp"),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("chanels") && err.contains("line 3"), "{err}");

    std::fs::write(
        ws.path("invalid.json"),
        r#"{ "channels": 10, "blocks": [{ "groups": 3 }] }"#,
    )
    .unwrap();
    let o = csrep(&[
        "build",
        "--config",
        &ws.arg("invalid.json"),
        "--out",
        &ws.arg("x.csrp"),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("blocks[0].groups"), "{}", stderr(&o));
}

#[test]
fn transform_verify_roundtrip() {
    let ws = Workspace::new();
    ws.build("multi.csrp", 1);
    let o = csrep(&[
        "transform",
        "--input",
        &ws.arg("multi.csrp"),
        "--out",
        &ws.arg("plain.csrp"),
        "--self-check",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(value(&out, "merged_groups"), "16");
    assert_eq!(value(&out, "step4.after.branch_groups"), "0");
    assert!(
        value(&out, "self_check.max_abs_deviation")
            .parse::<f64>()
            .unwrap()
            <= 1e-10
    );
    assert!(stderr(&o).contains("precedes se"));

    let o = csrep(&[
        "verify",
        &ws.arg("multi.csrp"),
        &ws.arg("plain.csrp"),
        "--trials",
        "3",
        "--frames",
        "50",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(
        value(&stdout(&o), "max_abs_deviation")
            .parse::<f64>()
            .unwrap()
            <= 1e-10
    );

    // a plain model has nothing left to rewrite
    let o = csrep(&[
        "transform",
        "--input",
        &ws.arg("plain.csrp"),
        "--out",
        &ws.arg("again.csrp"),
    ]);
    assert_eq!(value(&stdout(&o), "rewrites"), "0");
    assert_eq!(read(ws.path("plain.csrp")), read(ws.path("again.csrp")));
}

#[test]
fn stop_after_shift_is_exact() {
    let ws = Workspace::new();
    ws.build("multi.csrp", 2);
    let o = csrep(&[
        "transform",
        "--input",
        &ws.arg("multi.csrp"),
        "--out",
        &ws.arg("s1.csrp"),
        "--stop-after",
        "1",
        "--self-check",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(value(&stdout(&o), "self_check.max_abs_deviation"), "0.0");
    assert_eq!(value(&stdout(&o), "stop_after"), "1");
}

#[test]
fn verify_identical_and_different_models() {
    let ws = Workspace::new();
    ws.build("a.csrp", 1);
    ws.build("b.csrp", 2);
    let o = csrep(&["verify", &ws.arg("a.csrp"), &ws.arg("a.csrp")]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(value(&stdout(&o), "max_abs_deviation"), "0.0");

    let o = csrep(&[
        "verify",
        &ws.arg("a.csrp"),
        &ws.arg("b.csrp"),
        "--frames",
        "30",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(value(&stdout(&o), "pass"), "false");
    assert!(
        value(&stdout(&o), "max_abs_deviation")
            .parse::<f64>()
            .unwrap()
            > 0.0
    );
}

#[test]
fn bench_counts_frames() {
    let ws = Workspace::new();
    ws.build("m.csrp", 1);
    let run = |iters: &str| {
        let o = csrep(&[
            "bench",
            "--model",
            &ws.arg("m.csrp"),
            "--batch",
            "2",
            "--frames",
            "40",
            "--warmup",
            "1",
            "--iters",
            iters,
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        stdout(&o)
    };
    let out = run("3");
    assert_eq!(value(&out, "frames_processed"), "240");
    assert_eq!(value(&out, "threads"), "1");
    let fps: f64 = value(&out, "frames_per_second").parse().unwrap();
    let secs: f64 = value(&out, "wall_seconds").parse().unwrap();
    assert!((fps - 240.0 / secs).abs() <= 1e-9 * fps);
    assert_eq!(value(&run("6"), "frames_processed"), "480");
}

#[test]
fn params_in_both_formats() {
    let ws = Workspace::new();
    ws.build("m.csrp", 1);
    let o = csrep(&["params", "--model", &ws.arg("m.csrp"), "--frames", "100"]);
    let kv = stdout(&o);
    let total: usize = value(&kv, "params").parse().unwrap();
    let affine: usize = value(&kv, "params_bn_affine_only").parse().unwrap();
    assert_eq!(
        total - affine,
        value(&kv, "params.bn_stats").parse::<usize>().unwrap()
    );
    assert_eq!(value(&kv, "flop_frames"), "100");

    let o = csrep(&["--format", "json", "params", "--model", &ws.arg("m.csrp")]);
    let json: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(json["params"].as_u64().unwrap() as usize, total);

    let o = csrep(&["params", "--config", &ws.arg("small.json")]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        value(&stdout(&o), "training_params")
            .parse::<usize>()
            .unwrap(),
        total
    );
}

#[test]
fn eer_from_score_file() {
    let ws = Workspace::new();
    std::fs::write(
        ws.path("scores.txt"),
        "# trials\ntarget 0.9\ntarget 0.8\ntarget 0.3\nnontarget 0.6\nnontarget 0.2\nnontarget 0.1\n",
    )
    .unwrap();
    let o = csrep(&["eer", "--scores", &ws.arg("scores.txt")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let eer: f64 = value(&stdout(&o), "eer").parse().unwrap();
    assert!((eer - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(value(&stdout(&o), "p_target"), "0.001");

    std::fs::write(ws.path("bad.txt"), "target 0.9\nnontarget oops\n").unwrap();
    let o = csrep(&["eer", "--scores", &ws.arg("bad.txt")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    let o = csrep(&[
        "eer",
        "--scores",
        &ws.arg("scores.txt"),
        "--p-target",
        "1.5",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn io_and_format_errors_exit_3() {
    let ws = Workspace::new();
    let o = csrep(&["params", "--model", &ws.arg("missing.csrp")]);
    assert_eq!(o.status.code(), Some(3));
    std::fs::write(ws.path("junk.csrp"), b"NOPE\x01\0\0\0").unwrap();
    let o = csrep(&["bench", "--model", &ws.arg("junk.csrp")]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("bad magic"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(csrep(&[]).status.code(), Some(2));
    assert_eq!(csrep(&["transform", "--input", "x"]).status.code(), Some(2));
    assert_eq!(
        csrep(&[
            "transform",
            "--input",
            "x",
            "--out",
            "y",
            "--stop-after",
            "5"
        ])
        .status
        .code(),
        Some(2)
    );
    let help = csrep(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    for cmd in ["build", "transform", "verify", "bench", "params", "eer"] {
        assert!(stdout(&help).contains(cmd), "{cmd} missing from help");
    }
}
