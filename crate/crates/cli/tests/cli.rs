use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
[scenario.custom]
seed = 3
days = 8
n_users = 6000
n_nodes = 300
background_txn_per_user_per_day = 0.3

[[scenario.custom.signals]]
id = "promo"
background_rate = 0.05
sybil_rate = 1.0

[[scenario.custom.signals]]
id = "noise"
background_rate = 0.04
sybil_rate = 0.04

[scenario.custom.attack]
n_sybil = 300
k_cashout = 6
start_day = 2
end_day = 6
txn_per_sybil_per_day = 3.0
cashout_source = "new"

[detect]
thresholds = [1.0, 10.0, 40.0]
"#;

fn amplify(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amplify")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Nonzero exit with exactly one diagnostic line of the given kind.
fn assert_fails(o: &Output, kind: &str) -> String {
    assert!(!o.status.success(), "expected failure, stdout: {}", stdout(o));
    let err = stderr(o);
    assert_eq!(err.lines().count(), 1, "{err}");
    let prefix = format!("amplify-error: {kind}: ");
    assert!(err.starts_with(&prefix), "{err}");
    err
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("run.toml"), SMALL).unwrap();
        let f = Fixture { dir };
        let o = amplify(&["--config", f.s("run.toml"), "generate", "--out", f.s("")]);
        assert!(o.status.success(), "{}", stderr(&o));
        f
    }

    fn path(&self, name: &str) -> std::path::PathBuf {
        self.dir.path().join(name)
    }

    /// Path as an argument string; leaked, it lives as long as the test.
    fn s(&self, name: &str) -> &str {
        let path = self.dir.path().join(name);
        Box::leak(path.into_os_string().into_string().unwrap().into_boxed_str())
    }

    fn subdir(&self, name: &str) -> &str {
        fs::create_dir_all(self.path(name)).unwrap();
        self.s(name)
    }
}

#[test]
fn generate_writes_files_and_summary() {
    let f = Fixture::new();
    for name in ["edges.csv", "truth.json", "scenario.json"] {
        assert!(f.path(name).is_file(), "{name}");
    }
    let header = fs::read_to_string(f.path("edges.csv")).unwrap();
    assert!(header.starts_with("user,node,day,promo,noise\n"));
    let o = amplify(&["--config", f.s("run.toml"), "generate", "--out", f.subdir("again")]);
    assert!(
        stdout(&o).contains("sybils=300 cashout_nodes=6 sybil_node_ratio=50.0"),
        "{}",
        stdout(&o)
    );
}

#[test]
fn outputs_are_deterministic() {
    let f = Fixture::new();
    let o = amplify(&["--config", f.s("run.toml"), "generate", "--out", f.subdir("g2")]);
    assert!(o.status.success());
    for name in ["edges.csv", "truth.json", "scenario.json"] {
        assert_eq!(
            fs::read(f.path(name)).unwrap(),
            fs::read(f.path("g2").join(name)).unwrap(),
            "{name}"
        );
    }

    let run = |out: &str| {
        let o = amplify(&[
            "--config",
            f.s("run.toml"),
            "backtest",
            "--edges",
            f.s("edges.csv"),
            "--truth",
            f.s("truth.json"),
            "--out",
            out,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    let a = run(f.subdir("b1"));
    let b = run(f.subdir("b2"));
    assert_eq!(a, b);
    for name in [
        "sweep_promo.csv",
        "sweep_noise.csv",
        "daily.csv",
        "amplification.csv",
        "alerts.jsonl",
        "activation.json",
    ] {
        let x = fs::read(f.path("b1").join(name)).unwrap();
        assert_eq!(x, fs::read(f.path("b2").join(name)).unwrap(), "{name}");
    }
}

#[test]
fn flags_override_config() {
    let f = Fixture::new();
    let o = amplify(&[
        "--config",
        f.s("run.toml"),
        "generate",
        "--seed",
        "11",
        "--out",
        f.subdir("s11"),
    ]);
    assert!(o.status.success());
    let cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("s11/scenario.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 11);

    // file thresholds give three sweep rows, the flag gives two
    let sweep_rows = |extra: &[&str], out: &str| {
        let mut args = vec![
            "--config",
            f.s("run.toml"),
            "backtest",
            "--edges",
            f.s("edges.csv"),
            "--truth",
            f.s("truth.json"),
            "--out",
            out,
        ];
        args.extend_from_slice(extra);
        let o = amplify(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read_to_string(Path::new(out).join("sweep_promo.csv"))
            .unwrap()
            .lines()
            .count()
            - 1
    };
    assert_eq!(sweep_rows(&[], f.subdir("t1")), 3);
    assert_eq!(sweep_rows(&["--thresholds", "5,40"], f.subdir("t2")), 2);
}

#[test]
fn backtest_bounds_gate_exit_status() {
    let f = Fixture::new();
    let base = [
        "backtest",
        "--edges",
        f.s("edges.csv"),
        "--truth",
        f.s("truth.json"),
        "--out",
        f.subdir("bt"),
    ];
    let mut ok = base.to_vec();
    ok.extend(["--min-precision", "0.5", "--min-scr", "0.9"]);
    let o = amplify(&ok);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("signal=promo active=true"));
    assert!(stdout(&o).contains("signal=noise active=false"));

    let mut bad = base.to_vec();
    bad.extend(["--min-precision", "1.01"]);
    let o = amplify(&bad);
    assert_eq!(o.status.code(), Some(3));
    let err = assert_fails(&o, "bound");
    assert!(err.contains("promo") && err.contains("precision"), "{err}");

    // bounds on an inactive signal fail rather than pass vacuously
    let mut inactive = base.to_vec();
    inactive.extend(["--bound-signal", "noise", "--min-scr", "0.5"]);
    assert_fails(&amplify(&inactive), "bound");

    // bounds from the config file
    let toml = format!("{SMALL}\n[bounds]\nsignal = \"promo\"\nmin_amplification = 1000.0\n");
    fs::write(f.path("strict.toml"), toml).unwrap();
    let mut cfg = vec!["--config", f.s("strict.toml")];
    cfg.extend(base);
    assert_fails(&amplify(&cfg), "bound");
}

#[test]
fn missing_output_directory_is_an_error() {
    let f = Fixture::new();
    assert_fails(
        &amplify(&["generate", "--preset", "calm", "--out", f.s("missing")]),
        "io",
    );
    assert_fails(
        &amplify(&[
            "backtest",
            "--edges",
            f.s("edges.csv"),
            "--truth",
            f.s("truth.json"),
            "--out",
            f.s("missing"),
        ]),
        "io",
    );
    assert!(!f.path("missing").exists());
}

#[test]
fn corrupt_edge_line_is_named() {
    let f = Fixture::new();
    let mut text = fs::read_to_string(f.path("edges.csv")).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[41] = "u0000001,n000001,notaday,1,0";
    text = lines.join("\n");
    fs::write(f.path("corrupt.csv"), text).unwrap();
    for cmd in [
        vec!["score", "--edges", f.s("corrupt.csv")],
        vec![
            "backtest",
            "--edges",
            f.s("corrupt.csv"),
            "--truth",
            f.s("truth.json"),
            "--out",
            f.subdir("c"),
        ],
        vec!["stream", "--edges", f.s("corrupt.csv"), "--checkpoint", f.s("cp.json")],
    ] {
        let err = assert_fails(&amplify(&cmd), "input");
        assert!(err.contains("line(s) 42"), "{err}");
    }
}

#[test]
fn score_ranks_and_rejects_unknown_signal() {
    let f = Fixture::new();
    let o = amplify(&["score", "--edges", f.s("edges.csv"), "--signal", "promo", "--top", "6"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows[0], "signal,rank,node,hits,transactions,raw_rate,shrunk_rate,z");
    assert_eq!(rows.len(), 7);
    // planted cash-out nodes use a separate id space and should fill the top
    assert!(
        rows[1..].iter().all(|r| r.split(',').nth(2).unwrap().starts_with('c')),
        "{out}"
    );

    let err = assert_fails(
        &amplify(&["score", "--edges", f.s("edges.csv"), "--signal", "nope"]),
        "signal",
    );
    assert!(err.contains("promo, noise"), "{err}");
}

#[test]
fn score_reports_degenerate_signal() {
    let f = Fixture::new();
    fs::write(f.path("flat.csv"), "user,node,day,a,b\nu1,x,0,0,1\nu2,y,0,0,0\n").unwrap();
    let o = amplify(&["score", "--edges", f.s("flat.csv")]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("signal a is inactive"));
    assert_fails(
        &amplify(&["score", "--edges", f.s("flat.csv"), "--signal", "a"]),
        "signal",
    );
}

#[test]
fn stream_resume_matches_uninterrupted_run() {
    let f = Fixture::new();
    let whole = amplify(&[
        "stream",
        "--edges",
        f.s("edges.csv"),
        "--checkpoint",
        f.s("whole.json"),
        "--alerts",
        f.s("whole.jsonl"),
    ]);
    assert!(whole.status.success(), "{}", stderr(&whole));
    assert!(stdout(&whole).contains("complete=true"));

    let step = [
        "stream",
        "--edges",
        f.s("edges.csv"),
        "--checkpoint",
        f.s("part.json"),
        "--alerts",
        f.s("part.jsonl"),
    ];
    let mut first = step.to_vec();
    first.extend(["--max-edges", "9000"]);
    let o = amplify(&first);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("cursor=9000 "));
    loop {
        let mut next = step.to_vec();
        next.extend(["--resume", "--max-edges", "7000"]);
        let o = amplify(&next);
        assert!(o.status.success(), "{}", stderr(&o));
        if stdout(&o).contains("complete=true") {
            break;
        }
    }
    assert_eq!(
        fs::read(f.path("part.jsonl")).unwrap(),
        fs::read(f.path("whole.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(f.path("part.json")).unwrap(),
        fs::read(f.path("whole.json")).unwrap()
    );
    assert!(!fs::read(f.path("whole.jsonl")).unwrap().is_empty());

    // resuming a finished stream is a no-op
    let mut again = step.to_vec();
    again.push("--resume");
    let o = amplify(&again);
    assert!(stdout(&o).contains("ingested=0 "));
    assert_eq!(
        fs::read(f.path("part.jsonl")).unwrap(),
        fs::read(f.path("whole.jsonl")).unwrap()
    );
}

#[test]
fn stream_errors() {
    let f = Fixture::new();
    assert_fails(
        &amplify(&[
            "stream",
            "--edges",
            f.s("edges.csv"),
            "--checkpoint",
            f.s("none.json"),
            "--resume",
        ]),
        "io",
    );

    fs::write(f.path("garbage.json"), "{\"not\": \"a checkpoint\"}").unwrap();
    assert_fails(
        &amplify(&[
            "stream",
            "--edges",
            f.s("edges.csv"),
            "--checkpoint",
            f.s("garbage.json"),
            "--resume",
        ]),
        "checkpoint",
    );

    fs::write(f.path("unsorted.csv"), "user,node,day,a\nu1,x,3,1\nu2,y,1,0\n").unwrap();
    let err = assert_fails(
        &amplify(&["stream", "--edges", f.s("unsorted.csv"), "--checkpoint", f.s("cp.json")]),
        "input",
    );
    assert!(err.contains("line 3"), "{err}");

    let o = amplify(&[
        "stream",
        "--edges",
        f.s("edges.csv"),
        "--checkpoint",
        f.s("cp.json"),
        "--max-edges",
        "10",
    ]);
    assert!(o.status.success());
    fs::write(f.path("other.csv"), "user,node,day,x\nu1,x,3,1\n").unwrap();
    assert_fails(
        &amplify(&[
            "stream",
            "--edges",
            f.s("other.csv"),
            "--checkpoint",
            f.s("cp.json"),
            "--resume",
        ]),
        "checkpoint",
    );
    let err = assert_fails(
        &amplify(&[
            "stream",
            "--edges",
            f.s("edges.csv"),
            "--checkpoint",
            f.s("cp.json"),
            "--resume",
            "--window",
            "trailing:3",
        ]),
        "config",
    );
    assert!(err.contains("window"), "{err}");
}

#[test]
fn usage_and_config_errors_are_single_line() {
    let f = Fixture::new();
    let o = amplify(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert_fails(&o, "usage");
    assert_fails(&amplify(&["backtest", "--edges", f.s("edges.csv")]), "usage");
    assert_fails(
        &amplify(&["score", "--edges", f.s("edges.csv"), "--window", "weekly"]),
        "config",
    );
    assert_fails(&amplify(&["generate", "--preset", "nope", "--out", f.s("")]), "config");

    fs::write(f.path("bad.toml"), "[detect]\nwindw = \"cumulative\"\n").unwrap();
    assert_fails(
        &amplify(&["--config", f.s("bad.toml"), "score", "--edges", f.s("edges.csv")]),
        "config",
    );
    assert_fails(
        &amplify(&[
            "--config",
            f.s("nonexistent.toml"),
            "score",
            "--edges",
            f.s("edges.csv"),
        ]),
        "io",
    );

    let o = amplify(&["--help"]);
    assert!(o.status.success());
}
