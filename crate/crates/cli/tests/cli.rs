use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_coflowforge"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/two_jobs.txt")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Parses a report CSV into per-job rows and the summary pair.
fn parse_report(text: &str) -> (Vec<[f64; 6]>, (f64, f64)) {
    let mut rows = Vec::new();
    let mut summary = None;
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols[0] == "summary" {
            summary = Some((cols[4].parse().unwrap(), cols[5].parse().unwrap()));
        } else {
            let mut r = [0.0; 6];
            for (i, c) in cols.iter().enumerate() {
                r[i] = c.parse().unwrap();
            }
            rows.push(r);
        }
    }
    (rows, summary.expect("summary row"))
}

#[test]
fn fifo_on_fixture_matches_hand_schedule() {
    // Job 0 runs 0->1 (4 MB) on [0, 4), then 1->0 (2 MB) on [4, 6).
    // Job 1 (0->0, 3 MB) arrives at 1, is blocked on ingress 0 until 4 and on
    // egress 0 until 6, then runs on [6, 9).
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.csv");
    let out = run(&["simulate", "--workload", s(&fixture()), "--scheduler", "fifo", "--report", s(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out).trim(), "avg_jct=7 avg_weighted_jct=11 completed=2");
    let (rows, summary) = parse_report(&fs::read_to_string(&report).unwrap());
    assert_eq!(rows, vec![[0.0, 0.0, 1.0, 6.0, 6.0, 6.0], [1.0, 1.0, 2.0, 9.0, 8.0, 16.0]]);
    assert_eq!(summary, (7.0, 11.0));
}

#[test]
fn summary_recomputes_from_rows() {
    let dir = tempfile::tempdir().unwrap();
    let wl = dir.path().join("w.txt");
    let report = dir.path().join("r.csv");
    assert!(run(&["gen", "--ports", "4", "--jobs", "30", "--mean-coflows", "3", "--seed", "5", "--out", s(&wl)]).status.success());
    for sched in ["fifo", "sebf", "wsebf", "random"] {
        let out = run(&["simulate", "--workload", s(&wl), "--scheduler", sched, "--report", s(&report)]);
        assert!(out.status.success());
        let (rows, (avg, wavg)) = parse_report(&fs::read_to_string(&report).unwrap());
        let n = rows.len() as f64;
        let mean_jct: f64 = rows.iter().map(|r| r[4]).sum::<f64>() / n;
        let mean_w: f64 = rows.iter().map(|r| r[5]).sum::<f64>() / n;
        assert!((mean_jct - avg).abs() < 1e-9);
        assert!((mean_w - wavg).abs() < 1e-9);
    }
}

#[test]
fn zero_noise_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let f = fixture();
    let base = ["simulate", "--workload", s(&f), "--scheduler", "sebf"];
    assert!(run(&[&base[..], &["--report", s(&a)]].concat()).status.success());
    assert!(run(&[&base[..], &["--noise", "0.0", "--seed", "9", "--report", s(&b)]].concat()).status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn usage_errors_exit_with_two() {
    let f = fixture();
    let unknown = run(&["simulate", "--workload", s(&f), "--scheduler", "magic"]);
    assert_eq!(unknown.status.code(), Some(2));
    let missing = run(&["simulate", "--workload", s(&f), "--scheduler", "drl"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("checkpoint"));
    assert_eq!(run(&["simulate"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let out = run(&["simulate", "--workload", "/nonexistent/w.txt", "--scheduler", "fifo"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for p in [&a, &b] {
        assert!(run(&["gen", "--jobs", "20", "--seed", "3", "--weights", "1,2", "--out", s(p)]).status.success());
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(run(&["gen", "--weights", "5", "--out", s(&a)]).status.code(), Some(2));
}

#[test]
fn ingest_split_gen_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.txt");
    fs::write(&trace, "150 10\n1 0 2 3 7 1 4:10\n2 5 1 0 2 1:3 2:4\n3 9 1 1 1 0:1\n").unwrap();
    let templates = dir.path().join("t.txt");
    assert!(run(&["ingest", "--trace", s(&trace), "--out", s(&templates)]).status.success());
    let prefix = dir.path().join("parts");
    let out = run(&["split", "--in", s(&templates), "--ratios", "1,1,1", "--seed", "1", "--out-prefix", s(&prefix)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let train = dir.path().join("parts.train");
    assert!(train.exists());
    let wl = dir.path().join("w.txt");
    let out = run(&["gen", "--templates", s(&train), "--ports", "4", "--jobs", "5", "--out", s(&wl)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let wprefix = dir.path().join("wparts");
    assert!(run(&["split", "--in", s(&wl), "--out-prefix", s(&wprefix)]).status.success());
    let total: usize = ["train", "val", "test"]
        .iter()
        .map(|n| fs::read_to_string(dir.path().join(format!("wparts.{n}"))).unwrap().lines().count() - 1)
        .sum();
    assert_eq!(total, 5);
}

#[test]
fn train_then_simulate_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let wl = dir.path().join("w.txt");
    assert!(run(&["gen", "--ports", "4", "--jobs", "12", "--mean-coflows", "2", "--seed", "1", "--out", s(&wl)]).status.success());
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"iterations": 4, "validation_every": 2, "window_jobs": 4, "port_count": 4}"#).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let curve = dir.path().join("curve.csv");
    let out = run(&[
        "train", "--workload", s(&wl), "--val", s(&wl), "--config", s(&cfg), "--out-checkpoint", s(&ckpt), "--curve", s(&curve),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(&curve).unwrap().lines().count(), 3);

    let sim = run(&["simulate", "--workload", s(&wl), "--scheduler", "drl", "--checkpoint", s(&ckpt)]);
    assert!(sim.status.success(), "{}", String::from_utf8_lossy(&sim.stderr));
    assert!(stdout(&sim).starts_with("avg_jct="));
    // A model of the wrong family is refused.
    let wrong = run(&["simulate", "--workload", s(&wl), "--scheduler", "drl_flat", "--checkpoint", s(&ckpt)]);
    assert_eq!(wrong.status.code(), Some(2));

    let drl = format!("drl={}", s(&ckpt));
    let (c1, c2) = (dir.path().join("c1.csv"), dir.path().join("c2.csv"));
    for c in [&c1, &c2] {
        let out = run(&[
            "eval", "--workload", s(&wl), "--schedulers", "fifo,sebf,drl,random", "--checkpoint", &drl, "--batches", "3",
            "--batch-size", "4", "--cdf", s(c),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(stdout(&out).lines().count(), 1 + 4 * 3);
    }
    let text = fs::read_to_string(&c1).unwrap();
    assert_eq!(text, fs::read_to_string(&c2).unwrap());
    for sched in ["fifo", "sebf", "drl", "random"] {
        let cum: Vec<f64> = text
            .lines()
            .skip(1)
            .filter(|l| l.split(',').next() == Some(sched))
            .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
            .collect();
        assert!(cum.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*cum.last().unwrap(), 1.0);
    }
}
