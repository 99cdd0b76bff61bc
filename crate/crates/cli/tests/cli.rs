use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use fraccount_cli::commands::{read_counts, summarise, AUDIT_REPORT_COLUMNS, REPORT_COLUMNS};
use sha2::{Digest, Sha256};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fraccount"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

const SMALL: &str = "preset = \"basic\"\n[world]\npopulation = 300\n[rolling]\nepochs = 2\n";

/// SHA-256 of every file under `dir`, keyed by relative path.
fn tree_hashes(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, hex::encode(Sha256::digest(std::fs::read(&p).unwrap())));
            }
        }
    }
    out
}

fn header_row(path: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    lines.next().unwrap().split(',').map(str::to_string).collect()
}

#[test]
fn simulate_twice_gives_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("latvia-like.toml");
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["simulate", "--config", cfg, "--replicates", "1", "--seed", "7", "--out", d.to_str().unwrap()]);
    }
    let (ha, hb) = (tree_hashes(&a), tree_hashes(&b));
    assert!(ha.contains_key("rep0000/pd_t0.csv"));
    assert_eq!(ha, hb);
}

#[test]
fn every_output_carries_the_config_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let out = tmp.path().join("run");
    let o = out.to_str().unwrap();
    for cmd in ["simulate", "roll", "report"] {
        ok(&[cmd, "--config", &cfg, "--out", o]);
    }
    let manifest: toml::Table = std::fs::read_to_string(out.join("manifest.toml")).unwrap().parse().unwrap();
    let hash = manifest["config_hash"].as_str().unwrap().to_string();
    let outputs = manifest["outputs"].as_array().unwrap();
    assert!(outputs.len() > 10);
    for f in outputs {
        let text = std::fs::read_to_string(out.join(f.as_str().unwrap())).unwrap();
        assert_eq!(text.lines().next().unwrap(), format!("# config_hash={hash}"), "{f}");
    }
}

#[test]
fn parallel_replicates_do_not_change_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["count", "--config", &cfg, "--replicates", "4", "--jobs", "1", "--out", a.to_str().unwrap()]);
    ok(&["count", "--config", &cfg, "--replicates", "4", "--jobs", "3", "--out", b.to_str().unwrap()]);
    assert_eq!(std::fs::read(a.join("counts.csv")).unwrap(), std::fs::read(b.join("counts.csv")).unwrap());
}

#[test]
fn smoke_pipeline_under_a_minute() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("smoke.toml");
    let cfg = cfg.to_str().unwrap();
    let out = tmp.path().join("smoke");
    let o = out.to_str().unwrap();
    let start = Instant::now();
    for cmd in ["simulate", "initiate", "roll", "count", "audit", "report"] {
        ok(&[cmd, "--config", cfg, "--out", o]);
    }
    assert!(start.elapsed().as_secs_f64() < 60.0);
    for t in 0..=5 {
        assert!(out.join(format!("rep0000/model_t{t}.toml")).exists());
        assert!(out.join(format!("rep0000/counters_t{t}.csv")).exists());
    }
    let rows = read_counts(&out.join("counts.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.epoch).max(), Some(5));
}

#[test]
fn report_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let out = tmp.path().join("r");
    ok(&["report", "--config", &cfg, "--replicates", "100", "--jobs", "4", "--out", out.to_str().unwrap()]);
    assert_eq!(header_row(&out.join("report.csv")), REPORT_COLUMNS);
    assert_eq!(header_row(&out.join("audit_report.csv")), AUDIT_REPORT_COLUMNS);
    let text = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let row: Vec<&str> = text.lines().nth(2).unwrap().split(',').collect();
    assert_eq!(row[4], "100");
}

#[test]
fn fractional_beats_classifier_and_dbe_is_exact_with_perfect_components() {
    let tmp = tempfile::tempdir().unwrap();
    let body = "preset = \"basic\"\n[world]\npopulation = 1000\n[census]\nestimate_cv = 0.0\n[rolling]\nepochs = 3\ntree = false\n";
    let cfg = write_config(tmp.path(), "c.toml", body);
    let out = tmp.path().join("r");
    ok(&["count", "--config", &cfg, "--replicates", "20", "--out", out.to_str().unwrap()]);
    let s = summarise(&read_counts(&out.join("counts.csv")).unwrap());
    let total = |m: &str| s.iter().filter(|r| r.method == m).map(|r| r.rmse).sum::<f64>();
    assert!(total("fractional_theta") < total("classifier"), "{} vs {}", total("fractional_theta"), total("classifier"));
    for r in s.iter().filter(|r| r.method == "dbe") {
        assert!(r.rmse < 1e-9, "{r:?}");
    }
}

#[test]
fn compare_identical_and_mismatched_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let other = write_config(tmp.path(), "o.toml", &SMALL.replace("basic", "latvia-like"));
    let dirs: Vec<String> = ["a", "b", "c"].iter().map(|d| tmp.path().join(d).to_string_lossy().into_owned()).collect();
    ok(&["count", "--config", &cfg, "--replicates", "2", "--out", &dirs[0]]);
    ok(&["count", "--config", &cfg, "--replicates", "2", "--out", &dirs[1]]);
    ok(&["count", "--config", &other, "--replicates", "2", "--out", &dirs[2]]);

    let out = run(&["compare", &dirs[0], &dirs[1]]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let diff: Vec<usize> = header.iter().enumerate().filter(|(_, h)| h.contains("diff")).map(|(i, _)| i).collect();
    assert_eq!(diff.len(), 2);
    let mut n = 0;
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        for &i in &diff {
            assert_eq!(f[i].parse::<f64>().unwrap(), 0.0);
        }
        n += 1;
    }
    assert!(n > 0);

    let out = run(&["compare", &dirs[0], &dirs[2]]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error kind=config"));
}

#[test]
fn errors_are_single_machine_readable_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tmp.path().join("x");
    let o = o.to_str().unwrap();
    let bad = write_config(tmp.path(), "bad.toml", "[world]\npopulaton = 5\n");
    let out = run(&["simulate", "--config", &bad, "--out", o]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error kind=config msg=\""));

    let out = run(&["simulate", "--config", "/nonexistent/c.toml", "--out", o]);
    assert_eq!(out.status.code(), Some(2));

    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let out = run(&["simulate", "--config", &cfg, "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error kind=runtime"));
}

#[test]
fn seed_override_changes_outputs_and_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["initiate", "--config", &cfg, "--seed", "1", "--out", a.to_str().unwrap()]);
    ok(&["initiate", "--config", &cfg, "--seed", "2", "--out", b.to_str().unwrap()]);
    assert_ne!(std::fs::read(a.join("rep0000/counters_t0.csv")).unwrap(), std::fs::read(b.join("rep0000/counters_t0.csv")).unwrap());
    // reusing a directory with a different config is refused
    let out = run(&["initiate", "--config", &cfg, "--seed", "3", "--out", a.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}
