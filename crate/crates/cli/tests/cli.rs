use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dcmfg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcmfg")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("small.toml");
    let text = format!(
        "[problem]\nname = \"tp1\"\n[grid]\nnx = 16\nnt = 16\n[flows]\nN = 2000\nnash_paths = 500\n{extra}"
    );
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn tp3_config_solves_and_certifies() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("tp3");
    let o = dcmfg(&["solve", "--config", s(&configs().join("tp3.toml")), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let gap = fs::read_to_string(out.join("gap_report.txt")).unwrap();
    assert!(gap.contains("relative_gap"));
    assert!(out.join("manifest.toml").exists());
}

#[test]
fn cap_below_one_is_rejected_with_h1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[problem]\nname = \"tp1\"\nm_bar = 0.5\n[grid]\nnx = 16\nnt = 16\n").unwrap();
    let o = dcmfg(&["solve", "--config", s(&cfg), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("(H1)"));
}

#[test]
fn malformed_and_missing_configs_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[problem]\nname = \"tp1\"\n[grid]\nnx = 16\n").unwrap();
    assert_eq!(code(&dcmfg(&["solve", "--config", s(&cfg)])), 2);
    assert_eq!(code(&dcmfg(&["solve", "--config", s(&tmp.path().join("none.toml"))])), 2);
    assert_eq!(code(&dcmfg(&["solve"])), 2);
}

#[test]
fn output_directory_is_created() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let out = tmp.path().join("a").join("b").join("c");
    let o = dcmfg(&["solve", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["u.bin", "m.csv", "w.bin", "gap_report.txt", "diagnostics.toml", "history.csv", "manifest.toml"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let csv = fs::read_to_string(out.join("m.csv")).unwrap();
    assert!(csv.starts_with("# field: m"));
    assert!(csv.lines().any(|l| l.starts_with("# units:")));
    assert!(csv.lines().any(|l| l.starts_with("# grid: d=1 nx=16 nt=16")));
}

#[test]
fn non_convergence_exits_3_and_keeps_the_iterate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "[solver]\nmax_iters = 20\ncheck_every = 10\ntol_gap = 1e-9\n");
    let out = tmp.path().join("r");
    let o = dcmfg(&["solve", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 3);
    assert!(out.join("m.bin").exists());
    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert!(manifest.contains("exit_code = 3"));
}

#[test]
fn manifest_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let first = tmp.path().join("first");
    assert_eq!(code(&dcmfg(&["solve", "--config", s(&cfg), "--out", s(&first)])), 0);
    let second = tmp.path().join("second");
    let o = dcmfg(&["solve", "--config", s(&first.join("manifest.toml")), "--out", s(&second)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["m.bin", "u.bin", "w.bin", "beta_t.bin"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn sample_needs_a_prior_solve() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let o = dcmfg(&["sample", "--config", s(&cfg), "--out", s(&tmp.path().join("empty"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn solve_project_sample_report_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let out = tmp.path().join("run");
    assert_eq!(code(&dcmfg(&["solve", "--config", s(&cfg), "--out", s(&out)])), 0);
    let o = dcmfg(&["project", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lemma = fs::read_to_string(out.join("projection").join("interpolation_bound.csv")).unwrap();
    assert!(lemma.lines().any(|l| l == "t,max_density,bound"));
    assert_eq!(lemma.lines().filter(|l| !l.starts_with('#') && !l.starts_with('t')).count(), 9);

    let o = dcmfg(&["sample", "--config", s(&cfg), "--out", s(&out), "--threads", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ens = fs::read(out.join("flows").join("ensemble.mfgp")).unwrap();
    assert_eq!(&ens[..4], b"MFGP");
    let report = fs::read_to_string(out.join("flows").join("flows_report.txt")).unwrap();
    assert!(report.contains("violation_fraction = "));

    let tables = tmp.path().join("tables");
    let o = dcmfg(&["report", s(&out), s(&out), "--out", s(&tables)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["runs.csv", "refinement.csv", "interpolation_bound.csv"] {
        let text = fs::read_to_string(tables.join(name)).unwrap();
        let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#') && !l.starts_with("run,")).collect();
        let strip = |l: &&str| l.split_once(',').unwrap().1.to_string();
        let first: Vec<String> = rows.iter().filter(|l| l.starts_with("1,")).map(strip).collect();
        let second: Vec<String> = rows.iter().filter(|l| l.starts_with("2,")).map(strip).collect();
        assert!(!first.is_empty());
        assert_eq!(first, second, "{name}");
    }
    assert_eq!(code(&dcmfg(&["report", s(&tmp.path().join("missing"))])), 2);
}

#[test]
fn penalized_sweep_excess_decreases() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("tp2");
    let o = dcmfg(&["solve", "--config", s(&configs().join("tp2.toml")), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = dcmfg(&["report", s(&out)]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let sweep = text.split("# table: penalized_sweep").nth(1).unwrap();
    let excess: Vec<f64> = sweep
        .lines()
        .filter(|l| l.starts_with("1,"))
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(excess.len(), 4);
    assert!(excess.windows(2).all(|w| w[1] < w[0]), "{excess:?}");
}
