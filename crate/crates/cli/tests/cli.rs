use std::path::Path;
use std::process::{Command, Output};

use twinlab::pipeline::RunConfig;
use twinlab::regression::{write_tsed, Marking, TsedRecord};

fn twinlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twinlab")).args(args).env_remove("TWINLAB_OUTPUT").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = twinlab(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let mut c = RunConfig::study();
    c.lambda0 = 8.0;
    c.kappa = vec![0.0];
    c.epsilon_m = vec![0.1];
    c.output = dir.join("out");
    let p = dir.join("run.toml");
    std::fs::write(&p, c.to_toml()).unwrap();
    p
}

#[test]
fn tess_meets_fit_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.json");
    let stdout = ok(&["tess", "--n", "50", "--tol", "0.01", "--seed", "3", "--out", s(&out)]);
    let err: f64 = stdout
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("max_relative_volume_error="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(err <= 0.01, "{stdout}");
    assert!(stdout.contains("cells=50"));
    assert!(std::fs::read_to_string(&out).unwrap().contains("twinlab-tess/1"));
}

#[test]
fn regress_prints_coefficient_table() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("tsed.csv");
    let mut rows = Vec::new();
    for i in 0..7 {
        let e = 0.05 + 0.025 * i as f64;
        for k in [0.0, 10.0, 20.0, 30.0] {
            let w = 1073.64 * e - 2216.34 * e * e - 6.58 * e * k + if (i + k as usize) % 2 == 0 { 0.5 } else { -0.5 };
            rows.push(TsedRecord { epsilon_m: e, kappa: k, marking: Marking::Independent, w_total: w, w_lamella: None, w_matrix: None });
        }
    }
    write_tsed(&rows, std::fs::File::create(&input).unwrap()).unwrap();
    let stdout = ok(&["regress", "--input", s(&input), "--model", "m1p"]);
    let lines: Vec<&str> = stdout.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(lines[0], "coefficient,term,estimate,std_error,t_value,p_value");
    assert_eq!(lines.len(), 4);
    for (line, name) in lines[1..].iter().zip(["beta1", "beta2", "beta3"]) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 6);
        assert_eq!(f[0], name);
        assert!(f[5].split('.').nth(1).is_some_and(|d| d.len() == 4), "{line}");
    }
    let beta1: f64 = lines[1].split(',').nth(2).unwrap().parse().unwrap();
    assert!((beta1 - 1073.64).abs() < 20.0);

    let out = twinlab(&["regress", "--input", s(&input), "--model", "m1p", "--against", "m0"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("F="));
}

#[test]
fn pipeline_dry_run_lists_grid() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["pipeline", "--config", "../core/study.toml", "--output", s(&dir.path().join("x")), "--dry-run"]);
    assert!(stdout.contains("35 grid points"), "{stdout}");
    assert!(stdout.contains("ma_k0"));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn usage_and_input_errors_exit_nonzero() {
    let out = twinlab(&["tess", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    let text = RunConfig::study().to_toml().replace("twinlab-config/1", "twinlab-config/7");
    std::fs::write(&cfg, text).unwrap();
    let out = twinlab(&["pipeline", "--config", s(&cfg), "--dry-run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema"));

    let tsed = dir.path().join("tsed.csv");
    std::fs::write(&tsed, "#schema=twinlab-tsed/2\nepsilon_m,kappa,marking,w_total,w_lamella,w_matrix\n").unwrap();
    let out = twinlab(&["regress", "--input", s(&tsed)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stage_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let p = |n: &str| dir.path().join(n).display().to_string();
    let (c, tess, marks, twin, lam) = (s(&cfg), p("tess.json"), p("marks.csv"), p("twin.csv"), p("lam.csv"));
    let (sub, stats, el, tsed) = (p("sub.csv"), p("stats"), p("el.csv"), p("tsed.csv"));
    ok(&["tess", "--config", c, "--out", &tess]);
    ok(&["mark", "--config", c, "--tess", &tess, "--kappa", "10", "--out", &marks]);
    let stdout = ok(&["twin", "--config", c, "--tess", &tess, "--marks", &marks, "--epsilon-m", "0.1", "--out", &twin]);
    assert!(stdout.contains("twinned="));
    ok(&["lamellae", "--config", c, "--tess", &tess, "--twin", &twin, "--out", &lam]);
    let stack = ["--tess", &tess, "--marks", &marks, "--twin", &twin, "--lamellae", &lam];
    let with = |head: &[&str], tail: [&str; 2]| ok(&[head, &stack[..], &tail[..]].concat());
    let stdout = with(&["nest"], ["--out", &sub]);
    let vol: f64 = stdout.split_whitespace().find_map(|kv| kv.strip_prefix("volume=")).unwrap().parse().unwrap();
    assert!((vol - 1.0).abs() < 1e-6, "{stdout}");
    with(&["stats", "--config", c], ["--out-dir", &stats]);
    assert!(Path::new(&stats).join("counts.csv").exists());
    with(&["energy-synth", "--config", c, "--density", "2000"], ["--out", &el]);
    ok(&["ingest-elements", "--input", &el, "--epsilon-m", "0.1", "--kappa", "10", "--tsed", &tsed]);
    let table = std::fs::read_to_string(&tsed).unwrap();
    assert_eq!(table.lines().filter(|l| !l.starts_with('#')).count(), 2);
}
