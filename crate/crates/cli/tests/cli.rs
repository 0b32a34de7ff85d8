use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn nfad(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nfad"))
        .arg("--out")
        .arg(dir)
        .args(args)
        .output()
        .expect("spawn nfad")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = nfad(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

const SMALL: &[&str] = &["--epochs-nf", "3", "--epochs-clf", "3", "--seed", "7"];

fn with<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    SMALL.iter().copied().chain(extra.iter().copied()).collect()
}

#[test]
fn train_and_score_twice_gives_identical_scores() {
    let runs: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let d = dir.path();
            ok(d, &with(&["gen-data"]));
            ok(d, &with(&["train-flow"]));
            ok(d, &with(&["--anomaly-counts", "5", "train-clf"]));
            let test = d.join("test.csv");
            ok(d, &with(&["score", "--data", test.to_str().unwrap()]));
            std::fs::read(d.join("scores.csv")).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    let text = String::from_utf8(runs[0].clone()).unwrap();
    assert!(text.starts_with("id,score\n0,"));
    assert_eq!(text.lines().count(), 601);
}

#[test]
fn identity_surrogates_with_whole_space_tail_are_standard_normal() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--tail-p", "1", "sample-surrogates", "--identity-dim", "2", "--n", "20000"]);
    let text = std::fs::read_to_string(dir.path().join("surrogates.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x0,x1,label"));
    let rows: Vec<[f64; 2]> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            [f[0].parse().unwrap(), f[1].parse().unwrap()]
        })
        .collect();
    let n = rows.len() as f64;
    for j in 0..2 {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 4.0 / n.sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 4.0 * (2.0 / n).sqrt(), "var {var}");
    }
}

#[test]
fn moons_pipeline_smoke_run_is_fast_and_reports_auc() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    ok(
        dir.path(),
        &["--epochs-nf", "20", "--epochs-clf", "20", "--seeds", "0,1", "--anomaly-counts", "0,5", "experiment"],
    );
    assert!(start.elapsed().as_secs_f64() < 60.0);
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("run_id,n_anomalies,seed,auc,error"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4 + 4);
    for r in &rows[..4] {
        let auc: f64 = r.split(',').nth(3).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&auc));
    }
    assert!(rows[4].starts_with("mean,0,,"));
}

#[test]
fn density_grid_and_evaluate_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &with(&["train-flow"]));
    ok(d, &with(&["density-grid", "--resolution", "40", "--bounds", "-2,3,-1.5,2"]));
    let grid = std::fs::read_to_string(d.join("grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 40 * 40);
    let pgm = std::fs::read(d.join("grid.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n40 40\n255\n"));
    ok(d, &with(&["density-grid", "--resolution", "10", "--space", "base"]));

    ok(d, &with(&["train-clf"]));
    let out = ok(d, &with(&["evaluate"]));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("auc "));
    let m = std::fs::read_to_string(d.join("metrics.csv")).unwrap();
    assert!(m.starts_with("run_id,n_anomalies,seed,auc\nk0_s7,0,7,"));
}

fn one_line_error(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("nfad: error["), "{err}");
    err
}

#[test]
fn errors_are_single_machine_parseable_lines() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = nfad(d, &["--tail-p", "0", "--epochs-nf", "0", "experiment"]);
    assert_eq!(out.status.code(), Some(2));
    let err = one_line_error(&out);
    assert!(err.starts_with("nfad: error[invalid_argument]"));
    assert!(err.contains("tail_p") && err.contains("epochs"), "{err}");

    let err = one_line_error(&nfad(d, &["score", "--data", "missing.csv"]));
    assert!(err.contains("clf.nfad"), "{err}");

    let err = one_line_error(&nfad(d, &["--no-such-flag", "gen-data"]));
    assert!(err.starts_with("nfad: error[usage]"));

    std::fs::write(d.join("flow.nfad"), b"NFAD1 not really").unwrap();
    let err = one_line_error(&nfad(d, &["sample-surrogates"]));
    assert!(err.starts_with("nfad: error[checksum]"), "{err}");

    ok(d, &with(&["train-flow"]));
    let flow = d.join("flow.nfad");
    let err = one_line_error(&nfad(d, &["score", "--clf", flow.to_str().unwrap(), "--data", "x.csv"]));
    assert!(err.starts_with("nfad: error[kind_mismatch]"), "{err}");

    let cfg = d.join("bad.toml");
    std::fs::write(&cfg, "tail_p = 0.1\nunknown_key = 3\n").unwrap();
    let err = one_line_error(&nfad(d, &["--config", cfg.to_str().unwrap(), "gen-data"]));
    assert!(err.contains("unknown_key"), "{err}");
}

#[test]
fn csv_dataset_flows_through_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let csv = d.join("data.csv");
    let mut text = String::from("f0,f1,f2,kind\n");
    for i in 0..300 {
        let t = i as f64 * 0.37;
        let (a, b, c) = (t.sin(), (1.3 * t).cos(), (0.7 * t).sin() * 0.5);
        if i % 10 == 0 {
            text += &format!("{},{},{},1\n", 4.0 + a, -4.0 + b, c);
        } else {
            text += &format!("{a},{b},{c},0\n");
        }
    }
    std::fs::write(&csv, text).unwrap();
    let csv_s = csv.to_str().unwrap();
    let base = ["--csv", csv_s, "--label-column", "kind"];
    let args = |extra: &[&'static str]| [base.as_slice(), &with(extra)].concat();
    ok(d, &args(&["train-flow"]));
    ok(d, &args(&["train-clf"]));
    ok(d, &args(&["evaluate"]));
    ok(d, &[args(&["score", "--data"]), vec![csv_s]].concat());
    let scores = std::fs::read_to_string(d.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 301);
}
