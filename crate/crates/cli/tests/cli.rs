use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use stefan_pinn::io::FieldTable;

fn stefan(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stefan"))
        .args(args)
        .env("STEFAN_OUT", out)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = stefan(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

const TINY: [&str; 16] = [
    "--layers", "2,6,6,1", "--iterations", "30", "--n-residual", "40", "--n-initial", "16", "--n-boundary", "8",
    "--ref-h", "1/32", "--eval-nt", "21", "--eval-nx", "21",
];

#[test]
fn exact_prints_interface_constant() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["exact", "--nx", "11"]);
    let line = stdout.lines().next().unwrap();
    let v: f64 = line.split('=').nth(1).unwrap().trim().parse().unwrap();
    assert!((v - 0.446_122_736_076_715_1).abs() < 1e-12, "{line}");
    let table = FieldTable::from_csv(&fs::read_to_string(dir.path().join("exact/exact.csv")).unwrap()).unwrap();
    assert_eq!(table.ts, vec![0.05, 0.53, 1.0]);
    assert_eq!(table.values[0], 1.0);
    assert!(dir.path().join("exact/resolved_config.txt").exists());
}

#[test]
fn fd_and_converge_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["fd", "--h", "1/32", "--seed", "3"]);
    assert!(stdout.contains("nx = 33"), "{stdout}");
    let text = fs::read_to_string(dir.path().join("fd/fd_solution.csv")).unwrap();
    let table = FieldTable::from_csv(&text).unwrap();
    assert_eq!(table.xs.len(), 33);
    assert_eq!(table.to_csv(), text);
    assert!(fs::read_to_string(dir.path().join("fd/resolved_config.txt")).unwrap().contains("seed = 3"));

    let stdout = ok(dir.path(), &["fd", "--nx", "21", "--dt", "0.01"]);
    assert!(stdout.contains("nx = 21") && stdout.contains("nt = 95"), "{stdout}");

    let stdout = ok(dir.path(), &["converge", "--steps", "1/16,1/32", "--h-min", "1/128"]);
    assert!(stdout.contains("slope"), "{stdout}");
    assert_eq!(fs::read_to_string(dir.path().join("converge/converge.csv")).unwrap().lines().count(), 3);
}

#[test]
fn training_is_reproducible_and_evaluable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--regime", "dynamic", "--dynamic-every", "10", "--seed", "5", "--dump-samples"];
    args.extend(TINY);
    ok(a.path(), &args);
    ok(b.path(), &args);
    let h1 = fs::read(a.path().join("train/history.csv")).unwrap();
    assert_eq!(h1, fs::read(b.path().join("train/history.csv")).unwrap());
    for f in ["model.ckpt", "error_field.csv", "slices.csv", "samples.csv", "resolved_config.txt"] {
        assert!(a.path().join("train").join(f).exists(), "{f}");
    }
    let cfg = fs::read_to_string(a.path().join("train/resolved_config.txt")).unwrap();
    assert!(cfg.contains("dynamic_every = 10") && cfg.contains("regime = dynamic"), "{cfg}");

    let ckpt = a.path().join("train/model.ckpt");
    let stdout = ok(
        a.path(),
        &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--ref-h", "1/32", "--eval-nt", "21", "--eval-nx", "21"],
    );
    let metric = fs::read_to_string(a.path().join("eval/metrics.txt")).unwrap();
    let e: f64 = metric.split('=').nth(1).unwrap().trim().parse().unwrap();
    // the last history row carries the same metric
    let history = String::from_utf8(h1).unwrap();
    let last: f64 = history.lines().last().unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(e, last, "{stdout}");
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let recipe = dir.path().join("recipe.cfg");
    fs::write(&recipe, "ste = 0.5\n[train]\nregime = static\nomega0 = 20\nseed = 1\nno_metrics = true\n").unwrap();
    let mut args = vec!["--config", recipe.to_str().unwrap(), "train", "--seed", "9"];
    args.extend(&TINY[..10]);
    ok(dir.path(), &args);
    let cfg = fs::read_to_string(dir.path().join("train/resolved_config.txt")).unwrap();
    assert!(cfg.contains("omega0 = 20"), "{cfg}");
    assert!(cfg.contains("seed = 9"), "{cfg}");
    assert!(!dir.path().join("train/error_field.csv").exists());
}

#[test]
fn sequential_and_ensemble_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--regime", "seq-uniform", "--seq-dt", "0.19", "--seq-budget", "400", "--seq-base-nr", "20", "--seq-incr", "10"];
    args.extend(TINY);
    ok(dir.path(), &args);
    let stages = fs::read_to_string(dir.path().join("train/stages.csv")).unwrap();
    assert_eq!(stages.lines().count(), 6);

    let mut args = vec!["ensemble", "--regime", "uniform", "--seeds", "1,2", "--threads", "2"];
    args.extend(TINY);
    let stdout = ok(dir.path(), &args);
    assert!(stdout.contains("succeeded = 2"), "{stdout}");
    assert!(dir.path().join("ensemble/seed-2/history.csv").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(stefan(dir.path(), &["train", "--regime", "adaptive"]).status.code(), Some(2));
    assert_eq!(stefan(dir.path(), &["fd", "--ste", "-1"]).status.code(), Some(2));
    assert_eq!(stefan(dir.path(), &["fd", "--bogus"]).status.code(), Some(2));
    assert_eq!(stefan(dir.path(), &["train", "--regime", "uniform", "--omega0", "3"]).status.code(), Some(2));
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "[train\n").unwrap();
    assert_eq!(stefan(dir.path(), &["--config", bad.to_str().unwrap(), "fd"]).status.code(), Some(2));
    // no sign change of the interface equation
    assert_eq!(stefan(dir.path(), &["exact", "--ste", "1", "--theta-l", "1e13"]).status.code(), Some(3));
    assert_eq!(stefan(dir.path(), &["--help"]).status.code(), Some(0));
}
