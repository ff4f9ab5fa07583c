//! End-to-end runs of the `rcdgcn` binary on small generated datasets.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use rcdgcn::analysis::top_count;
use rcdgcn::checkpoint::Checkpoint;

const SMALL: &str = "
run.seed = 5
run.out = \"out\"
data.dir = \"data\"
scenario.nodes = 6
scenario.days = 3
scenario.incidents = 5
model.q = 6
model.horizon = 2
model.hops = 2
model.embed_width = 1
model.width = 4
model.fcn_hidden = 16
train.lr = 1e-3
train.batch_size = 16
train.epochs = 2
train.stride = 4
train.val_stride = 2
eval.stride = 2
";

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, format!("{SMALL}{extra}")).unwrap();
    path
}

fn rcdgcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcdgcn")).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) -> String {
    let out = rcdgcn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn data_lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn simulate_writes_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "");
    let stdout = run_ok(&["simulate", "--config", s(&cfg)]);
    assert!(stdout.contains("6 nodes") && stdout.contains("864 steps") && stdout.contains("5 incidents"), "{stdout}");
    let data = dir.path().join("data");
    for f in ["nodes.csv", "edges.csv", "speeds.csv", "features_I.csv", "features_O.csv", "incidents.csv"] {
        assert!(data.join(f).is_file(), "{f} missing");
    }
    assert_eq!(data_lines(&data.join("nodes.csv")), 6);
    assert_eq!(data_lines(&data.join("speeds.csv")), 3 * 288);
    assert_eq!(data_lines(&data.join("incidents.csv")), 5);
}

#[test]
fn bundled_benchmark_config_generates_the_full_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let bundled = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/icm495-like.toml");
    let out = dir.path().join("bench");
    let stdout = run_ok(&["simulate", "--config", s(&bundled), "--out", s(&out)]);
    assert!(stdout.contains("40 nodes") && stdout.contains("17280 steps") && stdout.contains("2000 incidents"), "{stdout}");
    assert_eq!(data_lines(&out.join("incidents.csv")), 2000);
    let speeds = fs::read_to_string(out.join("speeds.csv")).unwrap();
    assert_eq!(speeds.lines().next().unwrap().split(',').count(), 40);
    let features: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.starts_with("features_"))
        .collect();
    assert_eq!(features.len(), 2);
}

#[test]
fn zero_incidents_leave_the_indicator_at_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "scenario.incidents = 0\n");
    run_ok(&["simulate", "--config", s(&cfg)]);
    let text = fs::read_to_string(dir.path().join("data/features_I.csv")).unwrap();
    assert!(text.lines().skip(1).all(|l| l.split(',').all(|v| v == "0")));
    assert_eq!(data_lines(&dir.path().join("data/incidents.csv")), 0);
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "");
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    run_ok(&["simulate", "--config", s(&cfg), "--out", s(&a)]);
    run_ok(&["simulate", "--config", s(&cfg), "--out", s(&b)]);
    run_ok(&["simulate", "--config", s(&cfg), "--out", s(&c), "--seed", "6"]);
    for f in ["speeds.csv", "features_I.csv", "features_O.csv", "incidents.csv", "nodes.csv", "edges.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(a.join("speeds.csv")).unwrap(), fs::read(c.join("speeds.csv")).unwrap());
}

fn metric(path: &Path, name: &str, scope: &str) -> f64 {
    let text = fs::read_to_string(path).unwrap();
    text.lines()
        .find_map(|l| {
            let cells: Vec<&str> = l.split(',').collect();
            (cells[0] == name && cells[1] == scope).then(|| cells[2].parse().unwrap())
        })
        .unwrap_or_else(|| panic!("{name},{scope} not in {}", path.display()))
}

#[test]
fn fcn_trains_quickly_on_tiny_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "model.variant = fcn\n");
    run_ok(&["simulate", "--config", s(&cfg)]);
    let start = Instant::now();
    run_ok(&["train", "--config", s(&cfg)]);
    assert!(start.elapsed().as_secs_f64() < 60.0);
    let curve = fs::read_to_string(dir.path().join("out/loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("epoch,train_mse,val_mse"));
    assert_eq!(curve.lines().count(), 3);
}

#[test]
fn train_then_evaluate_reproduces_validation_mse() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "");
    run_ok(&["simulate", "--config", s(&cfg)]);
    let ck = dir.path().join("out/rc.ckpt");
    run_ok(&["train", "--config", s(&cfg), "--checkpoint", s(&ck)]);
    let stdout = run_ok(&["evaluate", "--config", s(&cfg), "--checkpoint", s(&ck)]);
    assert!(stdout.contains("rcdgcn"), "{stdout}");
    let recorded: f64 = Checkpoint::<f64>::load(&ck).unwrap().meta("best_val_mse").unwrap().parse().unwrap();
    let eval = dir.path().join("out/eval_rc.csv");
    let val = metric(&eval, "mse_norm", "val");
    assert!((val - recorded).abs() <= 1e-10, "{val} vs {recorded}");
    let (mae, rmse) = (metric(&eval, "mae_mph", "all"), metric(&eval, "rmse_mph", "all"));
    assert!(mae > 0.0 && rmse >= mae);
    metric(&eval, "mae_mph", "h2");
}

#[test]
fn two_checkpoints_give_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "");
    run_ok(&["simulate", "--config", s(&cfg)]);
    let fcn_cfg = write_config(dir.path(), "fcn.toml", "model.variant = fcn\n");
    let (a, b) = (dir.path().join("out/fcn.ckpt"), dir.path().join("out/rcdgcn.ckpt"));
    run_ok(&["train", "--config", s(&fcn_cfg), "--checkpoint", s(&a)]);
    run_ok(&["train", "--config", s(&cfg), "--checkpoint", s(&b)]);
    let stdout = run_ok(&["evaluate", "--config", s(&cfg), "--checkpoint", s(&a), "--checkpoint", s(&b)]);
    let rows: Vec<&str> = stdout.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "{stdout}");
    assert!(rows[0].starts_with("fcn ") && rows[0].contains(" fcn "));
    assert!(rows[1].starts_with("rcdgcn ") && rows[1].contains(" rcdgcn "));
    assert!(dir.path().join("out/eval_fcn.csv").is_file() && dir.path().join("out/eval_rcdgcn.csv").is_file());
}

#[test]
fn input_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "");
    let out = rcdgcn(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));

    let bad = write_config(dir.path(), "bad.toml", "model.colour = blue\n");
    let out = rcdgcn(&["simulate", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.colour"));

    assert_eq!(rcdgcn(&["fly"]).status.code(), Some(2));
}

#[test]
fn node_count_mismatch_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "model.variant = fcn\n");
    run_ok(&["simulate", "--config", s(&cfg)]);
    run_ok(&["train", "--config", s(&cfg)]);
    let other = write_config(dir.path(), "other.toml", "model.variant = fcn\nscenario.nodes = 7\ndata.dir = \"data7\"\n");
    run_ok(&["simulate", "--config", s(&other)]);
    let ck = dir.path().join("out/model.ckpt");
    let out = rcdgcn(&["evaluate", "--config", s(&other), "--checkpoint", s(&ck)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("6 nodes"));
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "model.variant = fcn\ntrain.lr = 1e300\n");
    run_ok(&["simulate", "--config", s(&cfg)]);
    let out = rcdgcn(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch 1"));
}

/// Checks the flagged column against a nearest-rank recount of the scores
/// and returns the number flagged.
fn check_flagged(path: &Path, percentile: f64) -> usize {
    let text = fs::read_to_string(path).unwrap();
    let rows: Vec<(f64, bool)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            (c[1].parse().unwrap(), c[2] == "1")
        })
        .collect();
    let mut sorted: Vec<f64> = rows.iter().map(|r| r.0).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[top_count(rows.len(), percentile) - 1];
    for (score, flag) in &rows {
        assert_eq!(*flag, *score >= threshold);
    }
    rows.iter().filter(|r| r.1).count()
}

#[test]
fn analyze_emits_every_family_for_rcdgcn() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "scenario.incidents = 40\nanalysis.percentile = 80\nanalysis.margin = 3\n");
    run_ok(&["simulate", "--config", s(&cfg)]);
    run_ok(&["train", "--config", s(&cfg)]);
    let stdout = run_ok(&["analyze", "--config", s(&cfg)]);
    let out = dir.path().join("out");
    assert_eq!(data_lines(&out.join("norms_matrix.csv")), 3, "speed, I and O");
    assert_eq!(data_lines(&out.join("norms_link.csv")), 6 * 3);
    assert_eq!(data_lines(&out.join("significant_links.csv")), 6);
    assert!(check_flagged(&out.join("significant_links.csv"), 80.0) >= top_count(6, 80.0));
    let cases = data_lines(&out.join("cases_summary.csv"));
    assert!(cases > 0, "{stdout}");
    let case_files = fs::read_dir(out.join("cases")).unwrap().count();
    assert_eq!(case_files, cases);
}

#[test]
fn analyze_skips_norms_for_the_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "model.variant = rcdgcn_r\nanalysis.percentile = 50\n");
    run_ok(&["simulate", "--config", s(&cfg)]);
    run_ok(&["train", "--config", s(&cfg)]);
    let stdout = run_ok(&["analyze", "--config", s(&cfg)]);
    assert!(stdout.contains("warning"), "{stdout}");
    let out = dir.path().join("out");
    assert!(!out.join("norms_matrix.csv").exists());
    // Uniform ring-1 rows: scores are 1/deg, so ties may enlarge the set.
    assert!(check_flagged(&out.join("significant_links.csv"), 50.0) >= top_count(6, 50.0));
}

#[test]
fn predict_writes_the_next_steps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "model.variant = fcn\n");
    run_ok(&["simulate", "--config", s(&cfg)]);
    run_ok(&["train", "--config", s(&cfg)]);
    run_ok(&["predict", "--config", s(&cfg)]);
    let text = fs::read_to_string(dir.path().join("out/predictions.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,node_id,speed_mph");
    assert_eq!(lines.len(), 1 + 2 * 6);
    assert!(lines[1].starts_with("864,"));
    for l in &lines[1..] {
        let v: f64 = l.rsplit(',').next().unwrap().parse().unwrap();
        assert!(v.is_finite());
    }
}
