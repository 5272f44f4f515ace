use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use vdt::trainer::Checkpoint;
use vdt::{DatasetSpec, NetworkConfig, TrainConfig, ValueNetwork};

fn vdt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vdt")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

const TINY: &str = r#"{
    "T": 12, "H": 4, "b": 16, "K": 2, "pool_size": 300,
    "network": {"hidden_dims": [16, 16], "time_embed_dim": 8}
}"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn train_tiny(dir: &Path, out: &str, extra: &[&str]) -> (Output, PathBuf) {
    let cfg = write_config(dir, "tiny.json", TINY);
    let out_dir = dir.join(out);
    let mut args = vec!["train", "--config", p(&cfg), "--out", p(&out_dir), "--eval-n", "200"];
    args.extend_from_slice(extra);
    (vdt(&args), out_dir)
}

#[test]
fn train_writes_three_outputs_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (first, a) = train_tiny(tmp.path(), "a", &["--seed", "7"]);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    for f in ["checkpoint.json", "train_log.csv", "metrics.json"] {
        assert!(a.join(f).is_file(), "{f} missing");
    }
    let (second, b) = train_tiny(tmp.path(), "b", &["--seed", "7", "--workers", "1"]);
    assert_eq!(code(&second), 0);
    assert_eq!(fs::read(a.join("train_log.csv")).unwrap(), fs::read(b.join("train_log.csv")).unwrap());
    assert_eq!(fs::read(a.join("checkpoint.json")).unwrap(), fs::read(b.join("checkpoint.json")).unwrap());
    assert_eq!(fs::read(a.join("metrics.json")).unwrap(), fs::read(b.join("metrics.json")).unwrap());
    let log = fs::read_to_string(a.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 13);
}

#[test]
fn bad_config_values_exit_2_naming_the_field() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "neg.json", r#"{"b": -4}"#);
    let out = vdt(&["train", "--config", p(&cfg), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("b"), "{}", stderr(&out));

    let cfg = write_config(tmp.path(), "unknown.json", r#"{"bogus_key": 1}"#);
    let out = vdt(&["train", "--config", p(&cfg), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bogus_key"), "{}", stderr(&out));
}

#[test]
fn divergence_exits_3_and_keeps_the_last_good_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "wild.json",
        r#"{"T": 50, "H": 4, "b": 8, "pool_size": 100, "primal_stepsize": 1e200, "learning_rate": 1e150}"#,
    );
    let out_dir = tmp.path().join("o");
    let out = vdt(&["train", "--config", p(&cfg), "--out", p(&out_dir)]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(out_dir.join("checkpoint.last_good.json").is_file());
    assert!(!out_dir.join("metrics.json").exists());
    assert!(!out_dir.join("train_log.csv").exists());
}

#[test]
fn generate_writes_samples_trajectories_and_figures() {
    let tmp = TempDir::new().unwrap();
    let (trained, dir) = train_tiny(tmp.path(), "run", &[]);
    assert_eq!(code(&trained), 0, "{}", stderr(&trained));
    let ckpt = dir.join("checkpoint.json");
    let samples = tmp.path().join("samples.csv");
    let traj = tmp.path().join("traj.csv");
    let svg = tmp.path().join("samples.svg");
    let out = vdt(&[
        "generate", "--checkpoint", p(&ckpt), "--steps", "10", "--n", "10000", "--out", p(&samples),
        "--trajectories", p(&traj), "--svg", p(&svg),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(&samples).unwrap();
    assert_eq!(text.lines().next(), Some("x0,x1"));
    assert_eq!(text.lines().count(), 10_001);
    assert_eq!(fs::read_to_string(&traj).unwrap().lines().count(), 1 + 10_000 * 12);
    let figure = fs::read_to_string(&svg).unwrap();
    assert_eq!(figure.matches("<circle").count(), 20_000);
    assert!(stdout(&out).contains("w2_to_moons"));

    let again = tmp.path().join("again.csv");
    vdt(&["generate", "--checkpoint", p(&ckpt), "--steps", "10", "--n", "10000", "--out", p(&again)]);
    assert_eq!(fs::read(&samples).unwrap(), fs::read(&again).unwrap());

    let back = tmp.path().join("back.csv");
    let out = vdt(&["generate", "--checkpoint", p(&ckpt), "--steps", "4", "--n", "500", "--out", p(&back), "--reverse"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("w2_to_gaussian"), "{}", stdout(&out));

    let out = vdt(&["generate", "--checkpoint", p(&ckpt), "--steps", "4", "--n", "5", "--out", p(&back), "--guidance", "2.0"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn eval_reports_finite_metrics_and_rejects_bad_inputs() {
    let tmp = TempDir::new().unwrap();
    let (trained, dir) = train_tiny(tmp.path(), "run", &[]);
    assert_eq!(code(&trained), 0);
    let ckpt = dir.join("checkpoint.json");
    let report = tmp.path().join("m.json");
    let out = vdt(&["eval", "--checkpoint", p(&ckpt), "--dataset", "moons", "--steps", "4", "--n", "300", "--out", p(&report)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["w2_to_target", "path_energy_mean", "oracle_path_energy", "bellman_residual", "dual_feasibility_gap"] {
        assert!(json[key].as_f64().is_some_and(f64::is_finite), "{key}");
    }
    assert!(stdout(&out).contains("w2_to_target") && stdout(&out).contains("path_energy_mean"));

    let missing = tmp.path().join("nope.json");
    let out = vdt(&["eval", "--checkpoint", p(&missing), "--dataset", "moons", "--steps", "4", "--out", p(&report)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nope.json"));

    let out = vdt(&["eval", "--checkpoint", p(&ckpt), "--dataset", "bogus", "--steps", "4", "--out", p(&report)]);
    assert_eq!(code(&out), 2);
}

/// A hand-built checkpoint whose value is the exact optimum for moving
/// `(0, 0)` to `(3, 0)`: `V(x) = -3 x_0` at every time.
#[test]
fn eval_of_analytic_point_mass_checkpoint_meets_the_oracle() {
    let tmp = TempDir::new().unwrap();
    let net_cfg = NetworkConfig { hidden_dims: vec![], time_embed_dim: 2, ..Default::default() };
    let mut net = ValueNetwork::<f64>::zeros(net_cfg.clone()).unwrap();
    net.params_mut()[0] = -3.0;
    let config = TrainConfig {
        horizon: 4,
        batch_size: 8,
        source: DatasetSpec::Point(vec![0.0, 0.0]),
        target: DatasetSpec::Point(vec![3.0, 0.0]),
        network: net_cfg,
        ..TrainConfig::default()
    };
    let ckpt = tmp.path().join("analytic.json");
    fs::write(&ckpt, Checkpoint::new(&net, &config, 0, None).to_json()).unwrap();
    for steps in ["1", "4", "9"] {
        let report = tmp.path().join("m.json");
        let out = vdt(&[
            "eval", "--checkpoint", p(&ckpt), "--dataset", "point:3,0", "--steps", steps, "--n", "64", "--out", p(&report),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
        let (pe, oracle) = (json["path_energy_mean"].as_f64().unwrap(), json["oracle_path_energy"].as_f64().unwrap());
        assert!((pe - oracle).abs() <= 1e-6, "{pe} vs {oracle}");
        assert!((oracle - 4.5).abs() <= 1e-12);
        assert!(json["w2_to_target"].as_f64().unwrap() <= 1e-9);
    }
}

#[test]
fn dataset_export_is_deterministic_and_labeled() {
    let tmp = TempDir::new().unwrap();
    let (a, b, svg) = (tmp.path().join("a.csv"), tmp.path().join("b.csv"), tmp.path().join("a.svg"));
    for (out, fig) in [(&a, Some(&svg)), (&b, None)] {
        let mut args = vec!["dataset", "--name", "8gauss", "--n", "800", "--seed", "1", "--out", p(out)];
        if let Some(f) = fig {
            args.extend_from_slice(&["--svg", p(f)]);
        }
        assert_eq!(code(&vdt(&args)), 0);
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().next(), Some("x0,x1,label"));
    assert_eq!(text.lines().count(), 801);
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert!(fs::read_to_string(&svg).unwrap().starts_with("<svg"));

    let out = vdt(&["dataset", "--name", "bogus", "--n", "5", "--out", p(&a)]);
    assert_eq!(code(&out), 2);
    assert_eq!(fs::read_to_string(&a).unwrap(), text, "failed run must not touch existing output");
}
