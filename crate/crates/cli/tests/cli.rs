use std::fs;
use std::path::Path;
use std::process::Command;

fn trajembed(args: &[&str], cwd: &Path) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_trajembed"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("TRJ_SEED")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &str = r#"
program_fit_windows = 400
[data]
pose_csv = "mice.csv"
[model]
latent_dim = 4
hidden = 8
window_len = 5
[train]
steps = 3
batch_size = 8
[classifier]
max_epochs = 3
[sweep]
fractions = [0.5, 1.0]
selections = 1
trainings = 1
"#;

#[test]
fn synth_sweep_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = trajembed(
        &[
            "synth-data",
            "--out",
            "mice.csv",
            "--sequences",
            "6",
            "--frames",
            "300",
        ],
        d,
    );
    assert!(out.contains("6 recordings"), "{out}");
    let header = fs::read_to_string(d.join("mice.csv")).unwrap();
    assert!(header.starts_with("source_id,frame,agent0_kp0_x"));

    fs::write(d.join("exp.toml"), TINY).unwrap();
    let out = trajembed(&["sweep", "--config", "exp.toml", "--out", "run"], d);
    assert!(out.contains("keypoints+treba"), "{out}");
    let sweep = fs::read_to_string(d.join("run/sweep.csv")).unwrap();
    assert!(sweep.starts_with("# config_hash="));

    // same config again: everything is reused
    let out = trajembed(
        &[
            "train-classifier",
            "--config",
            "exp.toml",
            "--out",
            "run",
            "--fraction",
            "0.5",
        ],
        d,
    );
    assert!(out.contains("ran []"), "{out}");
    assert!(out.contains("test MAP"), "{out}");

    trajembed(&["report", "--sweep", "run/sweep.csv", "--out", "rep"], d);
    let plot = fs::read_to_string(d.join("rep/plot_data.csv")).unwrap();
    assert_eq!(plot.lines().count(), 5);
}

#[test]
fn weights_follow_loss_order() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_trajembed"))
        .args([
            "train-embedding",
            "--out",
            "x",
            "--losses",
            "tvae,contrastive",
            "--weights",
            "1,10,1",
        ])
        .current_dir(d)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("3 weights given for 2 loss terms"));
}
