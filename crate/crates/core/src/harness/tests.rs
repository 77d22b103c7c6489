use super::*;

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.synthetic.sequences = 6;
    cfg.data.synthetic.frames = 300;
    cfg.program_fit_windows = 400;
    cfg.model = ModelSpec {
        latent_dim: 4,
        hidden: 8,
        window_len: 5,
    };
    cfg.train = TrainSpec {
        steps: 3,
        batch_size: 8,
        lr: 1e-3,
    };
    cfg.classifier.max_epochs = 3;
    cfg.sweep.fractions = vec![0.5, 1.0];
    cfg.sweep.selections = 1;
    cfg.sweep.trainings = 2;
    cfg
}

#[test]
fn toml_round_trip_and_hash() {
    let cfg = tiny_config();
    let text = cfg.to_toml().unwrap();
    let back = ExperimentConfig::from_toml_str(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(other.hash().unwrap(), cfg.hash().unwrap());
    assert_eq!(cfg.hash().unwrap().len(), 64);
}

#[test]
fn partial_toml_uses_defaults() {
    let cfg = ExperimentConfig::from_toml_str(
        "seed = 3\n[loss]\nterms = \"tvae\"\n[sweep]\nfractions = [0.1]\n",
    )
    .unwrap();
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.loss.terms, "tvae");
    assert_eq!(cfg.model, ModelSpec::default());
    assert_eq!(cfg.data.synthetic.sequences, 20);
    assert_eq!(cfg.loss.to_config().unwrap().label(), "TVAE");
    assert!(
        ExperimentConfig::from_toml_str("[loss]\nterms = \"bogus\"\n")
            .unwrap()
            .validate()
            .is_err()
    );
}

#[test]
fn env_seed_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    fs::write(&path, "seed = 5\n").unwrap();
    std::env::set_var(SEED_ENV, "11");
    let cfg = ExperimentConfig::load(&path);
    std::env::remove_var(SEED_ENV);
    assert_eq!(cfg.unwrap().seed, 11);
    assert_eq!(ExperimentConfig::load(&path).unwrap().seed, 5);
}

#[test]
fn pipeline_resumes_and_is_deterministic() {
    let cfg = tiny_config();
    let a = tempfile::tempdir().unwrap();
    let first = run_experiment(&cfg, a.path(), Stage::Report).unwrap();
    assert_eq!(first.executed, Stage::ALL.to_vec());
    let sweep = first.sweep.unwrap();
    assert_eq!(sweep.cells().len(), 4);
    assert!(sweep.cells().iter().all(|c| c.runs == 2));
    let bytes = fs::read(a.path().join(paths::SWEEP)).unwrap();
    let text = String::from_utf8(bytes.clone()).unwrap();
    assert!(text.starts_with(&format!("# config_hash={}", cfg.hash().unwrap())));
    assert!(text.contains(VERSION_TAG));

    let again = run_experiment(&cfg, a.path(), Stage::Report).unwrap();
    assert!(again.executed.is_empty());
    assert_eq!(again.skipped, Stage::ALL.to_vec());
    assert_eq!(again.sweep.unwrap(), sweep);
    assert_eq!(fs::read(a.path().join(paths::SWEEP)).unwrap(), bytes);

    let b = tempfile::tempdir().unwrap();
    run_experiment(&cfg, b.path(), Stage::Report).unwrap();
    assert_eq!(fs::read(b.path().join(paths::SWEEP)).unwrap(), bytes);
    assert_eq!(
        fs::read(b.path().join("plot_data.csv")).unwrap(),
        fs::read(a.path().join("plot_data.csv")).unwrap()
    );
}

#[test]
fn partial_run_then_continue() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&cfg, dir.path(), Stage::Embedding).unwrap();
    assert_eq!(out.executed.len(), 3);
    assert_eq!(out.train_log.unwrap().len(), 3);
    assert!(dir.path().join(paths::MODEL).exists());
    let rest = run_experiment(&cfg, dir.path(), Stage::Report).unwrap();
    assert_eq!(
        rest.skipped,
        vec![Stage::Data, Stage::Programs, Stage::Embedding]
    );
    assert_eq!(rest.executed.len(), 3);
}

#[test]
fn failure_is_recorded() {
    let mut cfg = tiny_config();
    cfg.programs = "all_fly".into();
    let dir = tempfile::tempdir().unwrap();
    let err = run_experiment(&cfg, dir.path(), Stage::Report).unwrap_err();
    assert!(matches!(
        err,
        HarnessError::Stage {
            stage: Stage::Programs,
            ..
        }
    ));
    let record: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join(paths::FAILURE)).unwrap()).unwrap();
    assert_eq!(record["stage"], "programs");
    assert!(dir.path().join("data/train.trj").exists());
}

#[test]
fn keypoint_only_run_skips_training() {
    let mut cfg = tiny_config();
    cfg.sweep.features = vec![FeatureSpec::new(BaseFeatures::Handcrafted, false)];
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&cfg, dir.path(), Stage::Sweep).unwrap();
    assert!(out.train_log.is_none());
    assert!(!dir.path().join(paths::MODEL).exists());
    assert_eq!(out.sweep.unwrap().cells()[0].feature_set, "handcrafted");
}
