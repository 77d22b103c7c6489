//! Configuration-driven experiments: data, program fitting, embedding
//! training, feature extraction, fraction sweeps and reports, each stage
//! checkpointed in an artifact directory.

mod report;
mod synth;

pub use report::{emit_report, write_cells, write_plot_data};
pub use synth::{generate_synthetic_dataset, MotionParams, SyntheticSpec, BEHAVIORS};

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{AugKind, AugmentPolicy};
use crate::diff::{read_checkpoint, write_checkpoint, DiffError, ParameterStore};
use crate::eval::{
    extract_features, run_fraction_sweep, BaseFeatures, ClassifierConfig, EvalError, FeatureSpec,
    FeatureSplits, FeatureTable, SweepCell, SweepConfig, SweepResult,
};
use crate::programs::{ProgramError, ProgramSet};
use crate::tasks::{
    train_embedding, train_program_approximator, ApproxConfig, ConsistencyMode, EmbeddingModel,
    LossConfig, LossWeights, StepRecord, TaskError, TrainConfig, TrainingData,
};
use crate::trajectory::{
    ingest_pose_file, read_binary_cache, window_at, write_binary_cache, Dataset, EdgePadding,
    ImageDims, TrajectoryError, Window, DEFAULT_WINDOW,
};
use crate::tvae::TvaeConfig;

/// Code version embedded in every artifact.
pub const VERSION_TAG: &str = concat!("trajembed-", env!("CARGO_PKG_VERSION"));
/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "TRJ_SEED";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: Stage,
        source: Box<HarnessError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    TomlRead(#[from] toml::de::Error),
    #[error(transparent)]
    TomlWrite(#[from] toml::ser::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Generated data; ignored when `pose_csv` is set.
    pub synthetic: SyntheticSpec,
    /// Pose CSV in pixel coordinates.
    pub pose_csv: Option<PathBuf>,
    pub image_width: f64,
    pub image_height: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticSpec::default(),
            pose_csv: None,
            image_width: 1024.0,
            image_height: 570.0,
            train_fraction: 0.6,
            val_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSpec {
    /// Comma-separated terms, e.g. `tvae,contrastive,consistency`.
    pub terms: String,
    pub weights: LossWeights,
    pub temperature: f64,
    pub augment: bool,
    pub noise_sigma: f64,
    pub aug_kinds: Vec<AugKind>,
    pub consistency_mode: ConsistencyMode,
    pub scale_attributes: bool,
}

impl Default for LossSpec {
    fn default() -> Self {
        let base = LossConfig::default();
        Self {
            terms: "tvae,contrastive,consistency".into(),
            weights: base.weights,
            temperature: base.temperature,
            augment: base.augmentation,
            noise_sigma: base.augment_policy.noise_sigma,
            aug_kinds: base.augment_policy.kinds.clone(),
            consistency_mode: base.consistency_mode,
            scale_attributes: base.scale_attributes,
        }
    }
}

impl LossSpec {
    pub fn to_config(&self) -> Result<LossConfig, HarnessError> {
        let mut cfg = LossConfig::with_terms(&self.terms)?;
        cfg.weights = self.weights;
        cfg.temperature = self.temperature;
        cfg.augmentation = self.augment;
        cfg.augment_policy = AugmentPolicy {
            kinds: self.aug_kinds.clone(),
            noise_sigma: self.noise_sigma,
            ..AugmentPolicy::default()
        };
        cfg.consistency_mode = self.consistency_mode;
        cfg.scale_attributes = self.scale_attributes;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub latent_dim: usize,
    pub hidden: usize,
    pub window_len: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            hidden: 256,
            window_len: DEFAULT_WINDOW,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSpec {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierSpec {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        let c = ClassifierConfig::default();
        Self {
            lr: c.lr,
            batch_size: c.batch_size,
            max_epochs: c.max_epochs,
            patience: c.patience,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub fractions: Vec<f64>,
    pub selections: usize,
    pub trainings: usize,
    pub features: Vec<FeatureSpec>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        let s = SweepConfig::default();
        Self {
            fractions: s.fractions,
            selections: s.selections,
            trainings: s.trainings,
            features: vec![
                FeatureSpec::new(BaseFeatures::Keypoints, false),
                FeatureSpec::new(BaseFeatures::Keypoints, true),
            ],
        }
    }
}

/// Everything needed to reproduce one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Program ids or aliases, e.g. `all_mouse`.
    pub programs: String,
    /// Training windows drawn for fitting discretizers.
    pub program_fit_windows: usize,
    pub data: DataConfig,
    pub loss: LossSpec,
    pub model: ModelSpec,
    pub train: TrainSpec,
    pub approximator: ApproxConfig,
    pub classifier: ClassifierSpec,
    pub sweep: SweepSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            programs: "all_mouse".into(),
            program_fit_windows: 5000,
            data: DataConfig::default(),
            loss: LossSpec::default(),
            model: ModelSpec::default(),
            train: TrainSpec::default(),
            approximator: ApproxConfig::default(),
            classifier: ClassifierSpec::default(),
            sweep: SweepSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, HarnessError> {
        Ok(toml::from_str(s)?)
    }

    /// Read a TOML file, then apply the [`SEED_ENV`] override.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let mut cfg = Self::from_toml_str(&fs::read_to_string(path)?)?;
        cfg.apply_env_seed()?;
        Ok(cfg)
    }

    pub fn apply_env_seed(&mut self) -> Result<(), HarnessError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| HarnessError::Config(format!("{SEED_ENV}=`{v}` is not a seed")))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn hash(&self) -> Result<String, HarnessError> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.loss.to_config()?;
        ProgramSet::from_spec(&self.programs)?;
        if self.sweep.features.is_empty() {
            return Err(HarnessError::Config("no feature sets to evaluate".into()));
        }
        if self
            .sweep
            .fractions
            .iter()
            .any(|f| !(*f > 0.0 && *f <= 1.0))
        {
            return Err(HarnessError::Config("fractions must be in (0, 1]".into()));
        }
        if self.model.window_len.is_multiple_of(2) {
            return Err(HarnessError::Config("window length must be odd".into()));
        }
        Ok(())
    }

    fn needs_embedding(&self) -> bool {
        self.sweep.features.iter().any(|f| f.treba)
    }

    fn comment(&self) -> Result<String, HarnessError> {
        Ok(format!(
            "config_hash={} version={VERSION_TAG}",
            self.hash()?
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Data,
    Programs,
    Embedding,
    Features,
    Sweep,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Data,
        Stage::Programs,
        Stage::Embedding,
        Stage::Features,
        Stage::Sweep,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Data => "data",
            Self::Programs => "programs",
            Self::Embedding => "embedding",
            Self::Features => "features",
            Self::Sweep => "sweep",
            Self::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    version: String,
    completed: Vec<Stage>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FailureRecord {
    stage: Stage,
    error: String,
    config_hash: String,
    version: String,
}

/// What a call to [`run_experiment`] did.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub config_hash: String,
    pub executed: Vec<Stage>,
    pub skipped: Vec<Stage>,
    pub train_log: Option<Vec<StepRecord>>,
    pub sweep: Option<SweepResult>,
}

/// Artifact paths inside an experiment directory.
pub mod paths {
    pub const MANIFEST: &str = "manifest.json";
    pub const CONFIG: &str = "config.toml";
    pub const FAILURE: &str = "failure.json";
    pub const LOG: &str = "run.log";
    pub const PROGRAMS: &str = "programs.json";
    pub const MODEL: &str = "model.ckpt";
    pub const TRAIN_LOG: &str = "train_log.csv";
    pub const SWEEP: &str = "sweep.csv";
}

struct Splits {
    train: Dataset,
    val: Dataset,
    test: Dataset,
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    hash: String,
    comment: String,
    log: File,
    splits: Option<Splits>,
    programs: Option<ProgramSet>,
    model: Option<EmbeddingModel<f32>>,
    train_log: Option<Vec<StepRecord>>,
    series: Option<Vec<FeatureSplits>>,
    sweep: Option<SweepResult>,
}

fn split_name(i: usize) -> &'static str {
    ["train", "val", "test"][i]
}

impl Run<'_> {
    fn note(&mut self, line: &str) -> Result<(), HarnessError> {
        log::info!("{line}");
        writeln!(self.log, "{line}")?;
        Ok(())
    }

    fn splits(&self) -> &Splits {
        self.splits.as_ref().expect("data stage ran")
    }

    fn programs(&self) -> &ProgramSet {
        self.programs.as_ref().expect("programs stage ran")
    }

    fn execute(&mut self, stage: Stage) -> Result<(), HarnessError> {
        match stage {
            Stage::Data => self.run_data(),
            Stage::Programs => self.run_programs(),
            Stage::Embedding => self.run_embedding(),
            Stage::Features => self.run_features(),
            Stage::Sweep => self.run_sweep(),
            Stage::Report => self.run_report(),
        }
    }

    fn load(&mut self, stage: Stage) -> Result<(), HarnessError> {
        match stage {
            Stage::Data => {
                let mut sets = Vec::new();
                for i in 0..3 {
                    let f = File::open(self.dir.join(format!("data/{}.trj", split_name(i))))?;
                    sets.push(read_binary_cache(BufReader::new(f))?);
                }
                let test = sets.pop().expect("three splits");
                let val = sets.pop().expect("three splits");
                let train = sets.pop().expect("three splits");
                self.splits = Some(Splits { train, val, test });
            }
            Stage::Programs => {
                let f = File::open(self.dir.join(paths::PROGRAMS))?;
                self.programs = Some(serde_json::from_reader(BufReader::new(f))?);
            }
            Stage::Embedding => {
                if self.cfg.needs_embedding() {
                    let mut model = self.new_model()?;
                    let f = File::open(self.dir.join(paths::MODEL))?;
                    let saved = read_checkpoint::<f32, _>(BufReader::new(f))?;
                    model.store.load_values_from(&saved)?;
                    self.model = Some(model);
                }
            }
            Stage::Features => {
                let mut series = Vec::new();
                for spec in &self.cfg.sweep.features {
                    let mut tables = Vec::new();
                    for i in 0..3 {
                        let path = self.feature_path(spec, i);
                        tables.push(FeatureTable::read_from(BufReader::new(File::open(path)?))?);
                    }
                    let test = tables.pop().expect("three splits");
                    let val = tables.pop().expect("three splits");
                    let train = tables.pop().expect("three splits");
                    series.push(FeatureSplits {
                        name: spec.name(),
                        train,
                        val,
                        test,
                    });
                }
                self.series = Some(series);
            }
            Stage::Sweep => {
                let f = File::open(self.dir.join(paths::SWEEP))?;
                self.sweep = Some(SweepResult::read_csv(BufReader::new(f))?);
            }
            Stage::Report => {}
        }
        Ok(())
    }

    fn run_data(&mut self) -> Result<(), HarnessError> {
        let d = &self.cfg.data;
        let raw = match &d.pose_csv {
            Some(path) => {
                ingest_pose_file(path, None, ImageDims::new(d.image_width, d.image_height)?)?
            }
            None => generate_synthetic_dataset(&d.synthetic)?,
        };
        let all = raw.normalized()?;
        let (train, val, test) =
            all.split_by_source(d.train_fraction, d.val_fraction, self.cfg.seed)?;
        fs::create_dir_all(self.dir.join("data"))?;
        for (i, set) in [&train, &val, &test].into_iter().enumerate() {
            let f = File::create(self.dir.join(format!("data/{}.trj", split_name(i))))?;
            write_binary_cache(set, f)?;
        }
        self.note(&format!(
            "data: {} train / {} val / {} test recordings, {} train frames",
            train.len(),
            val.len(),
            test.len(),
            train.frame_count()
        ))?;
        self.splits = Some(Splits { train, val, test });
        Ok(())
    }

    fn run_programs(&mut self) -> Result<(), HarnessError> {
        let mut ps = ProgramSet::from_spec(&self.cfg.programs)?;
        let train = &self.splits().train;
        ps.check_layout(train.layout())?;
        let data = TrainingData::new(train.trajectories.clone(), self.cfg.model.window_len);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(4));
        let n = self.cfg.program_fit_windows.min(data.len());
        let rows = (0..n)
            .map(|_| ps.evaluate_values(&data.window(rng.random_range(0..data.len()))))
            .collect::<Result<Vec<_>, _>>()?;
        ps.fit(&rows)?;
        let f = BufWriter::new(File::create(self.dir.join(paths::PROGRAMS))?);
        serde_json::to_writer_pretty(f, &ps)?;
        self.note(&format!("programs: fitted {} on {n} windows", ps.len()))?;
        self.programs = Some(ps);
        Ok(())
    }

    fn new_model(&self) -> Result<EmbeddingModel<f32>, HarnessError> {
        let layout = self.splits().train.layout();
        let tvae = TvaeConfig {
            state_dim: layout.state_dim(),
            window_len: self.cfg.model.window_len,
            latent_dim: self.cfg.model.latent_dim,
            hidden: self.cfg.model.hidden,
        };
        Ok(EmbeddingModel::new(
            layout,
            tvae,
            self.cfg.loss.to_config()?,
            Some(self.programs().clone()),
            self.cfg.seed.wrapping_add(1),
        )?)
    }

    fn run_embedding(&mut self) -> Result<(), HarnessError> {
        if !self.cfg.needs_embedding() {
            self.note("embedding: not needed by any feature set")?;
            return Ok(());
        }
        let mut model = self.new_model()?;
        let data = TrainingData::new(
            self.splits().train.trajectories.clone(),
            self.cfg.model.window_len,
        );
        if model.loss.consistency_mode == ConsistencyMode::Approximator
            && model.loss.has(crate::tasks::LossTerm::Consistency)
        {
            let windows: Vec<Window> = (0..data.len()).map(|i| data.window(i)).collect();
            let mut approx = Vec::new();
            for p in self.programs().programs.clone() {
                let a = train_program_approximator(&p, &windows, &self.cfg.approximator)?;
                self.note(&format!(
                    "approximator {}: relative error {:.4} after {} steps",
                    p.id, a.val_error, a.steps_trained
                ))?;
                approx.push(a);
            }
            model.attach_approximators(&approx)?;
        }
        let t = self.cfg.train;
        let cfg = TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            seed: self.cfg.seed.wrapping_add(2),
        };
        let mut lines = Vec::new();
        let history = train_embedding(&mut model, &data, &cfg, |r| {
            if r.step % 100 == 0 || r.step + 1 == cfg.steps {
                lines.push(format!("embedding: step {} loss {:.6}", r.step, r.total));
            }
        })?;
        for l in lines {
            self.note(&l)?;
        }
        let mut plain = ParameterStore::<f32>::new(0);
        for (id, name, v) in model.store.iter() {
            if !model.frozen_params().contains(&id) {
                plain.insert(name, v.clone())?;
            }
        }
        write_checkpoint(
            &plain,
            BufWriter::new(File::create(self.dir.join(paths::MODEL))?),
        )?;
        write_train_log(
            &history,
            BufWriter::new(File::create(self.dir.join(paths::TRAIN_LOG))?),
            &self.comment,
        )?;
        self.model = Some(model);
        self.train_log = Some(history);
        Ok(())
    }

    fn feature_path(&self, spec: &FeatureSpec, split: usize) -> PathBuf {
        self.dir
            .join("features")
            .join(format!("{}.{}.bin", spec.name(), split_name(split)))
    }

    fn run_features(&mut self) -> Result<(), HarnessError> {
        fs::create_dir_all(self.dir.join("features"))?;
        let mut series = Vec::new();
        for spec in self.cfg.sweep.features.clone() {
            let s = self.splits();
            let mut tables = Vec::new();
            for (i, d) in [&s.train, &s.val, &s.test].into_iter().enumerate() {
                let t = extract_features(
                    d,
                    spec,
                    self.model.as_ref(),
                    self.programs.as_ref(),
                    self.cfg.model.window_len,
                )?;
                t.write_to(BufWriter::new(File::create(self.feature_path(&spec, i))?))?;
                tables.push(t);
            }
            let test = tables.pop().expect("three splits");
            let val = tables.pop().expect("three splits");
            let train = tables.pop().expect("three splits");
            self.note(&format!(
                "features: {} with {} columns",
                spec.name(),
                train.dim()
            ))?;
            series.push(FeatureSplits {
                name: spec.name(),
                train,
                val,
                test,
            });
        }
        self.series = Some(series);
        Ok(())
    }

    fn run_sweep(&mut self) -> Result<(), HarnessError> {
        let s = self.splits();
        let classes = [&s.train, &s.val, &s.test]
            .iter()
            .map(|d| d.class_count())
            .max()
            .unwrap_or(0);
        if classes < 2 {
            return Err(HarnessError::Config(
                "sweep needs labeled data with at least two classes".into(),
            ));
        }
        let c = self.cfg.classifier;
        let cfg = SweepConfig {
            fractions: self.cfg.sweep.fractions.clone(),
            selections: self.cfg.sweep.selections,
            trainings: self.cfg.sweep.trainings,
            seed: self.cfg.seed.wrapping_add(3),
            classifier: ClassifierConfig {
                lr: c.lr,
                batch_size: c.batch_size,
                max_epochs: c.max_epochs,
                patience: c.patience,
                ..ClassifierConfig::default()
            },
        };
        let series = self.series.as_ref().expect("features stage ran");
        let result = run_fraction_sweep::<f32>(&s.train, series, classes, &cfg)?;
        result.write_csv(
            BufWriter::new(File::create(self.dir.join(paths::SWEEP))?),
            Some(&self.comment),
        )?;
        for cell in result.cells() {
            self.note(&format!(
                "sweep: fraction {} {}: MAP {:.4} +- {:.4} over {} runs",
                cell.fraction, cell.feature_set, cell.map_mean, cell.map_std, cell.runs
            ))?;
        }
        self.sweep = Some(result);
        Ok(())
    }

    fn run_report(&mut self) -> Result<(), HarnessError> {
        let sweep = self.sweep.as_ref().expect("sweep stage ran");
        emit_report(sweep, &self.dir, Some(&self.comment))?;
        self.note("report: wrote cells.csv and plot_data.csv")?;
        Ok(())
    }
}

/// `step,total,<term>...` for every training step.
pub fn write_train_log<W: Write>(
    history: &[StepRecord],
    mut out: W,
    comment: &str,
) -> Result<(), HarnessError> {
    writeln!(out, "# {comment}")?;
    let mut w = csv::Writer::from_writer(out);
    let names: Vec<String> = history
        .first()
        .map(|r| r.terms.iter().map(|t| t.0.clone()).collect())
        .unwrap_or_default();
    let mut header = vec!["step".to_string(), "total".into()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for r in history {
        let mut row = vec![r.step.to_string(), r.total.to_string()];
        row.extend(r.terms.iter().map(|t| t.1.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn read_manifest(dir: &Path) -> Option<Manifest> {
    let f = File::open(dir.join(paths::MANIFEST)).ok()?;
    serde_json::from_reader(BufReader::new(f)).ok()
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<(), HarnessError> {
    let f = BufWriter::new(File::create(dir.join(paths::MANIFEST))?);
    serde_json::to_writer_pretty(f, m)?;
    Ok(())
}

/// Run the pipeline through `until`. Stages already completed in `dir`
/// under the same config hash are loaded instead of recomputed. On failure
/// a `failure.json` record is written and earlier artifacts are kept.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    dir: &Path,
    until: Stage,
) -> Result<ExperimentOutcome, HarnessError> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let hash = cfg.hash()?;
    let mut manifest = match read_manifest(dir) {
        Some(m) if m.config_hash == hash && m.version == VERSION_TAG => m,
        _ => Manifest {
            config_hash: hash.clone(),
            version: VERSION_TAG.into(),
            completed: Vec::new(),
        },
    };
    let fresh = manifest.completed.is_empty();
    fs::write(dir.join(paths::CONFIG), cfg.to_toml()?)?;
    write_manifest(dir, &manifest)?;
    let log = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(dir.join(paths::LOG))?;
    let mut run = Run {
        cfg,
        dir: dir.to_path_buf(),
        hash: hash.clone(),
        comment: cfg.comment()?,
        log,
        splits: None,
        programs: None,
        model: None,
        train_log: None,
        series: None,
        sweep: None,
    };
    run.note(&format!("# {}", run.comment))?;
    let (mut executed, mut skipped) = (Vec::new(), Vec::new());
    for stage in Stage::ALL.into_iter().filter(|s| *s <= until) {
        let result = if manifest.completed.contains(&stage) {
            skipped.push(stage);
            run.load(stage)
        } else {
            executed.push(stage);
            run.execute(stage)
        };
        if let Err(e) = result {
            let record = FailureRecord {
                stage,
                error: e.to_string(),
                config_hash: run.hash.clone(),
                version: VERSION_TAG.into(),
            };
            let f = File::create(dir.join(paths::FAILURE))?;
            serde_json::to_writer_pretty(f, &record)?;
            return Err(HarnessError::Stage {
                stage,
                source: Box::new(e),
            });
        }
        if !manifest.completed.contains(&stage) {
            manifest.completed.push(stage);
            write_manifest(dir, &manifest)?;
        }
    }
    let failure = dir.join(paths::FAILURE);
    if failure.exists() {
        fs::remove_file(failure)?;
    }
    Ok(ExperimentOutcome {
        dir: dir.to_path_buf(),
        config_hash: hash,
        executed,
        skipped,
        train_log: run.train_log,
        sweep: run.sweep,
    })
}

/// Loss combinations of the ablation grid, in table order.
pub const ABLATION_ROWS: [&str; 10] = [
    "tvae",
    "tvae,unsup_contrastive",
    "tvae,consistency",
    "tvae,contrastive",
    "tvae,decoding",
    "tvae,contrastive,consistency",
    "tvae,decoding,consistency",
    "tvae,contrastive,decoding",
    "tvae,contrastive,decoding,consistency",
    "unsup_contrastive",
];

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub terms: String,
    pub cells: Vec<SweepCell>,
}

/// Run the full pipeline once per loss combination under `dir/<terms>` and
/// write `dir/ablation.csv` with one line per (row, fraction, feature set).
pub fn run_ablation(
    base: &ExperimentConfig,
    dir: &Path,
    rows: &[&str],
) -> Result<Vec<AblationRow>, HarnessError> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for terms in rows {
        let mut cfg = base.clone();
        cfg.loss.terms = terms.to_string();
        let label = cfg.loss.to_config()?.label();
        log::info!("ablation: {label}");
        let sub = dir.join(terms.replace(',', "+"));
        let outcome = run_experiment(&cfg, &sub, Stage::Report)?;
        let cells = outcome.sweep.map(|s| s.cells()).unwrap_or_default();
        out.push(AblationRow {
            label,
            terms: terms.to_string(),
            cells,
        });
    }
    let f = BufWriter::new(File::create(dir.join("ablation.csv"))?);
    write_ablation(&out, f, &base.comment()?)?;
    Ok(out)
}

/// `label,losses,fraction,feature_set,runs,map_mean,map_std,error_mean`.
pub fn write_ablation<W: Write>(
    rows: &[AblationRow],
    mut out: W,
    comment: &str,
) -> Result<(), HarnessError> {
    writeln!(out, "# {comment}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "label",
        "losses",
        "fraction",
        "feature_set",
        "runs",
        "map_mean",
        "map_std",
        "error_mean",
    ])?;
    for r in rows {
        for c in &r.cells {
            w.write_record([
                r.label.clone(),
                r.terms.clone(),
                c.fraction.to_string(),
                c.feature_set.clone(),
                c.runs.to_string(),
                c.map_mean.to_string(),
                c.map_std.to_string(),
                c.error_mean().to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Windows of every frame of `d`, for callers that need them in memory.
pub fn all_windows(d: &Dataset, len: usize) -> Result<Vec<Window>, HarnessError> {
    let mut out = Vec::with_capacity(d.frame_count());
    for t in &d.trajectories {
        for i in 0..t.len() {
            out.push(window_at(t, i, len, EdgePadding::Repeat)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
