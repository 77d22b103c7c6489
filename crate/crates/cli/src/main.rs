use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use trajembed::augment::AugKind;
use trajembed::eval::{
    cell_seed, hidden_sizes_for_fraction, mean_average_precision, subsample_training_set,
    train_classifier, BaseFeatures, ClassifierConfig, FeatureSpec, FeatureTable, SweepResult,
};
use trajembed::harness::{
    emit_report, generate_synthetic_dataset, paths, run_ablation, run_experiment, ExperimentConfig,
    Stage, SyntheticSpec, ABLATION_ROWS,
};
use trajembed::trajectory::{read_binary_cache, write_pose_csv};

#[derive(Parser)]
#[command(
    name = "trajembed",
    version,
    about = "Trajectory embeddings with programmed decoder tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled pose CSV.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        sequences: usize,
        #[arg(long, default_value_t = 1000)]
        frames: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        label_noise: f64,
    },
    /// Run data, program fitting and embedding training.
    TrainEmbedding(Common),
    /// Run through feature extraction.
    ExtractFeatures(Common),
    /// Train one classifier on a training fraction and print its test MAP.
    TrainClassifier {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
    },
    /// Fraction sweep for the selected feature sets.
    Evaluate(Common),
    /// Full pipeline with the feature sets of the config.
    Sweep(Common),
    /// Run the pipeline once per loss combination of the ablation grid.
    AblateLosses(Common),
    /// Rebuild cells.csv and plot_data.csv from a sweep CSV.
    Report {
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
    Both,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Pose CSV to use instead of synthetic data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Program ids or aliases, comma separated.
    #[arg(long)]
    programs: Option<String>,
    /// Loss terms, e.g. `tvae,contrastive,consistency`.
    #[arg(long)]
    losses: Option<String>,
    /// Loss weights, either in `--losses` order (`1,10,1`) or as `name=value` pairs.
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, value_enum)]
    augment: Option<Switch>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Augmentation kinds: rotation, reflection, translation, noise.
    #[arg(long)]
    aug_kinds: Option<String>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Training fractions, comma separated.
    #[arg(long)]
    fractions: Option<String>,
    /// Base feature sets: keypoints, handcrafted, both, none.
    #[arg(long)]
    features: Option<String>,
    /// Append the learned embedding: on, off or both.
    #[arg(long, value_enum)]
    treba: Option<Switch>,
}

fn parse_list<T>(s: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(f)
        .collect()
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, String> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).map_err(|e| e.to_string())?,
            None => {
                let mut c = ExperimentConfig::default();
                c.apply_env_seed().map_err(|e| e.to_string())?;
                c
            }
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.data {
            cfg.data.pose_csv = Some(d.clone());
        }
        if let Some(p) = &self.programs {
            cfg.programs = p.clone();
        }
        if let Some(l) = &self.losses {
            cfg.loss.terms = l.clone();
        }
        if let Some(w) = &self.weights {
            let items = parse_list(w, |s| Ok(s.to_string()))?;
            let terms = parse_list(&cfg.loss.terms, |s| Ok(s.to_string()))?;
            let positional = items.iter().all(|s| !s.contains('='));
            if positional && items.len() != terms.len() {
                return Err(format!(
                    "{} weights given for {} loss terms",
                    items.len(),
                    terms.len()
                ));
            }
            for (i, item) in items.iter().enumerate() {
                let (name, value) = if positional {
                    (terms[i].as_str(), item.as_str())
                } else {
                    item.split_once('=')
                        .ok_or_else(|| format!("weight `{item}` is not name=value"))?
                };
                let v: f64 = value
                    .parse()
                    .map_err(|_| format!("weight `{item}` is not a number"))?;
                let w = &mut cfg.loss.weights;
                match name {
                    "tvae" => w.tvae = v,
                    "consistency" | "consist" => w.consistency = v,
                    "contrastive" | "contrast" | "unsup_contrastive" | "unsup_contrast" => {
                        w.contrastive = v
                    }
                    "decoding" | "decode" => w.decoding = v,
                    other => return Err(format!("unknown loss `{other}` in --weights")),
                }
            }
        }
        if let Some(t) = self.temperature {
            cfg.loss.temperature = t;
        }
        if let Some(a) = self.augment {
            cfg.loss.augment = !matches!(a, Switch::Off);
        }
        if let Some(s) = self.noise_sigma {
            cfg.loss.noise_sigma = s;
        }
        if let Some(k) = &self.aug_kinds {
            cfg.loss.aug_kinds = parse_list(k, |s| {
                AugKind::parse(s).ok_or_else(|| format!("unknown augmentation `{s}`"))
            })?;
        }
        if let Some(v) = self.latent_dim {
            cfg.model.latent_dim = v;
        }
        if let Some(v) = self.hidden {
            cfg.model.hidden = v;
        }
        if let Some(v) = self.batch {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = self.steps {
            cfg.train.steps = v;
        }
        if let Some(f) = &self.fractions {
            cfg.sweep.fractions =
                parse_list(f, |s| s.parse().map_err(|_| format!("bad fraction `{s}`")))?;
        }
        if self.features.is_some() || self.treba.is_some() {
            let bases = match &self.features {
                Some(f) => parse_list(f, |s| s.parse::<BaseFeatures>().map_err(|e| e.to_string()))?,
                None => vec![BaseFeatures::Keypoints],
            };
            let trebas: &[bool] = match self.treba.unwrap_or(Switch::Both) {
                Switch::On => &[true],
                Switch::Off => &[false],
                Switch::Both => &[false, true],
            };
            cfg.sweep.features = bases
                .iter()
                .flat_map(|&b| trebas.iter().map(move |&t| FeatureSpec::new(b, t)))
                .filter(|s| s.base != BaseFeatures::None || s.treba)
                .collect();
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

fn run_stage(common: &Common, until: Stage) -> Result<ExperimentConfig, String> {
    let cfg = common.resolve()?;
    let out = run_experiment(&cfg, &common.out, until).map_err(|e| e.to_string())?;
    println!(
        "config {} in {}: ran {:?}, reused {:?}",
        &out.config_hash[..12],
        out.dir.display(),
        out.executed,
        out.skipped
    );
    if let Some(log) = &out.train_log {
        if let Some(last) = log.last() {
            println!(
                "final training loss {:.6} after {} steps",
                last.total,
                log.len()
            );
        }
    }
    if let Some(sweep) = &out.sweep {
        for c in sweep.cells() {
            println!(
                "{:>6} {:<24} MAP {:.4} +- {:.4} ({} runs)",
                c.fraction, c.feature_set, c.map_mean, c.map_std, c.runs
            );
        }
    }
    Ok(cfg)
}

fn read_table(path: &Path) -> Result<FeatureTable, String> {
    let f = File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    FeatureTable::read_from(BufReader::new(f)).map_err(|e| e.to_string())
}

fn train_one(common: &Common, fraction: f64) -> Result<(), String> {
    let cfg = run_stage(common, Stage::Features)?;
    let dir = &common.out;
    let train_file = File::open(dir.join("data/train.trj")).map_err(|e| e.to_string())?;
    let train = read_binary_cache(BufReader::new(train_file)).map_err(|e| e.to_string())?;
    let seed = cfg.seed.wrapping_add(3);
    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(seed, fraction, 0, None));
    let sub = subsample_training_set(&train, fraction, &mut rng).map_err(|e| e.to_string())?;
    for spec in &cfg.sweep.features {
        let load =
            |split: &str| read_table(&dir.join(format!("features/{}.{split}.bin", spec.name())));
        let (tr, va, te) = (load("train")?, load("val")?, load("test")?);
        let classes = [&tr, &va, &te]
            .iter()
            .flat_map(|t| t.labels.iter())
            .copied()
            .max()
            .unwrap_or(0)
            .max(0) as usize
            + 1;
        let (x, y) = tr.select(&sub.rows(&tr.offsets()));
        let (vx, vy) = va.labeled();
        let (tx, ty) = te.labeled();
        let ccfg = ClassifierConfig {
            hidden: hidden_sizes_for_fraction(fraction),
            lr: cfg.classifier.lr,
            batch_size: cfg.classifier.batch_size,
            max_epochs: cfg.classifier.max_epochs,
            patience: cfg.classifier.patience,
            seed: cell_seed(seed, fraction, 0, Some(0)),
        };
        let (model, log) = train_classifier::<f32>(&x, &y, classes, Some((&vx, &vy)), &ccfg)
            .map_err(|e| e.to_string())?;
        let scores = model.predict_scores(&tx).map_err(|e| e.to_string())?;
        let report = mean_average_precision(&scores, &ty).map_err(|e| e.to_string())?;
        let aps: Vec<String> = report
            .per_class
            .iter()
            .map(|a| a.map_or("-".into(), |v| format!("{v:.4}")))
            .collect();
        println!(
            "{}: {} training frames, {} epochs, test MAP {:.4}, per class [{}]",
            spec.name(),
            y.len(),
            log.len(),
            report.mean,
            aps.join(", ")
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::SynthData {
            out,
            sequences,
            frames,
            seed,
            label_noise,
        } => {
            let spec = SyntheticSpec {
                sequences,
                frames,
                seed,
                label_noise,
                ..SyntheticSpec::default()
            };
            let d = generate_synthetic_dataset(&spec).map_err(|e| e.to_string())?;
            let f = File::create(&out).map_err(|e| format!("{}: {e}", out.display()))?;
            write_pose_csv(&d, BufWriter::new(f)).map_err(|e| e.to_string())?;
            println!(
                "wrote {} recordings, {} frames to {}",
                d.len(),
                d.frame_count(),
                out.display()
            );
        }
        Command::TrainEmbedding(c) => {
            run_stage(&c, Stage::Embedding)?;
        }
        Command::ExtractFeatures(c) => {
            run_stage(&c, Stage::Features)?;
        }
        Command::TrainClassifier { common, fraction } => train_one(&common, fraction)?,
        Command::Evaluate(c) | Command::Sweep(c) => {
            run_stage(&c, Stage::Report)?;
            println!("sweep written to {}", c.out.join(paths::SWEEP).display());
        }
        Command::AblateLosses(c) => {
            let cfg = c.resolve()?;
            let rows = run_ablation(&cfg, &c.out, &ABLATION_ROWS).map_err(|e| e.to_string())?;
            for r in &rows {
                for cell in &r.cells {
                    println!(
                        "{:<32} {:>6} {:<20} MAP {:.4} +- {:.4}",
                        r.label, cell.fraction, cell.feature_set, cell.map_mean, cell.map_std
                    );
                }
            }
            println!("grid written to {}", c.out.join("ablation.csv").display());
        }
        Command::Report { sweep, out } => {
            let f = File::open(&sweep).map_err(|e| format!("{}: {e}", sweep.display()))?;
            let result = SweepResult::read_csv(BufReader::new(f)).map_err(|e| e.to_string())?;
            let (cells, plot) = emit_report(&result, &out, None).map_err(|e| e.to_string())?;
            println!("wrote {} and {}", cells.display(), plot.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
