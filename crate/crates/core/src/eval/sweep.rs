//! Classifier MAP across training fractions, selections and retrainings.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classifier::{hidden_sizes_for_fraction, train_classifier, ClassifierConfig};
use super::map::mean_average_precision;
use super::{subsample_training_set, EvalError, FeatureTable};
use crate::scalar::Scalar;
use crate::trajectory::Dataset;

/// Train, validation and test features of one series, built from the same
/// splits with the same feature spec.
#[derive(Debug, Clone)]
pub struct FeatureSplits {
    pub name: String,
    pub train: FeatureTable,
    pub val: FeatureTable,
    pub test: FeatureTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub fractions: Vec<f64>,
    /// Random training-set selections per fraction.
    pub selections: usize,
    /// Classifier trainings per selection.
    pub trainings: usize,
    pub seed: u64,
    /// Template; layer widths and seed are set per cell.
    pub classifier: ClassifierConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            fractions: vec![0.01, 0.02, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0],
            selections: 3,
            trainings: 3,
            seed: 0,
            classifier: ClassifierConfig::default(),
        }
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of a sweep cell, from its coordinates only. `training = None`
/// gives the selection seed shared by every series.
pub fn cell_seed(base: u64, fraction: f64, selection: usize, training: Option<usize>) -> u64 {
    let mut s = mix(base ^ mix(fraction.to_bits()));
    s = mix(s ^ selection as u64);
    match training {
        Some(t) => mix(s ^ mix(t as u64 + 1)),
        None => s,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub fraction: f64,
    pub feature_set: String,
    pub seed: u64,
    pub map: f64,
    pub per_class_ap: Vec<Option<f64>>,
}

/// Mean and sample standard deviation of MAP over one cell's runs.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub fraction: f64,
    pub feature_set: String,
    pub runs: usize,
    pub map_mean: f64,
    pub map_std: f64,
}

impl SweepCell {
    pub fn error_mean(&self) -> f64 {
        1.0 - self.map_mean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub classes: usize,
    pub records: Vec<SweepRecord>,
}

impl SweepResult {
    /// Cells in order of first appearance.
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut keys: Vec<(f64, &str)> = Vec::new();
        for r in &self.records {
            if !keys
                .iter()
                .any(|k| k.0 == r.fraction && k.1 == r.feature_set)
            {
                keys.push((r.fraction, &r.feature_set));
            }
        }
        keys.into_iter()
            .map(|(f, name)| {
                let maps: Vec<f64> = self
                    .records
                    .iter()
                    .filter(|r| r.fraction == f && r.feature_set == name)
                    .map(|r| r.map)
                    .collect();
                let n = maps.len() as f64;
                let mean = maps.iter().sum::<f64>() / n;
                let std = if maps.len() > 1 {
                    (maps.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                SweepCell {
                    fraction: f,
                    feature_set: name.to_string(),
                    runs: maps.len(),
                    map_mean: mean,
                    map_std: std,
                }
            })
            .collect()
    }

    pub fn cell(&self, fraction: f64, feature_set: &str) -> Option<SweepCell> {
        self.cells()
            .into_iter()
            .find(|c| c.fraction == fraction && c.feature_set == feature_set)
    }

    /// `fraction,feature_set,seed,map,ap_0,...`, preceded by `# comment`
    /// when given.
    pub fn write_csv<W: Write>(&self, mut out: W, comment: Option<&str>) -> Result<(), EvalError> {
        if let Some(c) = comment {
            writeln!(out, "# {c}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![
            "fraction".to_string(),
            "feature_set".into(),
            "seed".into(),
            "map".into(),
        ];
        header.extend((0..self.classes).map(|c| format!("ap_{c}")));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.fraction.to_string(),
                r.feature_set.clone(),
                r.seed.to_string(),
                r.map.to_string(),
            ];
            row.extend(
                r.per_class_ap
                    .iter()
                    .map(|a| a.map_or(String::new(), |v| v.to_string())),
            );
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, EvalError> {
        let mut rd = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(input);
        let classes = rd.headers()?.len().saturating_sub(4);
        let bad = |what: &str, v: &str| EvalError::Table(format!("bad {what} `{v}`"));
        let mut records = Vec::new();
        for row in rd.records() {
            let row = row?;
            let num = |i: usize, what: &str| -> Result<f64, EvalError> {
                row[i].parse().map_err(|_| bad(what, &row[i]))
            };
            let per_class_ap = (0..classes)
                .map(|c| {
                    let v = &row[4 + c];
                    if v.is_empty() {
                        Ok(None)
                    } else {
                        v.parse().map(Some).map_err(|_| bad("ap", v))
                    }
                })
                .collect::<Result<_, _>>()?;
            records.push(SweepRecord {
                fraction: num(0, "fraction")?,
                feature_set: row[1].to_string(),
                seed: row[2].parse().map_err(|_| bad("seed", &row[2]))?,
                map: num(3, "map")?,
                per_class_ap,
            });
        }
        Ok(Self { classes, records })
    }
}

/// For every fraction and selection, draw one training subset shared by all
/// series, then train `trainings` classifiers per series and score them on
/// the test split. Seeds depend only on cell coordinates.
pub fn run_fraction_sweep<S: Scalar>(
    train: &Dataset,
    series: &[FeatureSplits],
    classes: usize,
    cfg: &SweepConfig,
) -> Result<SweepResult, EvalError> {
    let lengths: Vec<usize> = train.trajectories.iter().map(|t| t.len()).collect();
    for s in series {
        if s.train.lengths != lengths {
            return Err(EvalError::Table(format!(
                "`{}` training features do not match the training split",
                s.name
            )));
        }
    }
    let prepared: Vec<_> = series
        .iter()
        .map(|s| (s.val.labeled(), s.test.labeled()))
        .collect();
    let mut records = Vec::new();
    for &fraction in &cfg.fractions {
        for sel in 0..cfg.selections {
            let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(cfg.seed, fraction, sel, None));
            let sub = subsample_training_set(train, fraction, &mut rng)?;
            for (s, ((vx, vy), (tx, ty))) in series.iter().zip(&prepared) {
                let rows = sub.rows(&s.train.offsets());
                let (x, y) = s.train.select(&rows);
                for tr in 0..cfg.trainings {
                    let seed = cell_seed(cfg.seed, fraction, sel, Some(tr));
                    let ccfg = ClassifierConfig {
                        hidden: hidden_sizes_for_fraction(fraction),
                        seed,
                        ..cfg.classifier
                    };
                    let (model, _) = train_classifier::<S>(&x, &y, classes, Some((vx, vy)), &ccfg)?;
                    let report = mean_average_precision(&model.predict_scores(tx)?, ty)?;
                    log::info!(
                        "fraction {fraction} {} selection {sel} run {tr}: MAP {:.4}",
                        s.name,
                        report.mean
                    );
                    records.push(SweepRecord {
                        fraction,
                        feature_set: s.name.clone(),
                        seed,
                        map: report.mean,
                        per_class_ap: report.per_class,
                    });
                }
            }
        }
    }
    Ok(SweepResult { classes, records })
}
