//! Downstream evaluation: per-frame features from a trained encoder, a
//! shallow classifier, average precision and training-fraction sweeps.

mod classifier;
mod map;
mod sweep;

pub use classifier::{
    hidden_sizes_for_fraction, train_classifier, Classifier, ClassifierConfig, EpochRecord,
};
pub use map::{average_precision, mean_average_precision, MapReport};
pub use sweep::{
    cell_seed, run_fraction_sweep, FeatureSplits, SweepCell, SweepConfig, SweepRecord, SweepResult,
};

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::DiffError;
use crate::programs::{ProgramError, ProgramSet};
use crate::scalar::Scalar;
use crate::tasks::{EmbeddingModel, TaskError};
use crate::trajectory::{extract_windows, Dataset, EdgePadding, TrajectoryError, UNLABELED};

/// Frames per subsampled training segment.
pub const SEGMENT_LEN: usize = 100;
/// Allowed relative deviation of per-class frame frequencies after subsampling.
pub const CLASS_TOLERANCE: f64 = 0.2;
const SUBSAMPLE_ATTEMPTS: usize = 64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("training labels lack classes {0:?}")]
    MissingClasses(Vec<usize>),
    #[error("no class has a positive example")]
    NoPositives,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("training fraction must be in (0, 1], got {0}")]
    Fraction(f64),
    #[error("configuration: {0}")]
    Config(String),
    #[error("feature table: {0}")]
    Table(String),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Non-learned part of a frame's feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseFeatures {
    None,
    Keypoints,
    /// Attribute program outputs on the centered window.
    Handcrafted,
    Both,
}

impl FromStr for BaseFeatures {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "keypoints" => Ok(Self::Keypoints),
            "handcrafted" => Ok(Self::Handcrafted),
            "both" => Ok(Self::Both),
            other => Err(EvalError::Config(format!("unknown feature set `{other}`"))),
        }
    }
}

/// Base features plus whether the learned embedding is appended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub base: BaseFeatures,
    pub treba: bool,
}

impl FeatureSpec {
    pub fn new(base: BaseFeatures, treba: bool) -> Self {
        Self { base, treba }
    }

    pub fn name(&self) -> String {
        let base = match self.base {
            BaseFeatures::None => "",
            BaseFeatures::Keypoints => "keypoints",
            BaseFeatures::Handcrafted => "handcrafted",
            BaseFeatures::Both => "keypoints+handcrafted",
        };
        match (base.is_empty(), self.treba) {
            (true, true) => "treba".into(),
            (true, false) => "none".into(),
            (false, true) => format!("{base}+treba"),
            (false, false) => base.into(),
        }
    }

    fn keypoints(&self) -> bool {
        matches!(self.base, BaseFeatures::Keypoints | BaseFeatures::Both)
    }

    fn handcrafted(&self) -> bool {
        matches!(self.base, BaseFeatures::Handcrafted | BaseFeatures::Both)
    }
}

impl fmt::Display for FeatureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// One feature row per frame, in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub values: Array2<f64>,
    /// Per-frame label, [`UNLABELED`] where absent.
    pub labels: Vec<i32>,
    /// Frame count of each trajectory.
    pub lengths: Vec<usize>,
}

impl FeatureTable {
    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// First row of every trajectory.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.lengths
            .iter()
            .map(|l| {
                let o = acc;
                acc += l;
                o
            })
            .collect()
    }

    /// The given rows, dropping unlabeled frames.
    pub fn select(&self, rows: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let keep: Vec<usize> = rows
            .iter()
            .copied()
            .filter(|&r| self.labels[r] != UNLABELED)
            .collect();
        let x = self.values.select(ndarray::Axis(0), &keep);
        let y = keep.iter().map(|&r| self.labels[r] as usize).collect();
        (x, y)
    }

    /// Every labeled row.
    pub fn labeled(&self) -> (Array2<f64>, Vec<usize>) {
        let all: Vec<usize> = (0..self.rows()).collect();
        self.select(&all)
    }

    /// Little-endian dump: `u32` rows, cols, trajectory count, the lengths,
    /// the `i32` labels, then row-major `f64` values.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), EvalError> {
        out.write_u32::<LittleEndian>(self.rows() as u32)?;
        out.write_u32::<LittleEndian>(self.dim() as u32)?;
        out.write_u32::<LittleEndian>(self.lengths.len() as u32)?;
        for &l in &self.lengths {
            out.write_u32::<LittleEndian>(l as u32)?;
        }
        for &l in &self.labels {
            out.write_i32::<LittleEndian>(l)?;
        }
        for &v in self.values.iter() {
            out.write_f64::<LittleEndian>(v)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, EvalError> {
        let rows = input.read_u32::<LittleEndian>()? as usize;
        let cols = input.read_u32::<LittleEndian>()? as usize;
        let n = input.read_u32::<LittleEndian>()? as usize;
        let lengths = (0..n)
            .map(|_| input.read_u32::<LittleEndian>().map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if lengths.iter().sum::<usize>() != rows {
            return Err(EvalError::Table("lengths do not add up to rows".into()));
        }
        let labels = (0..rows)
            .map(|_| input.read_i32::<LittleEndian>())
            .collect::<Result<Vec<_>, _>>()?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(input.read_f64::<LittleEndian>()?);
        }
        let values = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| EvalError::Table(e.to_string()))?;
        Ok(Self {
            values,
            labels,
            lengths,
        })
    }
}

/// Feature rows for every frame of `d`: the selected base features followed
/// by the posterior mean of the window centered on the frame. The encoder is
/// only read, never updated.
pub fn extract_features<S: Scalar>(
    d: &Dataset,
    spec: FeatureSpec,
    model: Option<&EmbeddingModel<S>>,
    programs: Option<&ProgramSet>,
    window_len: usize,
) -> Result<FeatureTable, EvalError> {
    let layout = d.layout();
    let mut dim = 0;
    if spec.keypoints() {
        dim += layout.state_dim();
    }
    if spec.handcrafted() {
        let ps = programs
            .ok_or_else(|| EvalError::Config("handcrafted features need programs".into()))?;
        ps.check_layout(layout)?;
        dim += ps.len();
    }
    if spec.treba {
        let m = model.ok_or_else(|| EvalError::Config("embedding features need a model".into()))?;
        if m.layout != layout {
            return Err(EvalError::Dimension {
                expected: m.layout.state_dim(),
                found: layout.state_dim(),
            });
        }
        if m.tvae.cfg.window_len != window_len {
            return Err(EvalError::Dimension {
                expected: m.tvae.cfg.window_len,
                found: window_len,
            });
        }
        dim += m.tvae.cfg.latent_dim;
    }
    if dim == 0 {
        return Err(EvalError::Config("feature set is empty".into()));
    }
    let mut values = Array2::zeros((d.frame_count(), dim));
    let mut labels = Vec::with_capacity(d.frame_count());
    let mut row = 0;
    for t in &d.trajectories {
        let windows = extract_windows(t, window_len, EdgePadding::Repeat)?;
        let z = match (spec.treba, model) {
            (true, Some(m)) => Some(m.encode_windows(&windows)?),
            _ => None,
        };
        for (i, w) in windows.iter().enumerate() {
            let mut out = values.row_mut(row + i);
            let mut col = 0;
            if spec.keypoints() {
                for &v in w.center().stacked() {
                    out[col] = v;
                    col += 1;
                }
            }
            if let (true, Some(ps)) = (spec.handcrafted(), programs) {
                for v in ps.evaluate_values(w)? {
                    out[col] = v;
                    col += 1;
                }
            }
            if let Some(z) = &z {
                for &v in z.row(i) {
                    out[col] = v;
                    col += 1;
                }
            }
        }
        match &t.labels {
            Some(l) => labels.extend_from_slice(l),
            None => labels.extend(std::iter::repeat_n(UNLABELED, t.len())),
        }
        row += t.len();
    }
    Ok(FeatureTable {
        values,
        labels,
        lengths: d.trajectories.iter().map(|t| t.len()).collect(),
    })
}

/// Contiguous frames `start..start + len` of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Segment {
    pub trajectory: usize,
    pub start: usize,
    pub len: usize,
}

/// Segments chosen for a reduced training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Subsample {
    pub segments: Vec<Segment>,
    pub frames: usize,
    /// Largest relative deviation of a class frequency from the full split.
    pub max_class_deviation: f64,
}

impl Subsample {
    pub fn within_tolerance(&self) -> bool {
        self.max_class_deviation <= CLASS_TOLERANCE
    }

    /// Row indices into a feature table built from the same dataset.
    pub fn rows(&self, offsets: &[usize]) -> Vec<usize> {
        self.segments
            .iter()
            .flat_map(|s| {
                let o = offsets[s.trajectory] + s.start;
                o..o + s.len
            })
            .collect()
    }

    pub fn to_dataset(&self, d: &Dataset) -> Result<Dataset, EvalError> {
        let trajectories = self
            .segments
            .iter()
            .map(|s| d.trajectories[s.trajectory].segment(s.start, s.len))
            .collect();
        Ok(Dataset::new(trajectories, d.split, d.image)?)
    }
}

fn class_counts<'a>(labels: impl Iterator<Item = &'a i32>) -> BTreeMap<i32, usize> {
    let mut h = BTreeMap::new();
    for &l in labels.filter(|&&l| l != UNLABELED) {
        *h.entry(l).or_insert(0) += 1;
    }
    h
}

fn max_deviation(full: &BTreeMap<i32, usize>, part: &BTreeMap<i32, usize>) -> f64 {
    let nf: usize = full.values().sum();
    let np: usize = part.values().sum();
    if np == 0 {
        return f64::INFINITY;
    }
    full.iter()
        .map(|(c, &n)| {
            let p = n as f64 / nf as f64;
            let q = part.get(c).copied().unwrap_or(0) as f64 / np as f64;
            (q - p).abs() / p
        })
        .fold(0.0, f64::max)
}

/// Draw whole segments of [`SEGMENT_LEN`] frames until `fraction` of the
/// frames are covered, retrying draws to keep class frequencies within
/// [`CLASS_TOLERANCE`] of the full split. When no draw meets the tolerance
/// the closest one is returned with a warning.
pub fn subsample_training_set<R: Rng + ?Sized>(
    d: &Dataset,
    fraction: f64,
    rng: &mut R,
) -> Result<Subsample, EvalError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(EvalError::Fraction(fraction));
    }
    let mut all = Vec::new();
    for (ti, t) in d.trajectories.iter().enumerate() {
        let mut start = 0;
        while start < t.len() {
            let len = SEGMENT_LEN.min(t.len() - start);
            all.push(Segment {
                trajectory: ti,
                start,
                len,
            });
            start += len;
        }
    }
    let seg_labels = |s: &Segment| {
        d.trajectories[s.trajectory]
            .labels
            .as_deref()
            .map(|l| &l[s.start..s.start + s.len])
            .unwrap_or(&[])
    };
    let full = class_counts(all.iter().flat_map(|s| seg_labels(s).iter()));
    let total = d.frame_count();
    if fraction == 1.0 {
        return Ok(Subsample {
            segments: all,
            frames: total,
            max_class_deviation: 0.0,
        });
    }
    let target = (fraction * total as f64).ceil() as usize;
    let mut best: Option<(usize, Subsample)> = None;
    for _ in 0..SUBSAMPLE_ATTEMPTS {
        let mut order = all.clone();
        order.shuffle(rng);
        let mut frames = 0;
        let mut chosen = Vec::new();
        for s in order {
            if frames >= target {
                break;
            }
            frames += s.len;
            chosen.push(s);
        }
        chosen.sort();
        let part = class_counts(chosen.iter().flat_map(|s| seg_labels(s).iter()));
        let dev = if full.is_empty() {
            0.0
        } else {
            max_deviation(&full, &part)
        };
        let missing = full.keys().filter(|c| !part.contains_key(c)).count();
        if best
            .as_ref()
            .is_none_or(|(m, b)| (missing, dev) < (*m, b.max_class_deviation))
        {
            best = Some((
                missing,
                Subsample {
                    segments: chosen,
                    frames,
                    max_class_deviation: dev,
                },
            ));
        }
        if dev <= CLASS_TOLERANCE {
            break;
        }
    }
    let (missing, best) = best.expect("at least one attempt");
    if missing > 0 {
        log::warn!("fraction {fraction}: subsample lacks {missing} classes");
    }
    if !best.within_tolerance() {
        log::warn!(
            "fraction {fraction}: closest class distribution deviates by {:.2} (tolerance {CLASS_TOLERANCE})",
            best.max_class_deviation
        );
    }
    Ok(best)
}
