//! Pose trajectories: per-frame stacked keypoints, normalization, windowing
//! and dataset splits.

mod io;

pub use io::{
    ingest_pose_file, read_binary_cache, read_pose_csv, write_binary_cache, write_pose_csv,
    PoseSchema, BINARY_MAGIC,
};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default window length: ten frames either side of the center.
pub const DEFAULT_WINDOW: usize = 21;

/// Label value for frames without an annotation.
pub const UNLABELED: i32 = -1;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("trajectory `{0}` is already normalized")]
    AlreadyNormalized(String),
    #[error("trajectory `{0}` is not normalized")]
    NotNormalized(String),
    #[error("image dimensions must be positive, got {0} x {1}")]
    BadImageDims(f64, f64),
    #[error("window length must be odd and positive, got {0}")]
    EvenWindow(usize),
    #[error("empty trajectory `{0}`")]
    Empty(String),
    #[error("binary cache: {0}")]
    Binary(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
}

impl Keypoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Agent and keypoint counts shared by every frame of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Layout {
    pub agents: usize,
    pub keypoints: usize,
}

impl Layout {
    pub const fn new(agents: usize, keypoints: usize) -> Self {
        Self { agents, keypoints }
    }

    /// Length of the stacked state vector, `2 * agents * keypoints`.
    pub const fn state_dim(&self) -> usize {
        2 * self.agents * self.keypoints
    }

    pub const fn offset(&self, agent: usize, keypoint: usize) -> usize {
        2 * (agent * self.keypoints + keypoint)
    }
}

/// Keypoints of all agents at one time step, stacked as
/// `(agent, keypoint, x-then-y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameState {
    layout: Layout,
    coords: Vec<f64>,
}

impl FrameState {
    pub fn from_agents(agents: &[Vec<Keypoint>]) -> Result<Self, TrajectoryError> {
        let k = agents.first().map_or(0, |a| a.len());
        if agents.is_empty() || k == 0 {
            return Err(TrajectoryError::Schema(
                "need at least one agent and keypoint".into(),
            ));
        }
        if agents.iter().any(|a| a.len() != k) {
            return Err(TrajectoryError::Schema(
                "agents have differing keypoint counts".into(),
            ));
        }
        let coords = agents.iter().flatten().flat_map(|p| [p.x, p.y]).collect();
        Ok(Self {
            layout: Layout::new(agents.len(), k),
            coords,
        })
    }

    pub fn from_stacked(layout: Layout, coords: Vec<f64>) -> Result<Self, TrajectoryError> {
        if coords.len() != layout.state_dim() || layout.agents == 0 || layout.keypoints == 0 {
            return Err(TrajectoryError::Schema(format!(
                "stacked vector of length {} does not match {} agents x {} keypoints",
                coords.len(),
                layout.agents,
                layout.keypoints
            )));
        }
        Ok(Self { layout, coords })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn stacked(&self) -> &[f64] {
        &self.coords
    }

    pub fn stacked_mut(&mut self) -> &mut [f64] {
        &mut self.coords
    }

    pub fn keypoint(&self, agent: usize, keypoint: usize) -> Keypoint {
        let o = self.layout.offset(agent, keypoint);
        Keypoint::new(self.coords[o], self.coords[o + 1])
    }

    pub fn agent(&self, agent: usize) -> Vec<Keypoint> {
        (0..self.layout.keypoints)
            .map(|k| self.keypoint(agent, k))
            .collect()
    }

    pub fn points(&self) -> impl Iterator<Item = Keypoint> + '_ {
        self.coords
            .chunks_exact(2)
            .map(|c| Keypoint::new(c[0], c[1]))
    }

    pub fn map_points(&self, mut f: impl FnMut(Keypoint) -> Keypoint) -> Self {
        let mut out = self.clone();
        for c in out.coords.chunks_exact_mut(2) {
            let p = f(Keypoint::new(c[0], c[1]));
            c[0] = p.x;
            c[1] = p.y;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<FrameState>,
    pub frame_rate: f64,
    pub source_id: String,
    /// One class index per frame; [`UNLABELED`] marks unannotated frames.
    pub labels: Option<Vec<i32>>,
    normalized: bool,
}

impl Trajectory {
    pub fn new(
        source_id: impl Into<String>,
        frames: Vec<FrameState>,
        frame_rate: f64,
        labels: Option<Vec<i32>>,
    ) -> Result<Self, TrajectoryError> {
        let source_id = source_id.into();
        let first = frames
            .first()
            .ok_or_else(|| TrajectoryError::Empty(source_id.clone()))?
            .layout();
        if frames.iter().any(|f| f.layout() != first) {
            return Err(TrajectoryError::Schema(format!(
                "inconsistent agent/keypoint counts in `{source_id}`"
            )));
        }
        if let Some(l) = &labels {
            if l.len() != frames.len() {
                return Err(TrajectoryError::Schema(format!(
                    "`{source_id}` has {} labels for {} frames",
                    l.len(),
                    frames.len()
                )));
            }
        }
        Ok(Self {
            frames,
            frame_rate,
            source_id,
            labels,
            normalized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn layout(&self) -> Layout {
        self.frames[0].layout()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub(crate) fn set_normalized(&mut self, flag: bool) {
        self.normalized = flag;
    }

    /// Frames `start..start + len` as a new trajectory (labels included).
    pub fn segment(&self, start: usize, len: usize) -> Trajectory {
        let end = (start + len).min(self.len());
        Trajectory {
            frames: self.frames[start..end].to_vec(),
            frame_rate: self.frame_rate,
            source_id: format!("{}#{}", self.source_id, start),
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
            normalized: self.normalized,
        }
    }
}

/// Image extent used to map pixel coordinates into the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: f64,
    pub height: f64,
}

impl ImageDims {
    pub fn new(width: f64, height: f64) -> Result<Self, TrajectoryError> {
        if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
            return Err(TrajectoryError::BadImageDims(width, height));
        }
        Ok(Self { width, height })
    }
}

/// Divide every keypoint by the image extent.
pub fn normalize_trajectory(
    t: &Trajectory,
    dims: ImageDims,
) -> Result<Trajectory, TrajectoryError> {
    let dims = ImageDims::new(dims.width, dims.height)?;
    if t.normalized {
        return Err(TrajectoryError::AlreadyNormalized(t.source_id.clone()));
    }
    let mut out = t.clone();
    for f in &mut out.frames {
        for c in f.coords.chunks_exact_mut(2) {
            c[0] /= dims.width;
            c[1] /= dims.height;
        }
    }
    out.normalized = true;
    Ok(out)
}

/// Inverse of [`normalize_trajectory`].
pub fn denormalize_trajectory(
    t: &Trajectory,
    dims: ImageDims,
) -> Result<Trajectory, TrajectoryError> {
    let dims = ImageDims::new(dims.width, dims.height)?;
    if !t.normalized {
        return Err(TrajectoryError::NotNormalized(t.source_id.clone()));
    }
    let mut out = t.clone();
    for f in &mut out.frames {
        for c in f.coords.chunks_exact_mut(2) {
            c[0] *= dims.width;
            c[1] *= dims.height;
        }
    }
    out.normalized = false;
    Ok(out)
}

/// Fixed-length slice of a trajectory represented by its center frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub frames: Vec<FrameState>,
    pub center_index: usize,
}

impl Window {
    pub fn new(frames: Vec<FrameState>) -> Result<Self, TrajectoryError> {
        if frames.len().is_multiple_of(2) {
            return Err(TrajectoryError::EvenWindow(frames.len()));
        }
        let center_index = frames.len() / 2;
        Ok(Self {
            frames,
            center_index,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn layout(&self) -> Layout {
        self.frames[0].layout()
    }

    pub fn center(&self) -> &FrameState {
        &self.frames[self.center_index]
    }

    pub fn map_points(&self, mut f: impl FnMut(Keypoint) -> Keypoint) -> Window {
        Window {
            frames: self.frames.iter().map(|fr| fr.map_points(&mut f)).collect(),
            center_index: self.center_index,
        }
    }
}

/// How frames beyond the recording boundary are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EdgePadding {
    /// Repeat the first or last frame.
    #[default]
    Repeat,
}

fn check_window_len(len: usize) -> Result<(), TrajectoryError> {
    if len == 0 || len.is_multiple_of(2) {
        Err(TrajectoryError::EvenWindow(len))
    } else {
        Ok(())
    }
}

/// Window of length `len` centered on `frame`, edges filled per `padding`.
pub fn window_at(
    t: &Trajectory,
    frame: usize,
    len: usize,
    padding: EdgePadding,
) -> Result<Window, TrajectoryError> {
    check_window_len(len)?;
    if t.is_empty() {
        return Err(TrajectoryError::Empty(t.source_id.clone()));
    }
    let half = (len / 2) as isize;
    let last = t.len() as isize - 1;
    let frames = (-half..=half)
        .map(|d| {
            let idx = match padding {
                EdgePadding::Repeat => (frame as isize + d).clamp(0, last),
            };
            t.frames[idx as usize].clone()
        })
        .collect();
    Ok(Window {
        frames,
        center_index: len / 2,
    })
}

/// One window per frame, so the output count always equals the frame count.
pub fn extract_windows(
    t: &Trajectory,
    len: usize,
    padding: EdgePadding,
) -> Result<Vec<Window>, TrajectoryError> {
    check_window_len(len)?;
    (0..t.len())
        .map(|i| window_at(t, i, len, padding))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub split: Split,
    pub image: ImageDims,
}

impl Dataset {
    pub fn new(
        trajectories: Vec<Trajectory>,
        split: Split,
        image: ImageDims,
    ) -> Result<Self, TrajectoryError> {
        let first = trajectories
            .first()
            .ok_or_else(|| TrajectoryError::Schema("dataset has no trajectories".into()))?
            .layout();
        if trajectories.iter().any(|t| t.layout() != first) {
            return Err(TrajectoryError::Schema(
                "inconsistent agent/keypoint counts across trajectories".into(),
            ));
        }
        Ok(Self {
            trajectories,
            split,
            image,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn layout(&self) -> Layout {
        self.trajectories[0].layout()
    }

    pub fn frame_count(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    pub fn normalized(&self) -> Result<Dataset, TrajectoryError> {
        let trajectories = self
            .trajectories
            .iter()
            .map(|t| {
                if t.is_normalized() {
                    Ok(t.clone())
                } else {
                    normalize_trajectory(t, self.image)
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(Dataset {
            trajectories,
            split: self.split,
            image: self.image,
        })
    }

    /// Number of behavior classes implied by the largest label.
    pub fn class_count(&self) -> usize {
        self.trajectories
            .iter()
            .filter_map(|t| t.labels.as_ref())
            .flatten()
            .copied()
            .max()
            .map_or(0, |m| (m + 1).max(0) as usize)
    }

    /// Split by recording so no source appears in two splits. Fractions are
    /// for train and validation; the remainder is test. Each split receives
    /// at least one recording when there are three or more.
    pub fn split_by_source(
        &self,
        train_fraction: f64,
        val_fraction: f64,
        seed: u64,
    ) -> Result<(Dataset, Dataset, Dataset), TrajectoryError> {
        let sources: BTreeSet<&str> = self
            .trajectories
            .iter()
            .map(|t| t.source_id.as_str())
            .collect();
        let mut sources: Vec<&str> = sources.into_iter().collect();
        if sources.len() < 3 {
            return Err(TrajectoryError::Schema(
                "need at least three recordings to split".into(),
            ));
        }
        sources.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = sources.len();
        let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 2);
        let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - n_train - 1);
        let pick = |ids: &[&str], split: Split| {
            let trajectories = self
                .trajectories
                .iter()
                .filter(|t| ids.contains(&t.source_id.as_str()))
                .cloned()
                .collect();
            Dataset::new(trajectories, split, self.image)
        };
        Ok((
            pick(&sources[..n_train], Split::Train)?,
            pick(&sources[n_train..n_train + n_val], Split::Val)?,
            pick(&sources[n_train + n_val..], Split::Test)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn line_trajectory(n: usize) -> Trajectory {
        let frames = (0..n)
            .map(|i| {
                FrameState::from_agents(&[vec![Keypoint::new(i as f64, 2.0 * i as f64)]]).unwrap()
            })
            .collect();
        Trajectory::new("rec", frames, 30.0, None).unwrap()
    }

    fn dims(w: f64, h: f64) -> ImageDims {
        ImageDims::new(w, h).unwrap()
    }

    #[test]
    fn normalization_examples() {
        let t = Trajectory::new(
            "a",
            vec![FrameState::from_agents(&[vec![
                Keypoint::new(512.0, 285.0),
                Keypoint::new(0.0, 0.0),
                Keypoint::new(1024.0, 570.0),
            ]])
            .unwrap()],
            30.0,
            None,
        )
        .unwrap();
        let n = normalize_trajectory(&t, dims(1024.0, 570.0)).unwrap();
        let f = &n.frames[0];
        assert_eq!(f.keypoint(0, 0), Keypoint::new(0.5, 0.5));
        assert_eq!(f.keypoint(0, 1), Keypoint::new(0.0, 0.0));
        assert_eq!(f.keypoint(0, 2), Keypoint::new(1.0, 1.0));

        let corner = Trajectory::new(
            "b",
            vec![FrameState::from_agents(&[vec![Keypoint::new(640.0, 480.0)]]).unwrap()],
            30.0,
            None,
        )
        .unwrap();
        let c = normalize_trajectory(&corner, dims(640.0, 480.0)).unwrap();
        assert_eq!(c.frames[0].keypoint(0, 0), Keypoint::new(1.0, 1.0));
    }

    #[test]
    fn double_normalization_and_zero_dims_rejected() {
        let t = line_trajectory(3);
        let n = normalize_trajectory(&t, dims(10.0, 10.0)).unwrap();
        assert!(matches!(
            normalize_trajectory(&n, dims(10.0, 10.0)),
            Err(TrajectoryError::AlreadyNormalized(_))
        ));
        assert!(matches!(
            ImageDims::new(0.0, 10.0),
            Err(TrajectoryError::BadImageDims(..))
        ));
    }

    #[test]
    fn window_counts_and_edges() {
        let t = line_trajectory(100);
        let w = extract_windows(&t, 21, EdgePadding::Repeat).unwrap();
        assert_eq!(w.len(), 100);
        assert!(w.iter().all(|w| w.len() == 21 && w.center_index == 10));

        let first = &w[0];
        for i in 0..11 {
            assert_eq!(first.frames[i], t.frames[0]);
        }
        for i in 11..21 {
            assert_eq!(first.frames[i], t.frames[i - 10]);
        }
        let mid = &w[50];
        for (i, f) in mid.frames.iter().enumerate() {
            assert_eq!(f, &t.frames[40 + i]);
        }
    }

    #[test]
    fn even_window_rejected() {
        assert!(matches!(
            extract_windows(&line_trajectory(5), 20, EdgePadding::Repeat),
            Err(TrajectoryError::EvenWindow(20))
        ));
    }

    #[test]
    fn labels_must_match_frames() {
        let frames = line_trajectory(3).frames;
        assert!(Trajectory::new("x", frames, 30.0, Some(vec![0, 1])).is_err());
    }

    #[test]
    fn splits_are_disjoint_by_source() {
        let trajectories = (0..10)
            .map(|i| {
                let mut t = line_trajectory(5);
                t.source_id = format!("rec{i}");
                t
            })
            .collect();
        let d = Dataset::new(trajectories, Split::Train, dims(100.0, 100.0)).unwrap();
        let (a, b, c) = d.split_by_source(0.7, 0.15, 1).unwrap();
        let ids = |d: &Dataset| -> BTreeSet<String> {
            d.trajectories.iter().map(|t| t.source_id.clone()).collect()
        };
        assert!(ids(&a).is_disjoint(&ids(&b)));
        assert!(ids(&a).is_disjoint(&ids(&c)));
        assert!(ids(&b).is_disjoint(&ids(&c)));
        assert_eq!(a.len() + b.len() + c.len(), 10);
        assert_eq!(a.split, Split::Train);
        assert_eq!(c.split, Split::Test);
    }

    proptest! {
        #[test]
        fn window_count_matches_length(n in 1usize..60, half in 0usize..15) {
            let t = line_trajectory(n);
            let w = extract_windows(&t, 2 * half + 1, EdgePadding::Repeat).unwrap();
            prop_assert_eq!(w.len(), n);
        }

        #[test]
        fn denormalize_recovers_pixels(x in 0.0f64..4000.0, y in 0.0f64..4000.0,
                                       w in 1.0f64..4000.0, h in 1.0f64..4000.0) {
            let t = Trajectory::new(
                "p",
                vec![FrameState::from_agents(&[vec![Keypoint::new(x, y)]]).unwrap()],
                30.0,
                None,
            ).unwrap();
            let back = denormalize_trajectory(&normalize_trajectory(&t, dims(w, h)).unwrap(), dims(w, h)).unwrap();
            let p = back.frames[0].keypoint(0, 0);
            prop_assert!((p.x - x).abs() <= 1e-9 * x.abs().max(1.0));
            prop_assert!((p.y - y).abs() <= 1e-9 * y.abs().max(1.0));
        }
    }
}
