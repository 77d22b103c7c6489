//! Attribute-preserving window augmentations and a preservation checker.

use std::f64::consts::TAU;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::Tape;
use crate::programs::algebra::TapeAlgebra;
use crate::programs::{evaluate_program, AttributeProgram, Domain, ProgramError, ProgramSet};
use crate::trajectory::{Keypoint, Window};

pub const COORD_MIN: f64 = -0.5;
pub const COORD_MAX: f64 = 1.5;
pub const MAX_NOISE_SIGMA: f64 = 0.005;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.002;
pub const TRANSLATION_RETRIES: usize = 10;
/// Tolerance for geometric augmentations.
pub const GEOMETRIC_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("translation ({dx}, {dy}) moves keypoints outside [-0.5, 1.5]")]
    OutOfBounds { dx: f64, dy: f64 },
    #[error("no in-bounds translation found after {0} tries")]
    TranslationExhausted(usize),
    #[error("noise sigma {0} outside [0, 0.005]")]
    NoiseSigma(f64),
    #[error("no augmentation kinds enabled for this domain")]
    NoKinds,
    #[error(transparent)]
    Program(#[from] ProgramError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Mirror across a vertical line (x flips).
    Vertical,
    /// Mirror across a horizontal line (y flips).
    Horizontal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    Rotation { angle: f64 },
    Reflection { axis: Axis },
    Translation { dx: f64, dy: f64 },
    KeypointNoise { sigma: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugKind {
    Rotation,
    Reflection,
    Translation,
    KeypointNoise,
}

impl AugKind {
    pub const ALL: [AugKind; 4] = [
        AugKind::Rotation,
        AugKind::Reflection,
        AugKind::Translation,
        AugKind::KeypointNoise,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "rotation" => Some(Self::Rotation),
            "reflection" => Some(Self::Reflection),
            "translation" => Some(Self::Translation),
            "noise" | "keypoint_noise" => Some(Self::KeypointNoise),
            _ => None,
        }
    }
}

impl Augmentation {
    pub fn kind(&self) -> AugKind {
        match self {
            Self::Rotation { .. } => AugKind::Rotation,
            Self::Reflection { .. } => AugKind::Reflection,
            Self::Translation { .. } => AugKind::Translation,
            Self::KeypointNoise { .. } => AugKind::KeypointNoise,
        }
    }

    pub fn is_geometric(&self) -> bool {
        !matches!(self, Self::KeypointNoise { .. })
    }
}

/// Which augmentations may be drawn, and their ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub kinds: Vec<AugKind>,
    pub noise_sigma: f64,
    /// Translations are drawn uniformly from `[-max_shift, max_shift]` per axis.
    pub max_shift: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            kinds: AugKind::ALL.to_vec(),
            noise_sigma: DEFAULT_NOISE_SIGMA,
            max_shift: 0.2,
        }
    }
}

fn window_centroid(w: &Window) -> Keypoint {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for f in &w.frames {
        for p in f.points() {
            sx += p.x;
            sy += p.y;
            n += 1;
        }
    }
    Keypoint::new(sx / n as f64, sy / n as f64)
}

/// Apply `a` to every keypoint of every frame. Rotation and reflection pivot
/// on the window's global centroid. A fixed translation that leaves the
/// coordinate bounds is an error; [`augment_window`] resamples instead.
pub fn apply_augmentation(a: Augmentation, w: &Window) -> Result<Window, AugmentError> {
    match a {
        Augmentation::Rotation { angle } => {
            let c = window_centroid(w);
            let (s, co) = angle.sin_cos();
            Ok(w.map_points(|p| {
                let (x, y) = (p.x - c.x, p.y - c.y);
                Keypoint::new(c.x + co * x - s * y, c.y + s * x + co * y)
            }))
        }
        Augmentation::Reflection { axis } => {
            let c = window_centroid(w);
            Ok(w.map_points(|p| match axis {
                Axis::Vertical => Keypoint::new(2.0 * c.x - p.x, p.y),
                Axis::Horizontal => Keypoint::new(p.x, 2.0 * c.y - p.y),
            }))
        }
        Augmentation::Translation { dx, dy } => {
            let out = w.map_points(|p| Keypoint::new(p.x + dx, p.y + dy));
            let inside = out
                .frames
                .iter()
                .flat_map(|f| f.stacked().iter())
                .all(|v| (COORD_MIN..=COORD_MAX).contains(v));
            if inside {
                Ok(out)
            } else {
                Err(AugmentError::OutOfBounds { dx, dy })
            }
        }
        Augmentation::KeypointNoise { sigma, seed } => {
            if !(0.0..=MAX_NOISE_SIGMA).contains(&sigma) {
                return Err(AugmentError::NoiseSigma(sigma));
            }
            if sigma == 0.0 {
                return Ok(w.clone());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, sigma).expect("sigma checked");
            Ok(w.map_points(|p| {
                Keypoint::new(p.x + normal.sample(&mut rng), p.y + normal.sample(&mut rng))
            }))
        }
    }
}

/// Draw an augmentation uniformly over the policy's kinds; the noise kind is
/// never drawn for fly data.
pub fn sample_augmentation<R: Rng + ?Sized>(
    rng: &mut R,
    policy: &AugmentPolicy,
    domain: Domain,
) -> Result<Augmentation, AugmentError> {
    let kinds: Vec<AugKind> = policy
        .kinds
        .iter()
        .copied()
        .filter(|k| !(domain == Domain::Fly && *k == AugKind::KeypointNoise))
        .collect();
    if kinds.is_empty() {
        return Err(AugmentError::NoKinds);
    }
    let kind = kinds[rng.random_range(0..kinds.len())];
    Ok(match kind {
        AugKind::Rotation => Augmentation::Rotation {
            angle: rng.random_range(0.0..TAU),
        },
        AugKind::Reflection => Augmentation::Reflection {
            axis: if rng.random_bool(0.5) {
                Axis::Vertical
            } else {
                Axis::Horizontal
            },
        },
        AugKind::Translation => translation(rng, policy.max_shift),
        AugKind::KeypointNoise => Augmentation::KeypointNoise {
            sigma: policy.noise_sigma,
            seed: rng.random(),
        },
    })
}

fn translation<R: Rng + ?Sized>(rng: &mut R, max_shift: f64) -> Augmentation {
    let m = max_shift.abs();
    if m == 0.0 {
        return Augmentation::Translation { dx: 0.0, dy: 0.0 };
    }
    Augmentation::Translation {
        dx: rng.random_range(-m..=m),
        dy: rng.random_range(-m..=m),
    }
}

/// Sample and apply one augmentation. Out-of-bounds translations are redrawn
/// up to [`TRANSLATION_RETRIES`] times.
pub fn augment_window<R: Rng + ?Sized>(
    rng: &mut R,
    policy: &AugmentPolicy,
    domain: Domain,
    w: &Window,
) -> Result<(Augmentation, Window), AugmentError> {
    let mut a = sample_augmentation(rng, policy, domain)?;
    for _ in 0..TRANSLATION_RETRIES {
        match apply_augmentation(a, w) {
            Ok(out) => return Ok((a, out)),
            Err(AugmentError::OutOfBounds { .. }) => a = translation(rng, policy.max_shift),
            Err(e) => return Err(e),
        }
    }
    match apply_augmentation(a, w) {
        Ok(out) => Ok((a, out)),
        Err(AugmentError::OutOfBounds { .. }) => {
            Err(AugmentError::TranslationExhausted(TRANSLATION_RETRIES))
        }
        Err(e) => Err(e),
    }
}

/// Probes around the window used by [`noise_bound`].
pub const NOISE_BOUND_PROBES: usize = 8;

/// Five standard deviations of the first-order change of `p` under i.i.d.
/// Gaussian noise of scale `sigma` on every coordinate: `5 sigma |grad|`.
/// The gradient norm is the largest over the window and
/// [`NOISE_BOUND_PROBES`] seeded perturbations of scale `sigma`, so kinks
/// such as a norm at zero do not collapse the bound.
pub fn noise_bound(p: &AttributeProgram, w: &Window, sigma: f64) -> Result<f64, AugmentError> {
    p.check_layout(w.layout())?;
    let layout = w.layout();
    let c = w.center_index;
    let used: Vec<usize> = if c == 0 { vec![0] } else { vec![c - 1, c] };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let normal = Normal::new(0.0, sigma.abs()).map_err(|_| AugmentError::NoiseSigma(sigma))?;
    let mut worst = 0.0f64;
    for probe in 0..=NOISE_BOUND_PROBES {
        let mut tape = Tape::<f64>::new();
        let nodes: Vec<_> = used
            .iter()
            .map(|&i| {
                let row = Array2::from_shape_fn((1, layout.state_dim()), |(_, j)| {
                    let v = w.frames[i].stacked()[j];
                    if probe == 0 {
                        v
                    } else {
                        v + normal.sample(&mut rng)
                    }
                });
                tape.variable(row)
            })
            .collect();
        let out = {
            let mut alg = TapeAlgebra::new(&mut tape, layout, &nodes, used.len() - 1);
            p.record(&mut alg)
        };
        let mut sq = 0.0;
        for &n in &nodes {
            let g = tape
                .gradient_wrt(out, n)
                .map_err(|_| ProgramError::Degenerate(p.id.clone()))?;
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
        worst = worst.max(sq.sqrt());
    }
    Ok(5.0 * sigma * worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreservationEntry {
    pub id: String,
    pub deviation: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreservationReport {
    pub augmentation: Augmentation,
    pub entries: Vec<PreservationEntry>,
}

impl PreservationReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.deviation <= e.bound)
    }

    pub fn max_deviation(&self) -> f64 {
        self.entries.iter().map(|e| e.deviation).fold(0.0, f64::max)
    }
}

/// Per-program `|lambda(w) - lambda(a(w))|` against the allowed bound:
/// [`GEOMETRIC_TOLERANCE`] for geometric kinds, the 5 sigma propagated bound
/// for noise.
pub fn check_attribute_preserving(
    ps: &ProgramSet,
    w: &Window,
    a: Augmentation,
) -> Result<PreservationReport, AugmentError> {
    let aw = apply_augmentation(a, w)?;
    let mut entries = Vec::with_capacity(ps.len());
    for p in &ps.programs {
        let before = evaluate_program(p, w)?.value;
        let after = evaluate_program(p, &aw)?.value;
        let bound = match a {
            Augmentation::KeypointNoise { sigma, .. } => noise_bound(p, w, sigma)?,
            _ => GEOMETRIC_TOLERANCE,
        };
        entries.push(PreservationEntry {
            id: p.id.clone(),
            deviation: (before - after).abs(),
            bound,
        });
    }
    Ok(PreservationReport {
        augmentation: a,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::FrameState;

    fn window(seed: u64) -> Window {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..5)
            .map(|_| {
                let agents: Vec<Vec<Keypoint>> = (0..2)
                    .map(|_| {
                        (0..7)
                            .map(|_| {
                                Keypoint::new(
                                    rng.random_range(0.3..0.7),
                                    rng.random_range(0.3..0.7),
                                )
                            })
                            .collect()
                    })
                    .collect();
                FrameState::from_agents(&agents).unwrap()
            })
            .collect();
        Window::new(frames).unwrap()
    }

    #[test]
    fn zero_rotation_is_identity() {
        let w = window(1);
        let r = apply_augmentation(Augmentation::Rotation { angle: 0.0 }, &w).unwrap();
        assert_eq!(r, w);
    }

    #[test]
    fn reflection_is_an_involution() {
        let w = window(2);
        for axis in [Axis::Vertical, Axis::Horizontal] {
            let a = Augmentation::Reflection { axis };
            let back = apply_augmentation(a, &apply_augmentation(a, &w).unwrap()).unwrap();
            for (f, g) in w.frames.iter().zip(&back.frames) {
                for (x, y) in f.stacked().iter().zip(g.stacked()) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn translation_shifts_x_only() {
        let w = window(3);
        let t = apply_augmentation(Augmentation::Translation { dx: 0.1, dy: 0.0 }, &w).unwrap();
        for (f, g) in w.frames.iter().zip(&t.frames) {
            for (a, b) in f.points().zip(g.points()) {
                assert_eq!(b.x, a.x + 0.1);
                assert_eq!(b.y, a.y);
            }
        }
        assert!(matches!(
            apply_augmentation(Augmentation::Translation { dx: 1.0, dy: 0.0 }, &w),
            Err(AugmentError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn sampling_is_reproducible_and_respects_domain() {
        let policy = AugmentPolicy::default();
        let draw = |seed, domain| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10_000)
                .map(|_| sample_augmentation(&mut rng, &policy, domain).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5, Domain::Mouse), draw(5, Domain::Mouse));
        assert!(draw(5, Domain::Fly).iter().all(|a| a.is_geometric()));
        let mouse = draw(6, Domain::Mouse);
        for k in AugKind::ALL {
            let n = mouse.iter().filter(|a| a.kind() == k).count();
            assert!(n > 2000 && n < 3000, "{k:?}: {n}");
        }
    }

    #[test]
    fn zero_noise_has_zero_deviation() {
        let ps = ProgramSet::from_spec("all_mouse").unwrap();
        let r = check_attribute_preserving(
            &ps,
            &window(4),
            Augmentation::KeypointNoise {
                sigma: 0.0,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(r.max_deviation(), 0.0);
        assert!(r.passed());
    }

    #[test]
    fn stationary_window_keeps_a_speed_bound() {
        let base = window(9);
        let still = Window {
            frames: vec![base.frames[2].clone(); 5],
            center_index: 2,
        };
        let ps = ProgramSet::from_spec("speed_m1").unwrap();
        let sigma = DEFAULT_NOISE_SIGMA;
        let bound = noise_bound(&ps.programs[0], &still, sigma).unwrap();
        // centroid of 7 keypoints on two frames
        assert!(
            bound >= 5.0 * sigma * (2.0f64 / 7.0).sqrt() * 0.99,
            "{bound}"
        );
        for seed in 0..200 {
            let a = Augmentation::KeypointNoise { sigma, seed };
            assert!(check_attribute_preserving(&ps, &still, a).unwrap().passed());
        }
    }

    #[test]
    fn arity_is_unchanged() {
        let w = window(8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let (_, out) =
                augment_window(&mut rng, &AugmentPolicy::default(), Domain::Mouse, &w).unwrap();
            assert_eq!(out.len(), w.len());
            assert_eq!(out.layout(), w.layout());
        }
    }
}
