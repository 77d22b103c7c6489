//! Synthetic two-mouse recordings with four labeled behaviors of the first
//! mouse: idle, approach, chase and circle.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::trajectory::{Dataset, FrameState, ImageDims, Keypoint, Split, Trajectory};

pub const BEHAVIORS: [&str; 4] = ["idle", "approach", "chase", "circle"];
const IDLE: usize = 0;
const APPROACH: usize = 1;
const CHASE: usize = 2;
const CIRCLE: usize = 3;

/// Keypoint offsets in the body frame (pixels, forward then left): nose,
/// left ear, right ear, neck, left hip, right hip, tail base.
const BODY: [(f64, f64); 7] = [
    (30.0, 0.0),
    (18.0, 7.0),
    (18.0, -7.0),
    (12.0, 0.0),
    (-12.0, 10.0),
    (-12.0, -10.0),
    (-30.0, 0.0),
];

/// Speeds are pixels per frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionParams {
    pub wander_speed: f64,
    pub approach_speed: f64,
    pub chase_speed: f64,
    pub circle_speed: f64,
    pub circle_radius: f64,
    /// Fraction of the velocity error corrected per frame.
    pub response: f64,
    pub accel_noise: f64,
    pub keypoint_jitter: f64,
}

impl Default for MotionParams {
    fn default() -> Self {
        Self {
            wander_speed: 0.4,
            approach_speed: 3.0,
            chase_speed: 6.0,
            circle_speed: 3.5,
            circle_radius: 100.0,
            response: 0.15,
            accel_noise: 0.25,
            keypoint_jitter: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub sequences: usize,
    pub frames: usize,
    pub agents: usize,
    pub keypoints: usize,
    pub image_width: f64,
    pub image_height: f64,
    pub frame_rate: f64,
    /// Behavior bout length range in frames.
    pub min_bout: usize,
    pub max_bout: usize,
    /// Probability that a frame's label is replaced by another class.
    pub label_noise: f64,
    pub motion: MotionParams,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            sequences: 20,
            frames: 1000,
            agents: 2,
            keypoints: 7,
            image_width: 1024.0,
            image_height: 570.0,
            frame_rate: 30.0,
            min_bout: 60,
            max_bout: 180,
            label_noise: 0.05,
            motion: MotionParams::default(),
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: &str| Err(HarnessError::Config(format!("synthetic spec: {m}")));
        if self.agents != 2 || self.keypoints != 7 {
            return fail("only 2 agents with 7 keypoints are supported");
        }
        if self.sequences == 0 || self.frames == 0 {
            return fail("need at least one non-empty sequence");
        }
        if self.min_bout == 0 || self.min_bout > self.max_bout {
            return fail("bout range must satisfy 0 < min_bout <= max_bout");
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return fail("label noise must be in [0, 1]");
        }
        if self.image_width < 200.0 || self.image_height < 200.0 {
            return fail("arena must be at least 200 x 200 pixels");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Body {
    pos: (f64, f64),
    vel: (f64, f64),
    heading: f64,
    /// Head turn relative to the body axis.
    head: f64,
    wander: f64,
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

fn norm(v: (f64, f64)) -> f64 {
    v.0.hypot(v.1)
}

fn unit(v: (f64, f64)) -> (f64, f64) {
    let n = norm(v).max(1e-9);
    (v.0 / n, v.1 / n)
}

struct Arena {
    w: f64,
    h: f64,
    margin: f64,
}

impl Arena {
    /// Steer the wander direction back inside when close to a wall.
    fn steer(&self, b: &mut Body) {
        let (x, y) = b.pos;
        let near = x < self.margin * 2.0
            || x > self.w - self.margin * 2.0
            || y < self.margin * 2.0
            || y > self.h - self.margin * 2.0;
        if near {
            let to_center = (self.w / 2.0 - x, self.h / 2.0 - y);
            let target = to_center.1.atan2(to_center.0);
            b.wander += 0.2 * wrap(target - b.wander);
        }
    }

    fn contain(&self, b: &mut Body) {
        for (p, v, hi) in [
            (&mut b.pos.0, &mut b.vel.0, self.w),
            (&mut b.pos.1, &mut b.vel.1, self.h),
        ] {
            if *p < self.margin {
                *p = self.margin;
                *v = v.abs();
            } else if *p > hi - self.margin {
                *p = hi - self.margin;
                *v = -v.abs();
            }
        }
    }
}

fn step_body<R: Rng>(
    b: &mut Body,
    target: (f64, f64),
    m: &MotionParams,
    noise: &Normal<f64>,
    rng: &mut R,
) {
    b.vel.0 += m.response * (target.0 - b.vel.0) + m.accel_noise * noise.sample(rng);
    b.vel.1 += m.response * (target.1 - b.vel.1) + m.accel_noise * noise.sample(rng);
    b.pos.0 += b.vel.0;
    b.pos.1 += b.vel.1;
    let speed = norm(b.vel);
    if speed > 0.8 {
        let dir = b.vel.1.atan2(b.vel.0);
        b.heading = wrap(b.heading + 0.3 * wrap(dir - b.heading));
    } else {
        b.heading = wrap(b.heading + 0.02 * noise.sample(rng));
    }
    // Head sways more when slow, as when sniffing.
    let sway = if speed > 0.8 { 0.02 } else { 0.08 };
    b.head = (0.9 * b.head + sway * noise.sample(rng)).clamp(-0.6, 0.6);
}

fn keypoints<R: Rng>(b: &Body, jitter: f64, noise: &Normal<f64>, rng: &mut R) -> Vec<Keypoint> {
    let (s, c) = b.heading.sin_cos();
    let (hs, hc) = (b.heading + b.head).sin_cos();
    BODY.iter()
        .enumerate()
        .map(|(k, &(fwd, left))| {
            // Nose and ears rotate with the head around the neck.
            let (dx, dy) = if k < 3 {
                let (f, l) = (fwd - 12.0, left);
                (12.0 * c + f * hc - l * hs, 12.0 * s + f * hs + l * hc)
            } else {
                (fwd * c - left * s, fwd * s + left * c)
            };
            Keypoint::new(
                b.pos.0 + dx + jitter * noise.sample(rng),
                b.pos.1 + dy + jitter * noise.sample(rng),
            )
        })
        .collect()
}

/// One labeled recording: bouts of random behaviors for mouse 0 while
/// mouse 1 wanders, or flees during chase bouts.
fn generate_sequence<R: Rng>(
    spec: &SyntheticSpec,
    id: usize,
    rng: &mut R,
    label_rng: &mut R,
) -> Trajectory {
    let m = &spec.motion;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let arena = Arena {
        w: spec.image_width,
        h: spec.image_height,
        margin: 40.0,
    };
    let spawn = |rng: &mut R| Body {
        pos: (
            rng.random_range(arena.margin * 2.0..arena.w - arena.margin * 2.0),
            rng.random_range(arena.margin * 2.0..arena.h - arena.margin * 2.0),
        ),
        vel: (0.0, 0.0),
        heading: rng.random_range(-PI..PI),
        head: 0.0,
        wander: rng.random_range(-PI..PI),
    };
    let mut a = spawn(rng);
    let mut b = spawn(rng);
    let mut frames = Vec::with_capacity(spec.frames);
    let mut labels = Vec::with_capacity(spec.frames);
    let mut behavior = IDLE;
    let mut left = 0usize;
    let mut orbit = 1.0;
    for _ in 0..spec.frames {
        if left == 0 {
            behavior = rng.random_range(0..BEHAVIORS.len());
            left = rng.random_range(spec.min_bout..=spec.max_bout);
            orbit = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        }
        left -= 1;
        let to_b = (b.pos.0 - a.pos.0, b.pos.1 - a.pos.1);
        let dist = norm(to_b);
        let dir = unit(to_b);

        b.wander = wrap(b.wander + 0.05 * noise.sample(rng));
        arena.steer(&mut b);
        let b_speed = if behavior == CHASE {
            m.chase_speed
        } else {
            m.wander_speed
        };
        let b_target = (b_speed * b.wander.cos(), b_speed * b.wander.sin());

        let a_target = match behavior {
            IDLE => (0.0, 0.0),
            APPROACH => {
                let s = m.approach_speed * ((dist - 70.0) / 60.0).clamp(0.0, 1.0);
                (s * dir.0, s * dir.1)
            }
            CHASE => {
                // Aim at a point just behind the fleeing mouse's tail.
                let (bs, bc) = b.heading.sin_cos();
                let aim = (b.pos.0 - 45.0 * bc - a.pos.0, b.pos.1 - 45.0 * bs - a.pos.1);
                let gap = norm(aim);
                let s = (m.chase_speed * 1.15).min(m.chase_speed * 0.4 + gap * 0.1);
                let u = unit(aim);
                (s * u.0, s * u.1)
            }
            CIRCLE => {
                let tangent = (-dir.1 * orbit, dir.0 * orbit);
                let radial = 0.05 * (dist - m.circle_radius);
                (
                    m.circle_speed * tangent.0 + radial * dir.0,
                    m.circle_speed * tangent.1 + radial * dir.1,
                )
            }
            _ => unreachable!("behavior index out of range"),
        };
        step_body(&mut a, a_target, m, &noise, rng);
        step_body(&mut b, b_target, m, &noise, rng);
        arena.contain(&mut a);
        arena.contain(&mut b);

        let agents = vec![
            keypoints(&a, m.keypoint_jitter, &noise, rng),
            keypoints(&b, m.keypoint_jitter, &noise, rng),
        ];
        frames.push(FrameState::from_agents(&agents).expect("fixed layout"));
        let mut label = behavior;
        if label_rng.random_bool(spec.label_noise) {
            label = (behavior + label_rng.random_range(1..BEHAVIORS.len())) % BEHAVIORS.len();
        }
        labels.push(label as i32);
    }
    Trajectory::new(
        format!("synth{id:03}"),
        frames,
        spec.frame_rate,
        Some(labels),
    )
    .expect("consistent frames")
}

/// Labeled recordings in pixel coordinates, reproducible from `spec.seed`.
/// Label noise draws from its own stream, so motion does not depend on it.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset, HarnessError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut label_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    label_rng.set_stream(1);
    let trajectories = (0..spec.sequences)
        .map(|i| generate_sequence(spec, i, &mut rng, &mut label_rng))
        .collect();
    Ok(Dataset::new(
        trajectories,
        Split::Train,
        ImageDims::new(spec.image_width, spec.image_height)?,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::programs::ProgramSet;
    use crate::trajectory::{window_at, EdgePadding};

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            sequences: 10,
            frames: 500,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn shape_and_determinism() {
        let d = generate_synthetic_dataset(&small()).unwrap();
        assert_eq!(d.len(), 10);
        assert!(d.trajectories.iter().all(|t| t.len() == 500));
        assert_eq!(d.layout().state_dim(), 28);
        assert_eq!(d, generate_synthetic_dataset(&small()).unwrap());
        let other = SyntheticSpec { seed: 8, ..small() };
        assert_ne!(d, generate_synthetic_dataset(&other).unwrap());
    }

    #[test]
    fn stays_in_frame() {
        let d = generate_synthetic_dataset(&small())
            .unwrap()
            .normalized()
            .unwrap();
        for t in &d.trajectories {
            for f in &t.frames {
                assert!(f.stacked().iter().all(|v| (-0.5..=1.5).contains(v)));
            }
        }
    }

    #[test]
    fn behaviors_separate_on_attributes() {
        let spec = SyntheticSpec {
            label_noise: 0.0,
            ..small()
        };
        let d = generate_synthetic_dataset(&spec)
            .unwrap()
            .normalized()
            .unwrap();
        let ps = ProgramSet::from_spec("speed_m1,nose_tail_dist").unwrap();
        let mut sums = [[0.0; 2]; 4];
        let mut counts = [0.0; 4];
        for t in &d.trajectories {
            let labels = t.labels.as_ref().unwrap();
            for i in (0..t.len()).step_by(5) {
                let w = window_at(t, i, 21, EdgePadding::Repeat).unwrap();
                let v = ps.evaluate_values(&w).unwrap();
                let c = labels[i] as usize;
                sums[c][0] += v[0];
                sums[c][1] += v[1];
                counts[c] += 1.0;
            }
        }
        let mean = |c: usize, j: usize| sums[c][j] / counts[c];
        assert!(mean(CHASE, 0) > mean(IDLE, 0));
        assert!(mean(CHASE, 0) > mean(APPROACH, 0));
        assert!(mean(CHASE, 1) < mean(IDLE, 1));
        assert!(counts.iter().all(|&c| c > 0.0));
    }

    #[test]
    fn label_noise_rate() {
        let clean = generate_synthetic_dataset(&SyntheticSpec {
            label_noise: 0.0,
            ..small()
        })
        .unwrap();
        let noisy = generate_synthetic_dataset(&SyntheticSpec {
            label_noise: 0.2,
            ..small()
        })
        .unwrap();
        let (mut flipped, mut total) = (0.0, 0.0);
        for (a, b) in clean.trajectories.iter().zip(&noisy.trajectories) {
            assert_eq!(a.frames, b.frames);
            for (x, y) in a
                .labels
                .as_ref()
                .unwrap()
                .iter()
                .zip(b.labels.as_ref().unwrap())
            {
                flipped += f64::from(x != y);
                total += 1.0;
            }
        }
        assert!((flipped / total - 0.2).abs() < 0.02, "{}", flipped / total);
        assert!(generate_synthetic_dataset(&SyntheticSpec {
            agents: 3,
            ..small()
        })
        .is_err());
    }
}
