//! Expert-programmed behavior attributes and their three-class discretization.
//!
//! Mouse poses use seven keypoints per agent in the order
//! nose, left ear, right ear, neck, left hip, right hip, tail base.
//! Fly poses are packed into five keypoint slots per agent, see [`fly`].

pub mod algebra;
mod discretize;
pub mod fly;

pub use discretize::{discretize, fit_discretizer, Discretizer, MIN_FIT_SAMPLE};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use self::algebra::{
    angle_between, centroid, max, min, norm, point, vneg, vsub, AttrAlgebra, FrameRef,
    WindowAlgebra,
};
use crate::trajectory::{Layout, Window};

#[derive(Debug, Error, PartialEq)]
pub enum ProgramError {
    #[error("unknown program `{0}`")]
    Unknown(String),
    #[error("program `{id}` expects {expected} but the window has {agents} agents x {keypoints} keypoints")]
    Layout {
        id: String,
        expected: &'static str,
        agents: usize,
        keypoints: usize,
    },
    #[error("duplicate program id `{0}`")]
    Duplicate(String),
    #[error("program set is empty")]
    Empty,
    #[error("program `{0}` has no fitted discretizer")]
    NotFitted(String),
    #[error("degenerate distribution for `{0}`: fewer than three distinct values or coincident thresholds")]
    Degenerate(String),
    #[error("program `{id}` needs at least {needed} sample values, got {got}")]
    SampleTooSmall {
        id: String,
        needed: usize,
        got: usize,
    },
}

pub const MOUSE_KEYPOINTS: usize = 7;
pub const NOSE: usize = 0;
pub const NECK: usize = 3;
pub const TAIL: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Mouse,
    Fly,
    Any,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// Reads only the center frame.
    Frame,
    /// Reads the center and the preceding frame.
    Window,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    Angle,
    Length,
    Speed,
    Ratio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WingExtreme {
    Min,
    Max,
}

/// Built-in evaluators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ProgramKind {
    MouseFacingAngle { agent: usize, other: usize },
    MouseSpeed { agent: usize },
    NoseNoseDistance,
    NoseTailDistance,
    HeadBodyAngle { agent: usize },
    NoseMovement { agent: usize },
    FlySpeed { agent: usize },
    FlyDistance,
    AngularSpeed { agent: usize },
    FlyFacingAngle { agent: usize, other: usize },
    WingAngle { agent: usize, extreme: WingExtreme },
    AxisRatio { agent: usize },
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeProgram {
    pub id: String,
    pub scope: Scope,
    pub output: OutputKind,
    pub domain: Domain,
    pub kind: ProgramKind,
}

impl AttributeProgram {
    fn new(id: &str, scope: Scope, output: OutputKind, domain: Domain, kind: ProgramKind) -> Self {
        Self {
            id: id.to_string(),
            scope,
            output,
            domain,
            kind,
        }
    }

    /// A program that ignores its input.
    pub fn constant(id: &str, value: f64) -> Self {
        Self::new(
            id,
            Scope::Frame,
            OutputKind::Ratio,
            Domain::Any,
            ProgramKind::Constant(value),
        )
    }

    /// Check that a layout carries what this program reads.
    pub fn check_layout(&self, layout: Layout) -> Result<(), ProgramError> {
        let (ok, expected) = match self.domain {
            Domain::Mouse => (
                layout.keypoints == MOUSE_KEYPOINTS && layout.agents >= 2,
                "2+ agents x 7 keypoints",
            ),
            Domain::Fly => (
                layout.keypoints == fly::FLY_SLOTS && layout.agents >= 2,
                "2+ agents x 5 fly slots",
            ),
            Domain::Any => (true, "any layout"),
        };
        if ok {
            Ok(())
        } else {
            Err(ProgramError::Layout {
                id: self.id.clone(),
                expected,
                agents: layout.agents,
                keypoints: layout.keypoints,
            })
        }
    }

    /// Record this program on any algebra. The layout must already be checked.
    pub fn record<A: AttrAlgebra>(&self, alg: &mut A) -> A::V {
        use FrameRef::{Center, Previous};
        match self.kind {
            ProgramKind::MouseFacingAngle { agent, other } => {
                let nose = point(alg, Center, agent, NOSE);
                let neck = point(alg, Center, agent, NECK);
                let heading = vsub(alg, nose, neck);
                let c_self = centroid(alg, Center, agent);
                let c_other = centroid(alg, Center, other);
                let towards = vsub(alg, c_other, c_self);
                angle_between(alg, heading, towards)
            }
            ProgramKind::MouseSpeed { agent } => {
                let now = centroid(alg, Center, agent);
                let before = centroid(alg, Previous, agent);
                let d = vsub(alg, now, before);
                norm(alg, d)
            }
            ProgramKind::NoseNoseDistance => {
                let a = point(alg, Center, 0, NOSE);
                let b = point(alg, Center, 1, NOSE);
                let d = vsub(alg, a, b);
                norm(alg, d)
            }
            ProgramKind::NoseTailDistance => {
                let a = point(alg, Center, 0, NOSE);
                let b = point(alg, Center, 1, TAIL);
                let d = vsub(alg, a, b);
                norm(alg, d)
            }
            ProgramKind::HeadBodyAngle { agent } => {
                let nose = point(alg, Center, agent, NOSE);
                let neck = point(alg, Center, agent, NECK);
                let tail = point(alg, Center, agent, TAIL);
                let u = vsub(alg, nose, neck);
                let v = vsub(alg, tail, neck);
                angle_between(alg, u, v)
            }
            ProgramKind::NoseMovement { agent } => {
                let n1 = point(alg, Center, agent, NOSE);
                let n0 = point(alg, Previous, agent, NOSE);
                let c1 = centroid(alg, Center, agent);
                let c0 = centroid(alg, Previous, agent);
                let vn = vsub(alg, n1, n0);
                let vc = vsub(alg, c1, c0);
                let rel = vsub(alg, vn, vc);
                norm(alg, rel)
            }
            ProgramKind::FlySpeed { agent } => {
                let now = point(alg, Center, agent, fly::CENTROID);
                let before = point(alg, Previous, agent, fly::CENTROID);
                let d = vsub(alg, now, before);
                norm(alg, d)
            }
            ProgramKind::FlyDistance => {
                let a = point(alg, Center, 0, fly::CENTROID);
                let b = point(alg, Center, 1, fly::CENTROID);
                let d = vsub(alg, a, b);
                norm(alg, d)
            }
            ProgramKind::AngularSpeed { agent } => {
                let h1 = fly_heading(alg, Center, agent);
                let h0 = fly_heading(alg, Previous, agent);
                angle_between(alg, h0, h1)
            }
            ProgramKind::FlyFacingAngle { agent, other } => {
                let heading = fly_heading(alg, Center, agent);
                let c_self = point(alg, Center, agent, fly::CENTROID);
                let c_other = point(alg, Center, other, fly::CENTROID);
                let towards = vsub(alg, c_other, c_self);
                angle_between(alg, heading, towards)
            }
            ProgramKind::WingAngle { agent, extreme } => {
                let c = point(alg, Center, agent, fly::CENTROID);
                let heading = fly_heading(alg, Center, agent);
                let back = vneg(alg, heading);
                let wl = point(alg, Center, agent, fly::WING_LEFT);
                let wr = point(alg, Center, agent, fly::WING_RIGHT);
                let ul = vsub(alg, wl, c);
                let ur = vsub(alg, wr, c);
                let al = angle_between(alg, ul, back);
                let ar = angle_between(alg, ur, back);
                match extreme {
                    WingExtreme::Min => min(alg, al, ar),
                    WingExtreme::Max => max(alg, al, ar),
                }
            }
            ProgramKind::AxisRatio { agent } => {
                let c = point(alg, Center, agent, fly::CENTROID);
                let head = point(alg, Center, agent, fly::HEAD);
                let side = point(alg, Center, agent, fly::SIDE);
                let major = vsub(alg, head, c);
                let minor = vsub(alg, side, c);
                let a = norm(alg, major);
                let b = norm(alg, minor);
                alg.div(a, b)
            }
            ProgramKind::Constant(v) => alg.constant(v),
        }
    }
}

fn fly_heading<A: AttrAlgebra>(alg: &mut A, frame: FrameRef, agent: usize) -> algebra::V2<A::V> {
    let head = point(alg, frame, agent, fly::HEAD);
    let c = point(alg, frame, agent, fly::CENTROID);
    vsub(alg, head, c)
}

/// One program output plus a flag raised on degenerate geometry
/// (an angle of a zero-length vector, or a zero denominator). The value is
/// then 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttributeValue {
    pub value: f64,
    pub degenerate: bool,
}

pub fn evaluate_program(p: &AttributeProgram, w: &Window) -> Result<AttributeValue, ProgramError> {
    p.check_layout(w.layout())?;
    let mut alg = WindowAlgebra::new(w);
    let value = p.record(&mut alg);
    Ok(AttributeValue {
        value,
        degenerate: alg.degenerate,
    })
}

/// Facing angle from two centroids and an explicit heading angle `phi`,
/// folded to `|wrap(atan2(dy, dx) - phi)|` in `[0, pi]`.
pub fn facing_angle_from_heading(c1: (f64, f64), c2: (f64, f64), phi: f64) -> f64 {
    let theta = (c2.1 - c1.1).atan2(c2.0 - c1.0);
    let d = theta - phi;
    d.sin().atan2(d.cos()).abs()
}

/// Lookup of built-in programs by id.
pub struct ProgramRegistry {
    programs: Vec<AttributeProgram>,
}

impl ProgramRegistry {
    pub fn builtin() -> Self {
        use OutputKind::*;
        use ProgramKind::*;
        use Scope::{Frame, Window};
        let m = Domain::Mouse;
        let f = Domain::Fly;
        let p = AttributeProgram::new;
        let programs = vec![
            p(
                "facing_angle_m1",
                Frame,
                Angle,
                m,
                MouseFacingAngle { agent: 0, other: 1 },
            ),
            p(
                "facing_angle_m2",
                Frame,
                Angle,
                m,
                MouseFacingAngle { agent: 1, other: 0 },
            ),
            p("speed_m1", Window, Speed, m, MouseSpeed { agent: 0 }),
            p("speed_m2", Window, Speed, m, MouseSpeed { agent: 1 }),
            p("nose_nose_dist", Frame, Length, m, NoseNoseDistance),
            p("nose_tail_dist", Frame, Length, m, NoseTailDistance),
            p(
                "head_body_angle_m1",
                Frame,
                Angle,
                m,
                HeadBodyAngle { agent: 0 },
            ),
            p(
                "head_body_angle_m2",
                Frame,
                Angle,
                m,
                HeadBodyAngle { agent: 1 },
            ),
            p(
                "nose_movement_m1",
                Window,
                Speed,
                m,
                NoseMovement { agent: 0 },
            ),
            p(
                "nose_movement_m2",
                Window,
                Speed,
                m,
                NoseMovement { agent: 1 },
            ),
            p("speed_f1", Window, Speed, f, FlySpeed { agent: 0 }),
            p("speed_f2", Window, Speed, f, FlySpeed { agent: 1 }),
            p("fly_distance", Frame, Length, f, FlyDistance),
            p(
                "angular_speed_f1",
                Window,
                Angle,
                f,
                AngularSpeed { agent: 0 },
            ),
            p(
                "angular_speed_f2",
                Window,
                Angle,
                f,
                AngularSpeed { agent: 1 },
            ),
            p(
                "facing_angle_f1",
                Frame,
                Angle,
                f,
                FlyFacingAngle { agent: 0, other: 1 },
            ),
            p(
                "facing_angle_f2",
                Frame,
                Angle,
                f,
                FlyFacingAngle { agent: 1, other: 0 },
            ),
            p(
                "min_wing_angle_f1",
                Frame,
                Angle,
                f,
                WingAngle {
                    agent: 0,
                    extreme: WingExtreme::Min,
                },
            ),
            p(
                "max_wing_angle_f1",
                Frame,
                Angle,
                f,
                WingAngle {
                    agent: 0,
                    extreme: WingExtreme::Max,
                },
            ),
            p(
                "min_wing_angle_f2",
                Frame,
                Angle,
                f,
                WingAngle {
                    agent: 1,
                    extreme: WingExtreme::Min,
                },
            ),
            p(
                "max_wing_angle_f2",
                Frame,
                Angle,
                f,
                WingAngle {
                    agent: 1,
                    extreme: WingExtreme::Max,
                },
            ),
            p("axis_ratio_f1", Frame, Ratio, f, AxisRatio { agent: 0 }),
            p("axis_ratio_f2", Frame, Ratio, f, AxisRatio { agent: 1 }),
        ];
        Self { programs }
    }

    pub fn get(&self, id: &str) -> Result<&AttributeProgram, ProgramError> {
        self.programs
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| ProgramError::Unknown(id.to_string()))
    }

    pub fn domain(&self, d: Domain) -> Vec<AttributeProgram> {
        self.programs
            .iter()
            .filter(|p| p.domain == d)
            .cloned()
            .collect()
    }

    /// Resolve a comma-separated list of ids; `all_mouse` and `all_fly` expand
    /// to the full domain sets.
    pub fn resolve(&self, spec: &str) -> Result<Vec<AttributeProgram>, ProgramError> {
        let mut out = Vec::new();
        for id in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match id {
                "all_mouse" => out.extend(self.domain(Domain::Mouse)),
                "all_fly" => out.extend(self.domain(Domain::Fly)),
                other => out.push(self.get(other)?.clone()),
            }
        }
        Ok(out)
    }
}

/// Ordered programs with optional fitted discretizers and per-program loss
/// scales (typically the sample standard deviation; 1 when unset).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramSet {
    pub programs: Vec<AttributeProgram>,
    pub discretizers: Vec<Option<Discretizer>>,
    pub scales: Vec<f64>,
}

impl ProgramSet {
    pub fn new(programs: Vec<AttributeProgram>) -> Result<Self, ProgramError> {
        if programs.is_empty() {
            return Err(ProgramError::Empty);
        }
        for (i, p) in programs.iter().enumerate() {
            if programs[..i].iter().any(|q| q.id == p.id) {
                return Err(ProgramError::Duplicate(p.id.clone()));
            }
        }
        let n = programs.len();
        Ok(Self {
            programs,
            discretizers: vec![None; n],
            scales: vec![1.0; n],
        })
    }

    pub fn from_spec(spec: &str) -> Result<Self, ProgramError> {
        Self::new(ProgramRegistry::builtin().resolve(spec)?)
    }

    pub fn len(&self) -> usize {
        self.programs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.programs.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.programs.iter().map(|p| p.id.as_str()).collect()
    }

    pub fn check_layout(&self, layout: Layout) -> Result<(), ProgramError> {
        self.programs
            .iter()
            .try_for_each(|p| p.check_layout(layout))
    }

    /// Continuous attribute vector only.
    pub fn evaluate_values(&self, w: &Window) -> Result<Vec<f64>, ProgramError> {
        self.programs
            .iter()
            .map(|p| evaluate_program(p, w).map(|v| v.value))
            .collect()
    }

    /// Fit every discretizer from attribute rows (one row per window) and set
    /// scales to the per-program standard deviation.
    pub fn fit(&mut self, rows: &[Vec<f64>]) -> Result<(), ProgramError> {
        for (j, p) in self.programs.iter().enumerate() {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            if col.len() < MIN_FIT_SAMPLE {
                return Err(ProgramError::SampleTooSmall {
                    id: p.id.clone(),
                    needed: MIN_FIT_SAMPLE,
                    got: col.len(),
                });
            }
            let d = Discretizer::fit_values(&col)
                .map_err(|_| ProgramError::Degenerate(p.id.clone()))?;
            self.discretizers[j] = Some(d);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            self.scales[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(())
    }

    pub fn classify(&self, values: &[f64]) -> Result<Vec<usize>, ProgramError> {
        values
            .iter()
            .zip(&self.discretizers)
            .zip(&self.programs)
            .map(|((&v, d), p)| {
                d.as_ref()
                    .map(|d| discretize(v, d))
                    .ok_or_else(|| ProgramError::NotFitted(p.id.clone()))
            })
            .collect()
    }
}

/// Continuous attribute vector and class vector, in program order.
pub fn evaluate_program_set(
    ps: &ProgramSet,
    w: &Window,
) -> Result<(Vec<f64>, Vec<usize>), ProgramError> {
    let values = ps.evaluate_values(w)?;
    let classes = ps.classify(&values)?;
    Ok((values, classes))
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::trajectory::{FrameState, Keypoint};

    /// Mouse pose with the given centroid offsets: nose ahead, tail behind,
    /// heading along +x when `heading = 0`.
    pub(crate) fn mouse(cx: f64, cy: f64, heading: f64, len: f64) -> Vec<Keypoint> {
        let offs = [
            (0.5, 0.0),
            (0.3, 0.1),
            (0.3, -0.1),
            (0.2, 0.0),
            (-0.2, 0.12),
            (-0.2, -0.12),
            (-0.5, 0.0),
        ];
        // shift so the keypoint mean sits at the requested centroid
        let mx = offs.iter().map(|o| o.0).sum::<f64>() / 7.0;
        let my = offs.iter().map(|o| o.1).sum::<f64>() / 7.0;
        let (s, c) = heading.sin_cos();
        offs.iter()
            .map(|&(ox, oy)| {
                let (ox, oy) = ((ox - mx) * len, (oy - my) * len);
                Keypoint::new(cx + c * ox - s * oy, cy + s * ox + c * oy)
            })
            .collect()
    }

    fn window_of(frames: Vec<Vec<Vec<Keypoint>>>) -> Window {
        Window::new(
            frames
                .into_iter()
                .map(|a| FrameState::from_agents(&a).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn alg1_facing_angle_examples() {
        assert!((facing_angle_from_heading((0.0, 0.0), (1.0, 1.0), 0.0) - PI / 4.0).abs() < 1e-15);
        let expected = 4f64.atan2(3.0) - 0.5;
        let got = facing_angle_from_heading((0.0, 0.0), (3.0, 4.0), 0.5);
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.4273).abs() < 1e-4);
    }

    #[test]
    fn keypoint_facing_angle_matches_heading_form() {
        let m1 = mouse(0.0, 0.0, 0.5, 0.1);
        let m2 = mouse(3.0, 4.0, 1.0, 0.1);
        let w = window_of(vec![vec![m1.clone(), m2.clone()]; 3]);
        let reg = ProgramRegistry::builtin();
        let v = evaluate_program(reg.get("facing_angle_m1").unwrap(), &w).unwrap();
        let oracle = facing_angle_from_heading((0.0, 0.0), (3.0, 4.0), 0.5);
        assert!(
            (v.value - oracle).abs() < 1e-12,
            "{} vs {}",
            v.value,
            oracle
        );
        assert!(!v.degenerate);
    }

    #[test]
    fn speed_is_centroid_displacement() {
        let before = vec![mouse(0.0, 0.0, 0.0, 0.1), mouse(1.0, 1.0, 0.0, 0.1)];
        let after = vec![mouse(3.0, 4.0, 0.0, 0.1), mouse(1.0, 1.0, 0.0, 0.1)];
        let w = window_of(vec![before.clone(), after, before]);
        let reg = ProgramRegistry::builtin();
        let s1 = evaluate_program(reg.get("speed_m1").unwrap(), &w)
            .unwrap()
            .value;
        let s2 = evaluate_program(reg.get("speed_m2").unwrap(), &w)
            .unwrap()
            .value;
        assert!((s1 - 5.0).abs() < 1e-12);
        assert_eq!(s2, 0.0);
    }

    #[test]
    fn stationary_agent_has_no_speed_or_nose_movement() {
        let pose = vec![mouse(0.2, 0.3, 1.0, 0.1), mouse(0.6, 0.5, 2.0, 0.1)];
        let w = window_of(vec![pose; 21]);
        let ps =
            ProgramSet::from_spec("speed_m1,speed_m2,nose_movement_m1,nose_movement_m2").unwrap();
        for v in ps.evaluate_values(&w).unwrap() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn coincident_keypoints_fall_back_to_zero_with_flag() {
        let flat = vec![Keypoint::new(0.5, 0.5); 7];
        let w = window_of(vec![vec![flat.clone(), flat]; 3]);
        let reg = ProgramRegistry::builtin();
        let v = evaluate_program(reg.get("head_body_angle_m1").unwrap(), &w).unwrap();
        assert_eq!(v.value, 0.0);
        assert!(v.degenerate);
    }

    #[test]
    fn unknown_program_and_wrong_layout() {
        let reg = ProgramRegistry::builtin();
        assert_eq!(
            reg.get("wing_flap").unwrap_err(),
            ProgramError::Unknown("wing_flap".into())
        );
        let w = window_of(vec![vec![vec![Keypoint::new(0.0, 0.0); 3]; 2]]);
        assert!(matches!(
            evaluate_program(reg.get("speed_m1").unwrap(), &w),
            Err(ProgramError::Layout { .. })
        ));
    }

    #[test]
    fn aliases_reproduce_attribute_tables() {
        let reg = ProgramRegistry::builtin();
        assert_eq!(reg.resolve("all_mouse").unwrap().len(), 10);
        assert_eq!(reg.resolve("all_fly").unwrap().len(), 13);
        assert!(ProgramSet::from_spec("speed_m1,speed_m1").is_err());
    }

    #[test]
    fn program_set_arity_and_determinism() {
        let mut ps = ProgramSet::from_spec("all_mouse").unwrap();
        let rows: Vec<Vec<f64>> = (0..150)
            .map(|i| (0..10).map(|j| ((i * 7 + j * 13) % 31) as f64).collect())
            .collect();
        ps.fit(&rows).unwrap();
        let w = window_of(vec![
            vec![mouse(0.3, 0.3, 0.2, 0.1), mouse(0.6, 0.4, 2.0, 0.1)],
            vec![mouse(0.31, 0.3, 0.25, 0.1), mouse(0.58, 0.41, 2.1, 0.1)],
            vec![mouse(0.32, 0.31, 0.3, 0.1), mouse(0.57, 0.42, 2.2, 0.1)],
        ]);
        let (v1, c1) = evaluate_program_set(&ps, &w).unwrap();
        let (v2, c2) = evaluate_program_set(&ps, &w).unwrap();
        assert_eq!(v1.len(), 10);
        assert_eq!(c1.len(), 10);
        assert!(v1.iter().zip(&v2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(c1, c2);
    }
}
