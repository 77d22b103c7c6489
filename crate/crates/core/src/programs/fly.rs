//! Fly poses as tracked ellipses plus wing tips, packed into keypoint slots
//! so they share the trajectory representation:
//! slot 0 ellipse center, 1 front end of the major axis, 2 one end of the
//! minor axis, 3 left wing tip, 4 right wing tip.

use crate::trajectory::Keypoint;

pub const FLY_SLOTS: usize = 5;
pub const CENTROID: usize = 0;
pub const HEAD: usize = 1;
pub const SIDE: usize = 2;
pub const WING_LEFT: usize = 3;
pub const WING_RIGHT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlyPose {
    pub center: Keypoint,
    /// Heading in radians.
    pub orientation: f64,
    /// Full major axis length.
    pub major: f64,
    /// Full minor axis length.
    pub minor: f64,
    pub wing_left: Keypoint,
    pub wing_right: Keypoint,
}

impl FlyPose {
    pub fn encode(&self) -> Vec<Keypoint> {
        let (s, c) = self.orientation.sin_cos();
        let a = 0.5 * self.major;
        let b = 0.5 * self.minor;
        let o = self.center;
        vec![
            o,
            Keypoint::new(o.x + a * c, o.y + a * s),
            Keypoint::new(o.x - b * s, o.y + b * c),
            self.wing_left,
            self.wing_right,
        ]
    }

    pub fn decode(slots: &[Keypoint]) -> Self {
        let o = slots[CENTROID];
        let h = slots[HEAD];
        let sd = slots[SIDE];
        Self {
            center: o,
            orientation: (h.y - o.y).atan2(h.x - o.x),
            major: 2.0 * (h.x - o.x).hypot(h.y - o.y),
            minor: 2.0 * (sd.x - o.x).hypot(sd.y - o.y),
            wing_left: slots[WING_LEFT],
            wing_right: slots[WING_RIGHT],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::programs::{evaluate_program, ProgramRegistry};
    use crate::trajectory::{FrameState, Window};

    fn fly(cx: f64, cy: f64, th: f64, wl: f64, wr: f64) -> FlyPose {
        // wings spread backwards at the given angles from the rear axis
        let back = th + std::f64::consts::PI;
        let wing = |a: f64| Keypoint::new(cx + 0.02 * a.cos(), cy + 0.02 * a.sin());
        FlyPose {
            center: Keypoint::new(cx, cy),
            orientation: th,
            major: 0.04,
            minor: 0.016,
            wing_left: wing(back - wl),
            wing_right: wing(back + wr),
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let p = fly(0.3, 0.4, 0.7, 0.2, 0.5);
        let q = FlyPose::decode(&p.encode());
        assert!((q.orientation - 0.7).abs() < 1e-12);
        assert!((q.major - 0.04).abs() < 1e-12);
        assert!((q.minor - 0.016).abs() < 1e-12);
    }

    #[test]
    fn fly_programs_on_known_pose() {
        let before = vec![
            fly(0.3, 0.4, 0.7, 0.2, 0.5).encode(),
            fly(0.6, 0.4, 3.0, 0.1, 0.1).encode(),
        ];
        let after = vec![
            fly(0.33, 0.44, 0.9, 0.2, 0.5).encode(),
            fly(0.6, 0.4, 3.0, 0.1, 0.1).encode(),
        ];
        let fr = |a: &Vec<Vec<Keypoint>>| FrameState::from_agents(a).unwrap();
        let w = Window::new(vec![fr(&before), fr(&after), fr(&after)]).unwrap();
        let reg = ProgramRegistry::builtin();
        let val = |id: &str| evaluate_program(reg.get(id).unwrap(), &w).unwrap().value;
        assert!((val("speed_f1") - 0.05).abs() < 1e-12);
        assert!((val("angular_speed_f1") - 0.2).abs() < 1e-12);
        assert!((val("min_wing_angle_f1") - 0.2).abs() < 1e-12);
        assert!((val("max_wing_angle_f1") - 0.5).abs() < 1e-12);
        assert!((val("axis_ratio_f1") - 2.5).abs() < 1e-12);
        assert!((val("fly_distance") - (0.27f64.hypot(0.04))).abs() < 1e-12);
    }
}
