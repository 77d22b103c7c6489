//! Arithmetic the built-in programs are written against. One implementation
//! evaluates on concrete windows in `f64`; the other records onto a tape so
//! programs can sit inside a differentiable loss.

use std::collections::HashMap;

use crate::diff::{NodeId, Tape};
use crate::scalar::Scalar;
use crate::trajectory::{Layout, Window};

/// Which frame of a window a coordinate is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameRef {
    Center,
    /// The frame just before the center (the center itself for one-frame windows).
    Previous,
}

pub trait AttrAlgebra {
    type V: Copy;

    fn layout(&self) -> Layout;
    /// `axis` is 0 for x, 1 for y.
    fn coord(&mut self, frame: FrameRef, agent: usize, keypoint: usize, axis: usize) -> Self::V;
    fn constant(&mut self, v: f64) -> Self::V;
    fn add(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn sub(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn mul(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn div(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn scale(&mut self, a: Self::V, f: f64) -> Self::V;
    fn sqrt(&mut self, a: Self::V) -> Self::V;
    fn abs(&mut self, a: Self::V) -> Self::V;
    fn atan2(&mut self, y: Self::V, x: Self::V) -> Self::V;
}

/// Evaluation on a concrete window.
pub struct WindowAlgebra<'a> {
    window: &'a Window,
    /// Set when an angle was requested from a zero-length vector.
    pub degenerate: bool,
}

impl<'a> WindowAlgebra<'a> {
    pub fn new(window: &'a Window) -> Self {
        Self {
            window,
            degenerate: false,
        }
    }
}

impl AttrAlgebra for WindowAlgebra<'_> {
    type V = f64;

    fn layout(&self) -> Layout {
        self.window.layout()
    }

    fn coord(&mut self, frame: FrameRef, agent: usize, keypoint: usize, axis: usize) -> f64 {
        let c = self.window.center_index;
        let idx = match frame {
            FrameRef::Center => c,
            FrameRef::Previous => c.saturating_sub(1),
        };
        let f = &self.window.frames[idx];
        f.stacked()[f.layout().offset(agent, keypoint) + axis]
    }

    fn constant(&mut self, v: f64) -> f64 {
        v
    }
    fn add(&mut self, a: f64, b: f64) -> f64 {
        a + b
    }
    fn sub(&mut self, a: f64, b: f64) -> f64 {
        a - b
    }
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        a * b
    }
    fn div(&mut self, a: f64, b: f64) -> f64 {
        if b == 0.0 {
            self.degenerate = true;
            0.0
        } else {
            a / b
        }
    }
    fn scale(&mut self, a: f64, f: f64) -> f64 {
        a * f
    }
    fn sqrt(&mut self, a: f64) -> f64 {
        a.max(0.0).sqrt()
    }
    fn abs(&mut self, a: f64) -> f64 {
        a.abs()
    }
    fn atan2(&mut self, y: f64, x: f64) -> f64 {
        if x == 0.0 && y == 0.0 {
            self.degenerate = true;
            return 0.0;
        }
        y.atan2(x)
    }
}

/// Records program arithmetic on a tape. Every value is a `B x 1` column,
/// one row per batch element; frames are `B x state_dim` nodes.
pub struct TapeAlgebra<'t, S: Scalar> {
    tape: &'t mut Tape<S>,
    layout: Layout,
    center: NodeId,
    previous: NodeId,
    rows: usize,
    cache: HashMap<(FrameRef, usize), NodeId>,
}

impl<'t, S: Scalar> TapeAlgebra<'t, S> {
    /// `frames` is the whole (generated) window; `center_index` selects the
    /// frame frame-scoped programs read.
    pub fn new(
        tape: &'t mut Tape<S>,
        layout: Layout,
        frames: &[NodeId],
        center_index: usize,
    ) -> Self {
        let center = frames[center_index];
        let previous = frames[center_index.saturating_sub(1)];
        let rows = tape.value(center).nrows();
        Self {
            tape,
            layout,
            center,
            previous,
            rows,
            cache: HashMap::new(),
        }
    }

    pub fn tape(&mut self) -> &mut Tape<S> {
        self.tape
    }
}

impl<S: Scalar> AttrAlgebra for TapeAlgebra<'_, S> {
    type V = NodeId;

    fn layout(&self) -> Layout {
        self.layout
    }

    fn coord(&mut self, frame: FrameRef, agent: usize, keypoint: usize, axis: usize) -> NodeId {
        let col = self.layout.offset(agent, keypoint) + axis;
        if let Some(&n) = self.cache.get(&(frame, col)) {
            return n;
        }
        let src = match frame {
            FrameRef::Center => self.center,
            FrameRef::Previous => self.previous,
        };
        let n = self.tape.slice_cols(src, col, 1);
        self.cache.insert((frame, col), n);
        n
    }

    fn constant(&mut self, v: f64) -> NodeId {
        self.tape.constant(self.rows, 1, S::lit(v))
    }
    fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.tape.add(a, b)
    }
    fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.tape.sub(a, b)
    }
    fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.tape.mul(a, b)
    }
    fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.tape.div(a, b)
    }
    fn scale(&mut self, a: NodeId, f: f64) -> NodeId {
        self.tape.scale(a, S::lit(f))
    }
    fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.tape.sqrt(a)
    }
    fn abs(&mut self, a: NodeId) -> NodeId {
        self.tape.abs(a)
    }
    fn atan2(&mut self, y: NodeId, x: NodeId) -> NodeId {
        self.tape.atan2(y, x)
    }
}

/// 2-D vector of algebra values.
#[derive(Debug, Clone, Copy)]
pub struct V2<V> {
    pub x: V,
    pub y: V,
}

pub fn point<A: AttrAlgebra>(alg: &mut A, frame: FrameRef, agent: usize, kp: usize) -> V2<A::V> {
    V2 {
        x: alg.coord(frame, agent, kp, 0),
        y: alg.coord(frame, agent, kp, 1),
    }
}

/// Mean of all keypoints of one agent.
pub fn centroid<A: AttrAlgebra>(alg: &mut A, frame: FrameRef, agent: usize) -> V2<A::V> {
    let k = alg.layout().keypoints;
    let mut acc = point(alg, frame, agent, 0);
    for kp in 1..k {
        let p = point(alg, frame, agent, kp);
        acc = vadd(alg, acc, p);
    }
    V2 {
        x: alg.scale(acc.x, 1.0 / k as f64),
        y: alg.scale(acc.y, 1.0 / k as f64),
    }
}

pub fn vadd<A: AttrAlgebra>(alg: &mut A, a: V2<A::V>, b: V2<A::V>) -> V2<A::V> {
    V2 {
        x: alg.add(a.x, b.x),
        y: alg.add(a.y, b.y),
    }
}

pub fn vsub<A: AttrAlgebra>(alg: &mut A, a: V2<A::V>, b: V2<A::V>) -> V2<A::V> {
    V2 {
        x: alg.sub(a.x, b.x),
        y: alg.sub(a.y, b.y),
    }
}

pub fn vneg<A: AttrAlgebra>(alg: &mut A, a: V2<A::V>) -> V2<A::V> {
    V2 {
        x: alg.scale(a.x, -1.0),
        y: alg.scale(a.y, -1.0),
    }
}

pub fn dot<A: AttrAlgebra>(alg: &mut A, a: V2<A::V>, b: V2<A::V>) -> A::V {
    let xx = alg.mul(a.x, b.x);
    let yy = alg.mul(a.y, b.y);
    alg.add(xx, yy)
}

pub fn cross<A: AttrAlgebra>(alg: &mut A, a: V2<A::V>, b: V2<A::V>) -> A::V {
    let xy = alg.mul(a.x, b.y);
    let yx = alg.mul(a.y, b.x);
    alg.sub(xy, yx)
}

pub fn norm<A: AttrAlgebra>(alg: &mut A, a: V2<A::V>) -> A::V {
    let d = dot(alg, a, a);
    alg.sqrt(d)
}

/// Unsigned angle between two vectors in `[0, pi]`; equals `|wrap(theta_b - theta_a)|`.
pub fn angle_between<A: AttrAlgebra>(alg: &mut A, a: V2<A::V>, b: V2<A::V>) -> A::V {
    let c = cross(alg, a, b);
    let c = alg.abs(c);
    let d = dot(alg, a, b);
    alg.atan2(c, d)
}

pub fn min<A: AttrAlgebra>(alg: &mut A, a: A::V, b: A::V) -> A::V {
    let s = alg.add(a, b);
    let d = alg.sub(a, b);
    let d = alg.abs(d);
    let m = alg.sub(s, d);
    alg.scale(m, 0.5)
}

pub fn max<A: AttrAlgebra>(alg: &mut A, a: A::V, b: A::V) -> A::V {
    let s = alg.add(a, b);
    let d = alg.sub(a, b);
    let d = alg.abs(d);
    let m = alg.add(s, d);
    alg.scale(m, 0.5)
}
