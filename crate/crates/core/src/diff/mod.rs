//! Differentiable substrate: parameter storage, a reverse-mode tape with
//! per-primitive backward rules, Adam, finite-difference checking and
//! checkpoint files.

mod adam;
mod checkpoint;
mod gradcheck;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{gradient_check, GradientReport, FD_STEP, RELATIVE_FLOOR};
pub use params::{Gradients, ParamId, ParameterStore};
pub use tape::{AffineParams, GruParams, NodeId, Tape};

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("non-finite value produced by `{primitive}` (node {node})")]
    NonFinite {
        primitive: &'static str,
        node: usize,
    },
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("parameter `{0}` registered twice")]
    DuplicateParameter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("update produced a non-finite value in `{0}`")]
    NonFiniteUpdate(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl<S: Scalar> Tape<S> {
    /// Per-row Gaussian negative log-density with unit variance, `n x d -> n x 1`:
    /// `0.5 * |x - mean|^2 + 0.5 * d * ln(2 pi)`.
    pub fn gaussian_nll_rows(&mut self, mean: NodeId, target: NodeId) -> NodeId {
        let d = self.value(mean).ncols();
        let diff = self.sub(mean, target);
        let sq = self.square(diff);
        let rows = self.sum_cols(sq);
        let half = self.scale(rows, S::lit(0.5));
        self.add_scalar(
            half,
            S::lit(0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()),
        )
    }

    /// Per-row `KL(N(mu, exp(logvar)) || N(0, I))`, `n x d -> n x 1`.
    pub fn kl_unit_gaussian_rows(&mut self, mu: NodeId, logvar: NodeId) -> NodeId {
        let mu2 = self.square(mu);
        let var = self.exp(logvar);
        let a = self.add(mu2, var);
        let b = self.sub(a, logvar);
        let c = self.add_scalar(b, -S::one());
        let rows = self.sum_cols(c);
        self.scale(rows, S::lit(0.5))
    }

    /// Row-wise dot products of two `n x d` nodes, `n x 1`.
    pub fn dot_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let p = self.mul(a, b);
        self.sum_cols(p)
    }

    /// Rows scaled to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let sq = self.square(a);
        let ss = self.sum_cols(sq);
        let eps = self.add_scalar(ss, S::lit(1e-12));
        let norm = self.sqrt(eps);
        self.div_col(a, norm)
    }
}
