//! Learned stand-in for an attribute program, used as the gradient path of
//! the consistency loss when the program itself should not be
//! differentiated.
//!
//! The network reads the two frames a program can depend on (previous and
//! center). Each GRU step sees `[s_t, s_t - s_prev]`, standardized with
//! training statistics; the output is de-standardized to program units.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TaskError;
use crate::diff::{adam_step, AdamConfig, AffineParams, GruParams, NodeId, ParameterStore, Tape};
use crate::programs::{evaluate_program, AttributeProgram};
use crate::scalar::Scalar;
use crate::trajectory::Window;

pub const MIN_APPROX_WINDOWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproxConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Validation relative error to reach.
    pub target_error: f64,
    pub val_fraction: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for ApproxConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            steps: 5000,
            batch: 128,
            lr: 1e-3,
            target_error: 0.02,
            val_fraction: 0.1,
            eval_every: 250,
            seed: 0,
        }
    }
}

/// Parameter handles and normalization constants.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproxNet {
    pub gru: GruParams,
    pub out: AffineParams,
    /// Per input feature: `(x - shift) * gain`.
    shift: Vec<f64>,
    gain: Vec<f64>,
    y_mean: f64,
    y_std: f64,
}

impl ApproxNet {
    fn step_input<S: Scalar>(&self, tape: &mut Tape<S>, s: NodeId, delta: NodeId) -> NodeId {
        let x = tape.concat_cols(&[s, delta]);
        let rows = tape.value(x).nrows();
        let shift = tape.input(Array2::from_shape_fn((rows, self.shift.len()), |(_, j)| {
            S::lit(-self.shift[j])
        }));
        let gain = tape.input(Array2::from_shape_fn((rows, self.gain.len()), |(_, j)| {
            S::lit(self.gain[j])
        }));
        let x = tape.add(x, shift);
        tape.mul(x, gain)
    }

    /// Prediction in program units, `B x 1`.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        prev: NodeId,
        center: NodeId,
    ) -> NodeId {
        let rows = tape.value(center).nrows();
        let d = tape.value(center).ncols();
        let zero = tape.constant(rows, d, S::zero());
        let delta = tape.sub(center, prev);
        let h0 = tape.constant(rows, self.gru.hidden, S::zero());
        let x0 = self.step_input(tape, prev, zero);
        let h1 = tape.gru_step(store, self.gru, x0, h0);
        let x1 = self.step_input(tape, center, delta);
        let h2 = tape.gru_step(store, self.gru, x1, h1);
        let y = tape.affine(store, self.out, h2);
        let y = tape.scale(y, S::lit(self.y_std));
        tape.add_scalar(y, S::lit(self.y_mean))
    }
}

/// A trained approximator with its own parameters.
#[derive(Debug, Clone)]
pub struct ProgramApproximator {
    pub program: AttributeProgram,
    pub net: ApproxNet,
    pub store: ParameterStore<f32>,
    /// Validation relative error, `mean|pred - y| / mean|y|`.
    pub val_error: f64,
    pub steps_trained: usize,
}

impl ProgramApproximator {
    /// Copy the parameters into `store` under `prefix`; the returned net
    /// refers to the copies.
    pub fn install<S: Scalar>(
        &self,
        store: &mut ParameterStore<S>,
        prefix: &str,
    ) -> Result<ApproxNet, TaskError> {
        let mut copy = |id: crate::diff::ParamId| -> Result<crate::diff::ParamId, TaskError> {
            let name = format!("{prefix}.{}", self.store.name(id));
            let v = self.store.get(id).mapv(|x| S::lit(x as f64));
            Ok(store.insert(&name, v)?)
        };
        let gru = GruParams {
            w_input: copy(self.net.gru.w_input)?,
            w_hidden: copy(self.net.gru.w_hidden)?,
            b_input: copy(self.net.gru.b_input)?,
            b_hidden: copy(self.net.gru.b_hidden)?,
            hidden: self.net.gru.hidden,
        };
        let out = AffineParams {
            weight: copy(self.net.out.weight)?,
            bias: copy(self.net.out.bias)?,
        };
        Ok(ApproxNet {
            gru,
            out,
            ..self.net.clone()
        })
    }

    /// Predictions for windows, in program units.
    pub fn predict(&self, windows: &[Window]) -> Vec<f64> {
        let mut out = Vec::with_capacity(windows.len());
        for part in windows.chunks(512) {
            let (prev, center) = scope_frames::<f32>(part.iter());
            let mut tape = Tape::frozen();
            let p = tape.input(prev);
            let c = tape.input(center);
            let y = self.net.forward(&mut tape, &self.store, p, c);
            out.extend(tape.value(y).iter().map(|&v| v as f64));
        }
        out
    }
}

fn scope_frames<'a, S: Scalar>(
    windows: impl Iterator<Item = &'a Window>,
) -> (Array2<S>, Array2<S>) {
    let ws: Vec<&Window> = windows.collect();
    let d = ws[0].layout().state_dim();
    let mut prev = Array2::zeros((ws.len(), d));
    let mut center = Array2::zeros((ws.len(), d));
    for (i, w) in ws.iter().enumerate() {
        let c = w.center_index;
        for (j, &v) in w.frames[c.saturating_sub(1)].stacked().iter().enumerate() {
            prev[[i, j]] = S::lit(v);
        }
        for (j, &v) in w.frames[c].stacked().iter().enumerate() {
            center[[i, j]] = S::lit(v);
        }
    }
    (prev, center)
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn relative_error(pred: &[f64], y: &[f64]) -> f64 {
    let num: f64 = pred.iter().zip(y).map(|(p, t)| (p - t).abs()).sum();
    let den: f64 = y.iter().map(|t| t.abs()).sum();
    if den > 0.0 {
        num / den
    } else {
        num / y.len() as f64
    }
}

/// Fit a GRU regressor to `p` on `windows` (at least 10^4). Fails with the
/// best validation error if the target is not reached within the budget.
pub fn train_program_approximator(
    p: &AttributeProgram,
    windows: &[Window],
    cfg: &ApproxConfig,
) -> Result<ProgramApproximator, TaskError> {
    if windows.len() < MIN_APPROX_WINDOWS {
        return Err(TaskError::TooFewWindows {
            needed: MIN_APPROX_WINDOWS,
            got: windows.len(),
        });
    }
    let targets = windows
        .iter()
        .map(|w| evaluate_program(p, w).map(|v| v.value))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((windows.len() as f64 * cfg.val_fraction).round() as usize).max(1);
    let (val_idx, train_idx) = order.split_at(n_val);

    let d = windows[0].layout().state_dim();
    let mut shift = vec![0.0; 2 * d];
    let mut gain = vec![1.0; 2 * d];
    for j in 0..d {
        let pos = train_idx.iter().map(|&i| {
            let w = &windows[i];
            w.frames[w.center_index].stacked()[j]
        });
        let (m, s) = mean_std(pos);
        shift[j] = m;
        gain[j] = if s > 0.0 { 1.0 / s } else { 1.0 };
        let del = train_idx.iter().map(|&i| {
            let w = &windows[i];
            let c = w.center_index;
            w.frames[c].stacked()[j] - w.frames[c.saturating_sub(1)].stacked()[j]
        });
        let (m, s) = mean_std(del);
        shift[d + j] = m;
        gain[d + j] = if s > 0.0 { 1.0 / s } else { 1.0 };
    }
    let (y_mean, y_std) = mean_std(train_idx.iter().map(|&i| targets[i]));

    let mut store = ParameterStore::<f32>::new(cfg.seed ^ 0xA5A5);
    let gru = GruParams::register(&mut store, "approx.gru", 2 * d, cfg.hidden)?;
    let out = AffineParams::register(&mut store, "approx.out", cfg.hidden, 1)?;
    let net = ApproxNet {
        gru,
        out,
        shift,
        gain,
        y_mean,
        y_std,
    };
    let mut approx = ProgramApproximator {
        program: p.clone(),
        net,
        store,
        val_error: f64::INFINITY,
        steps_trained: 0,
    };
    let val_windows: Vec<Window> = val_idx.iter().map(|&i| windows[i].clone()).collect();
    let val_y: Vec<f64> = val_idx.iter().map(|&i| targets[i]).collect();
    let validate = |a: &ProgramApproximator| relative_error(&a.predict(&val_windows), &val_y);

    let adam = AdamConfig::with_lr(cfg.lr);
    let mut best = validate(&approx);
    let mut best_store = approx.store.clone();
    approx.val_error = best;
    if best <= cfg.target_error {
        return Ok(approx);
    }
    for step in 1..=cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch)
            .map(|_| train_idx[rng.random_range(0..train_idx.len())])
            .collect();
        let (prev, center) = scope_frames::<f32>(idx.iter().map(|&i| &windows[i]));
        let y = Array2::from_shape_fn((idx.len(), 1), |(r, _)| targets[idx[r]] as f32);
        let mut tape = Tape::new();
        let pn = tape.input(prev);
        let cn = tape.input(center);
        let pred = approx.net.forward(&mut tape, &approx.store, pn, cn);
        let yn = tape.input(y);
        let diff = tape.sub(pred, yn);
        // squared error in standardized units
        let diff = tape.scale(diff, 1.0 / approx.net.y_std.max(1e-12) as f32);
        let sq = tape.square(diff);
        let loss = tape.mean(sq);
        let grads = tape.backward(loss, approx.store.len())?;
        adam_step(&mut approx.store, &grads, &adam)?;
        approx.steps_trained = step;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let e = validate(&approx);
            log::debug!("approximator {} step {step}: val error {e:.4}", p.id);
            if e < best {
                best = e;
                best_store = approx.store.clone();
            }
            if best <= cfg.target_error {
                break;
            }
        }
    }
    approx.store = best_store;
    approx.val_error = best;
    if best <= cfg.target_error {
        Ok(approx)
    } else {
        Err(TaskError::ApproximatorFailed {
            id: p.id.clone(),
            best,
            target: cfg.target_error,
        })
    }
}
