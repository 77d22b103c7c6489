//! Trajectory variational autoencoder: bidirectional GRU encoder, Gaussian
//! latent, and a GRU decoder that predicts the change from the current state.

use ndarray::{concatenate, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{AffineParams, DiffError, GruParams, NodeId, ParameterStore, Tape};
use crate::scalar::Scalar;
use crate::trajectory::{FrameState, Layout, Window};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Debug, Error)]
pub enum TvaeError {
    #[error("window of length {found} does not match the configured length {expected}")]
    WindowLength { expected: usize, found: usize },
    #[error("state dimension {found} does not match the configured {expected}")]
    StateDim { expected: usize, found: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TvaeConfig {
    pub state_dim: usize,
    pub window_len: usize,
    pub latent_dim: usize,
    pub hidden: usize,
}

impl TvaeConfig {
    pub fn new(layout: Layout) -> Self {
        Self {
            state_dim: layout.state_dim(),
            window_len: crate::trajectory::DEFAULT_WINDOW,
            latent_dim: 32,
            hidden: 256,
        }
    }
}

/// Mean and log-variance of the approximate posterior for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub z_mu: Vec<f64>,
    pub z_logvar: Vec<f64>,
}

/// Windows stacked per time step: `frames[t]` is `B x state_dim`.
#[derive(Debug, Clone)]
pub struct WindowBatch<S> {
    pub frames: Vec<Array2<S>>,
}

impl<S: Scalar> WindowBatch<S> {
    pub fn from_windows(windows: &[&Window]) -> Result<Self, TvaeError> {
        let first = windows.first().ok_or(TvaeError::EmptyBatch)?;
        let t_len = first.len();
        let d = first.layout().state_dim();
        let mut frames = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let mut a = Array2::<S>::zeros((windows.len(), d));
            for (b, w) in windows.iter().enumerate() {
                if w.len() != t_len {
                    return Err(TvaeError::WindowLength {
                        expected: t_len,
                        found: w.len(),
                    });
                }
                let s = w.frames[t].stacked();
                if s.len() != d {
                    return Err(TvaeError::StateDim {
                        expected: d,
                        found: s.len(),
                    });
                }
                for (dst, &v) in a.row_mut(b).iter_mut().zip(s) {
                    *dst = S::lit(v);
                }
            }
            frames.push(a);
        }
        Ok(Self { frames })
    }

    pub fn batch_size(&self) -> usize {
        self.frames[0].nrows()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Stack two batches of equal length along the batch axis.
    pub fn stack(&self, other: &Self) -> Self {
        let frames = self
            .frames
            .iter()
            .zip(&other.frames)
            .map(|(a, b)| concatenate(Axis(0), &[a.view(), b.view()]).expect("equal widths"))
            .collect();
        Self { frames }
    }

    pub fn input_nodes(&self, tape: &mut Tape<S>) -> Vec<NodeId> {
        self.frames.iter().map(|f| tape.input(f.clone())).collect()
    }
}

/// Nodes produced by one ELBO evaluation. `nll`, `kl` and `total` are batch
/// means (`1 x 1`); the rest are per-row.
#[derive(Debug, Clone, Copy)]
pub struct TvaeTerms {
    pub mu: NodeId,
    pub logvar: NodeId,
    pub z: NodeId,
    pub nll: NodeId,
    pub kl: NodeId,
    pub total: NodeId,
}

/// Parameter handles of the encoder and decoder; values live in a
/// [`ParameterStore`] shared with any task heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvaeModel {
    pub cfg: TvaeConfig,
    enc_fwd: GruParams,
    enc_bwd: GruParams,
    mu_head: AffineParams,
    logvar_head: AffineParams,
    dec: GruParams,
    dec_out: AffineParams,
}

impl TvaeModel {
    pub fn register<S: Scalar>(
        store: &mut ParameterStore<S>,
        cfg: TvaeConfig,
    ) -> Result<Self, DiffError> {
        let (d, h, z) = (cfg.state_dim, cfg.hidden, cfg.latent_dim);
        Ok(Self {
            cfg,
            enc_fwd: GruParams::register(store, "tvae.enc_fwd", d, h)?,
            enc_bwd: GruParams::register(store, "tvae.enc_bwd", d, h)?,
            mu_head: AffineParams::register(store, "tvae.mu", 2 * h, z)?,
            logvar_head: AffineParams::register(store, "tvae.logvar", 2 * h, z)?,
            dec: GruParams::register(store, "tvae.dec", d + z, h)?,
            dec_out: AffineParams::register(store, "tvae.dec_out", h, d)?,
        })
    }

    /// Parameter handles of the decoder output layer.
    pub fn decoder_output(&self) -> AffineParams {
        self.dec_out
    }

    fn check_frames<S: Scalar>(&self, tape: &Tape<S>, frames: &[NodeId]) -> Result<(), TvaeError> {
        if frames.len() != self.cfg.window_len {
            return Err(TvaeError::WindowLength {
                expected: self.cfg.window_len,
                found: frames.len(),
            });
        }
        let d = tape.value(frames[0]).ncols();
        if d != self.cfg.state_dim {
            return Err(TvaeError::StateDim {
                expected: self.cfg.state_dim,
                found: d,
            });
        }
        Ok(())
    }

    /// Posterior mean and clamped log-variance, each `B x latent`.
    pub fn encode_nodes<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        frames: &[NodeId],
    ) -> Result<(NodeId, NodeId), TvaeError> {
        self.check_frames(tape, frames)?;
        let b = tape.value(frames[0]).nrows();
        let mut hf = tape.constant(b, self.cfg.hidden, S::zero());
        for &x in frames {
            hf = tape.gru_step(store, self.enc_fwd, x, hf);
        }
        let mut hb = tape.constant(b, self.cfg.hidden, S::zero());
        for &x in frames.iter().rev() {
            hb = tape.gru_step(store, self.enc_bwd, x, hb);
        }
        let h = tape.concat_cols(&[hf, hb]);
        let mu = tape.affine(store, self.mu_head, h);
        let lv = tape.affine(store, self.logvar_head, h);
        let lv = tape.clamp(lv, S::lit(LOGVAR_MIN), S::lit(LOGVAR_MAX));
        Ok((mu, lv))
    }

    /// `z = mu + exp(logvar / 2) * eps`.
    pub fn reparameterize<S: Scalar>(
        tape: &mut Tape<S>,
        mu: NodeId,
        logvar: NodeId,
        eps: Array2<S>,
    ) -> NodeId {
        let half = tape.scale(logvar, S::lit(0.5));
        let std = tape.exp(half);
        let e = tape.input(eps);
        let noise = tape.mul(std, e);
        tape.add(mu, noise)
    }

    /// Predicted deltas for `t = 0..T-1`, conditioning on the true states.
    pub fn teacher_forced_deltas<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        frames: &[NodeId],
        z: NodeId,
    ) -> Vec<NodeId> {
        let b = tape.value(z).nrows();
        let mut h = tape.constant(b, self.cfg.hidden, S::zero());
        let mut out = Vec::with_capacity(frames.len().saturating_sub(1));
        for &s in &frames[..frames.len().saturating_sub(1)] {
            let x = tape.concat_cols(&[s, z]);
            h = tape.gru_step(store, self.dec, x, h);
            out.push(tape.affine(store, self.dec_out, h));
        }
        out
    }

    /// Free-running generation `s_{t+1} = s_t + delta(s_t, z)`; the returned
    /// states start with `s0` and hold `steps + 1` entries.
    pub fn rollout_nodes<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        s0: NodeId,
        z: NodeId,
        steps: usize,
    ) -> Vec<NodeId> {
        let b = tape.value(z).nrows();
        let mut h = tape.constant(b, self.cfg.hidden, S::zero());
        let mut states = vec![s0];
        let mut s = s0;
        for _ in 0..steps {
            let x = tape.concat_cols(&[s, z]);
            h = tape.gru_step(store, self.dec, x, h);
            let delta = tape.affine(store, self.dec_out, h);
            s = tape.add(s, delta);
            states.push(s);
        }
        states
    }

    /// Negative ELBO with unit-variance Gaussian deltas under teacher forcing
    /// plus the closed-form KL, averaged over the batch.
    pub fn elbo_nodes<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        frames: &[NodeId],
        eps: Array2<S>,
    ) -> Result<TvaeTerms, TvaeError> {
        let (mu, logvar) = self.encode_nodes(tape, store, frames)?;
        let z = Self::reparameterize(tape, mu, logvar, eps);
        let deltas = self.teacher_forced_deltas(tape, store, frames, z);
        let mut nll_rows: Option<NodeId> = None;
        for (t, &pred) in deltas.iter().enumerate() {
            let target = tape.value(frames[t + 1]) - tape.value(frames[t]);
            let target = tape.input(target);
            let r = tape.gaussian_nll_rows(pred, target);
            nll_rows = Some(match nll_rows {
                Some(acc) => tape.add(acc, r),
                None => r,
            });
        }
        let b = tape.value(mu).nrows();
        let nll_rows = nll_rows.unwrap_or_else(|| tape.constant(b, 1, S::zero()));
        let kl_rows = tape.kl_unit_gaussian_rows(mu, logvar);
        let nll = tape.mean(nll_rows);
        let kl = tape.mean(kl_rows);
        let total = tape.add(nll, kl);
        Ok(TvaeTerms {
            mu,
            logvar,
            z,
            nll,
            kl,
            total,
        })
    }

    /// Posterior means for many windows, `N x latent`, in chunks of `chunk`.
    pub fn encode_windows<S: Scalar>(
        &self,
        store: &ParameterStore<S>,
        windows: &[Window],
        chunk: usize,
    ) -> Result<Array2<f64>, TvaeError> {
        let mut out = Array2::<f64>::zeros((windows.len(), self.cfg.latent_dim));
        for (ci, part) in windows.chunks(chunk.max(1)).enumerate() {
            let refs: Vec<&Window> = part.iter().collect();
            let batch = WindowBatch::<S>::from_windows(&refs)?;
            let mut tape = Tape::frozen();
            let frames = batch.input_nodes(&mut tape);
            let (mu, _) = self.encode_nodes(&mut tape, store, &frames)?;
            tape.check_finite()?;
            let start = ci * chunk.max(1);
            for (r, row) in tape.value(mu).outer_iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    out[[start + r, c]] = v.to_f64_lossy();
                }
            }
        }
        Ok(out)
    }

    pub fn encode<S: Scalar>(
        &self,
        store: &ParameterStore<S>,
        w: &Window,
    ) -> Result<Embedding, TvaeError> {
        let batch = WindowBatch::<S>::from_windows(&[w])?;
        let mut tape = Tape::frozen();
        let frames = batch.input_nodes(&mut tape);
        let (mu, lv) = self.encode_nodes(&mut tape, store, &frames)?;
        tape.check_finite()?;
        let row = |n: NodeId| tape.value(n).iter().map(|v| v.to_f64_lossy()).collect();
        Ok(Embedding {
            z_mu: row(mu),
            z_logvar: row(lv),
        })
    }

    /// Generate `steps` frames after `s0` from latent `z`.
    pub fn decode_rollout<S: Scalar>(
        &self,
        store: &ParameterStore<S>,
        z: &[f64],
        s0: &FrameState,
        steps: usize,
    ) -> Result<Vec<FrameState>, TvaeError> {
        let mut tape = Tape::frozen();
        let s = tape.input(row_of(s0.stacked()));
        let zn = tape.input(row_of(z));
        let states = self.rollout_nodes(&mut tape, store, s, zn, steps);
        tape.check_finite()?;
        states
            .into_iter()
            .map(|n| {
                let v = tape.value(n).iter().map(|x| x.to_f64_lossy()).collect();
                Ok(FrameState::from_stacked(s0.layout(), v).expect("layout preserved"))
            })
            .collect()
    }

    /// Single-window negative ELBO as `(nll, kl, total)`.
    pub fn tvae_loss<S: Scalar, R: Rng + ?Sized>(
        &self,
        store: &ParameterStore<S>,
        w: &Window,
        rng: &mut R,
    ) -> Result<(f64, f64, f64), TvaeError> {
        let batch = WindowBatch::<S>::from_windows(&[w])?;
        let mut tape = Tape::frozen();
        let frames = batch.input_nodes(&mut tape);
        let eps = standard_normal(rng, 1, self.cfg.latent_dim);
        let t = self.elbo_nodes(&mut tape, store, &frames, eps)?;
        tape.check_finite()?;
        let f = |n| tape.scalar(n).to_f64_lossy();
        Ok((f(t.nll), f(t.kl), f(t.total)))
    }
}

fn row_of<S: Scalar>(v: &[f64]) -> Array2<S> {
    Array2::from_shape_fn((1, v.len()), |(_, j)| S::lit(v[j]))
}

/// `rows x cols` draws from N(0, 1).
pub fn standard_normal<S: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
) -> Array2<S> {
    Array2::from_shape_simple_fn((rows, cols), || {
        S::lit(rng.sample::<f64, _>(StandardNormal))
    })
}

/// `z = z_mu + exp(z_logvar / 2) * eps` with fresh noise.
pub fn sample_latent<R: Rng + ?Sized>(e: &Embedding, rng: &mut R) -> Vec<f64> {
    e.z_mu
        .iter()
        .zip(&e.z_logvar)
        .map(|(&m, &lv)| m + (0.5 * lv).exp() * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diff::gradient_check;
    use crate::trajectory::Keypoint;

    fn toy_cfg() -> TvaeConfig {
        TvaeConfig {
            state_dim: 4,
            window_len: 5,
            latent_dim: 3,
            hidden: 6,
        }
    }

    fn toy_window(seed: u64, len: usize) -> Window {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..len)
            .map(|_| {
                let a: Vec<Vec<Keypoint>> = (0..2)
                    .map(|_| {
                        vec![Keypoint::new(
                            rng.random_range(0.0..1.0),
                            rng.random_range(0.0..1.0),
                        )]
                    })
                    .collect();
                FrameState::from_agents(&a).unwrap()
            })
            .collect();
        Window::new(frames).unwrap()
    }

    #[test]
    fn encode_shape_and_determinism() {
        let mut store = ParameterStore::<f64>::new(1);
        let cfg = TvaeConfig {
            latent_dim: 32,
            ..toy_cfg()
        };
        let m = TvaeModel::register(&mut store, cfg).unwrap();
        let w = toy_window(2, 5);
        let e1 = m.encode(&store, &w).unwrap();
        let e2 = m.encode(&store, &w).unwrap();
        assert_eq!(e1.z_mu.len(), 32);
        assert_eq!(e1, e2);
        let e3 = m.encode(&store, &toy_window(3, 5)).unwrap();
        let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        assert_ne!(n(&e1.z_mu), n(&e3.z_mu));
    }

    #[test]
    fn wrong_window_length_is_rejected() {
        let mut store = ParameterStore::<f64>::new(1);
        let m = TvaeModel::register(&mut store, toy_cfg()).unwrap();
        assert!(matches!(
            m.encode(&store, &toy_window(1, 7)),
            Err(TvaeError::WindowLength {
                expected: 5,
                found: 7
            })
        ));
    }

    #[test]
    fn encoder_ignores_decoder_weights() {
        let mut store = ParameterStore::<f64>::new(4);
        let m = TvaeModel::register(&mut store, toy_cfg()).unwrap();
        let w = toy_window(5, 5);
        let before = m.encode(&store, &w).unwrap();
        let id = m.decoder_output().weight;
        store.get_mut(id).fill(3.0);
        assert_eq!(before, m.encode(&store, &w).unwrap());
    }

    #[test]
    fn small_variance_latent_sits_at_mean() {
        let e = Embedding {
            z_mu: vec![0.3, -1.0],
            z_logvar: vec![-10.0, -10.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = sample_latent(&e, &mut rng);
        assert!(z.iter().zip(&e.z_mu).all(|(a, b)| (a - b).abs() < 0.01));
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(sample_latent(&e, &mut r1), sample_latent(&e, &mut r2));
    }

    #[test]
    fn latent_sample_mean_matches_mu() {
        let e = Embedding {
            z_mu: vec![0.5, -2.0, 0.0],
            z_logvar: vec![0.0, 1.0, -1.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut sum = [0.0; 3];
        for _ in 0..n {
            for (s, v) in sum.iter_mut().zip(sample_latent(&e, &mut rng)) {
                *s += v;
            }
        }
        for (j, s) in sum.iter().enumerate() {
            let sd = (0.5 * e.z_logvar[j]).exp();
            assert!((s / n as f64 - e.z_mu[j]).abs() <= 3.0 * sd / (n as f64).sqrt());
        }
    }

    #[test]
    fn zero_decoder_repeats_initial_state() {
        let mut store = ParameterStore::<f64>::new(2);
        let m = TvaeModel::register(&mut store, toy_cfg()).unwrap();
        let out = m.decoder_output();
        store.get_mut(out.weight).fill(0.0);
        let w = toy_window(7, 5);
        let s0 = &w.frames[0];
        let states = m.decode_rollout(&store, &[0.1, 0.2, 0.3], s0, 4).unwrap();
        assert_eq!(states.len(), 5);
        assert!(states.iter().all(|s| s == s0));
        assert_eq!(
            m.decode_rollout(&store, &[0.0; 3], s0, 0).unwrap(),
            vec![s0.clone()]
        );
    }

    #[test]
    fn constant_window_zero_decoder_gives_normalizer_only() {
        let mut store = ParameterStore::<f64>::new(3);
        let m = TvaeModel::register(&mut store, toy_cfg()).unwrap();
        let out = m.decoder_output();
        store.get_mut(out.weight).fill(0.0);
        let frame = toy_window(1, 1).frames[0].clone();
        let w = Window::new(vec![frame; 5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (nll, kl, total) = m.tvae_loss(&store, &w, &mut rng).unwrap();
        let per_step = 0.5 * 4.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((nll - 4.0 * per_step).abs() < 1e-12);
        assert!(kl >= 0.0);
        assert!((total - nll - kl).abs() < 1e-12);
    }

    #[test]
    fn elbo_gradient_check() {
        let mut store = ParameterStore::<f64>::new(5);
        let cfg = TvaeConfig {
            window_len: 4,
            ..toy_cfg()
        };
        let m = TvaeModel::register(&mut store, cfg).unwrap();
        let ws: Vec<Window> = (0..3).map(|i| toy_window(20 + i, 5)).collect();
        let ws: Vec<Window> = ws
            .into_iter()
            .map(|w| Window {
                frames: w.frames[..4].to_vec(),
                center_index: 2,
            })
            .collect();
        let refs: Vec<&Window> = ws.iter().collect();
        let batch = WindowBatch::<f64>::from_windows(&refs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = standard_normal::<f64, _>(&mut rng, 3, 3);
        let report = gradient_check(&store, 1e-4, |tape, st| {
            let frames = batch.input_nodes(tape);
            m.elbo_nodes(tape, st, &frames, eps.clone()).unwrap().total
        });
        assert!(report.passed(), "{:?}", report.worst());
    }
}
