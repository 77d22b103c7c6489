//! Programmed decoder tasks on top of the TVAE: attribute consistency,
//! attribute decoding and program-supervised contrastive losses, plus the
//! weighted training objective.

mod approx;
mod contrastive;
mod train;

pub use approx::{
    train_program_approximator, ApproxConfig, ApproxNet, ProgramApproximator, MIN_APPROX_WINDOWS,
};
pub use contrastive::{contrastive_loss, twin_labels};
pub use train::{train_embedding, StepRecord, TrainConfig, TrainingData};

use std::collections::BTreeSet;
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{AugmentError, AugmentPolicy};
use crate::diff::{AffineParams, DiffError, NodeId, ParamId, ParameterStore, Tape};
use crate::programs::algebra::TapeAlgebra;
use crate::programs::{ProgramError, ProgramSet};
use crate::scalar::Scalar;
use crate::trajectory::{Layout, Window};
use crate::tvae::{TvaeConfig, TvaeError, TvaeModel, WindowBatch};

pub const HEAD_UNITS: usize = 32;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("contrastive loss needs at least 2 batch elements, got {0}")]
    BatchTooSmall(usize),
    #[error("expected {expected} label rows, got {found}")]
    LabelCount { expected: usize, found: usize },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("configuration: {0}")]
    Config(String),
    #[error("approximator needs at least {needed} windows, got {got}")]
    TooFewWindows { needed: usize, got: usize },
    #[error("approximator for `{id}` reached validation error {best:.4}, target {target}")]
    ApproximatorFailed { id: String, best: f64, target: f64 },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Tvae(#[from] TvaeError),
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTerm {
    Tvae,
    Consistency,
    Decoding,
    Contrastive,
}

impl LossTerm {
    pub fn name(self) -> &'static str {
        match self {
            Self::Tvae => "tvae",
            Self::Consistency => "consistency",
            Self::Decoding => "decoding",
            Self::Contrastive => "contrastive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastiveMode {
    /// Positives share a discretized program class.
    Programs,
    /// The augmented twin is the only positive.
    Unsupervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsistencyMode {
    /// Differentiate through the programs themselves.
    Direct,
    /// Differentiate through trained approximators.
    Approximator,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub tvae: f64,
    pub consistency: f64,
    pub contrastive: f64,
    pub decoding: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            tvae: 1.0,
            consistency: 1.0,
            contrastive: 10.0,
            decoding: 1.0,
        }
    }
}

impl LossWeights {
    pub fn get(&self, t: LossTerm) -> f64 {
        match t {
            LossTerm::Tvae => self.tvae,
            LossTerm::Consistency => self.consistency,
            LossTerm::Decoding => self.decoding,
            LossTerm::Contrastive => self.contrastive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub enabled: BTreeSet<LossTerm>,
    pub weights: LossWeights,
    pub temperature: f64,
    pub contrastive_mode: ContrastiveMode,
    pub consistency_mode: ConsistencyMode,
    pub augmentation: bool,
    pub augment_policy: AugmentPolicy,
    /// Divide attribute errors by the per-program scales of the program set.
    pub scale_attributes: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            enabled: [LossTerm::Tvae, LossTerm::Contrastive, LossTerm::Consistency].into(),
            weights: LossWeights::default(),
            temperature: 0.07,
            contrastive_mode: ContrastiveMode::Programs,
            consistency_mode: ConsistencyMode::Direct,
            augmentation: true,
            augment_policy: AugmentPolicy::default(),
            scale_attributes: false,
        }
    }
}

impl LossConfig {
    /// `tvae,contrastive,consistency,decoding`; `unsup_contrastive` selects
    /// the contrastive term in unsupervised mode.
    pub fn with_terms(spec: &str) -> Result<Self, TaskError> {
        let mut cfg = Self {
            enabled: BTreeSet::new(),
            ..Self::default()
        };
        for t in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let term = match t {
                "tvae" => LossTerm::Tvae,
                "consistency" | "consist" => LossTerm::Consistency,
                "decoding" | "decode" => LossTerm::Decoding,
                "contrastive" | "contrast" => LossTerm::Contrastive,
                "unsup_contrastive" | "unsup_contrast" => {
                    cfg.contrastive_mode = ContrastiveMode::Unsupervised;
                    LossTerm::Contrastive
                }
                other => return Err(TaskError::Config(format!("unknown loss `{other}`"))),
            };
            cfg.enabled.insert(term);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn has(&self, t: LossTerm) -> bool {
        self.enabled.contains(&t)
    }

    pub fn uses_programs(&self) -> bool {
        self.has(LossTerm::Consistency)
            || self.has(LossTerm::Decoding)
            || (self.has(LossTerm::Contrastive)
                && self.contrastive_mode == ContrastiveMode::Programs)
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.enabled.is_empty() {
            return Err(TaskError::Config("no loss terms enabled".into()));
        }
        if self.temperature <= 0.0 {
            return Err(TaskError::Temperature(self.temperature));
        }
        let w = self.weights;
        if [w.tvae, w.consistency, w.contrastive, w.decoding]
            .iter()
            .any(|v| *v < 0.0 || !v.is_finite())
        {
            return Err(TaskError::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if self.has(LossTerm::Contrastive)
            && self.contrastive_mode == ContrastiveMode::Unsupervised
            && !self.augmentation
        {
            return Err(TaskError::Config(
                "unsupervised contrastive loss needs augmentation".into(),
            ));
        }
        Ok(())
    }

    /// Row label in the style of the ablation table, e.g. `TVAE+Contrast+Consist`.
    pub fn label(&self) -> String {
        let unsup = self.contrastive_mode == ContrastiveMode::Unsupervised;
        let mut parts = Vec::new();
        if self.has(LossTerm::Tvae) {
            parts.push("TVAE");
        }
        if self.has(LossTerm::Contrastive) {
            parts.push(if unsup { "Unsup. Contrast" } else { "Contrast" });
        }
        if self.has(LossTerm::Decoding) {
            parts.push("Decode");
        }
        if self.has(LossTerm::Consistency) {
            parts.push("Consist");
        }
        let s = parts.join("+");
        if !self.has(LossTerm::Tvae) {
            format!("{s} alone")
        } else {
            s
        }
    }
}

impl fmt::Display for LossConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Shallow heads on `z_mu`: affine, relu (32 units), affine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpHead {
    pub hidden: AffineParams,
    pub out: AffineParams,
}

impl MlpHead {
    pub fn register<S: Scalar>(
        store: &mut ParameterStore<S>,
        prefix: &str,
        input: usize,
        output: usize,
    ) -> Result<Self, DiffError> {
        Ok(Self {
            hidden: AffineParams::register(store, &format!("{prefix}.hidden"), input, HEAD_UNITS)?,
            out: AffineParams::register(store, &format!("{prefix}.out"), HEAD_UNITS, output)?,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        x: NodeId,
    ) -> NodeId {
        let h = tape.affine(store, self.hidden, x);
        let h = tape.relu(h);
        tape.affine(store, self.out, h)
    }
}

/// Decoding head `f` (one output per program) and contrastive head `g`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TaskHeads {
    pub decode: Option<MlpHead>,
    pub contrast: Option<MlpHead>,
}

/// Embedding network plus task heads, sharing one parameter store.
#[derive(Debug, Clone)]
pub struct EmbeddingModel<S> {
    pub layout: Layout,
    pub store: ParameterStore<S>,
    pub tvae: TvaeModel,
    pub heads: TaskHeads,
    pub programs: Option<ProgramSet>,
    pub loss: LossConfig,
    approximators: Vec<ApproxNet>,
    frozen: Vec<ParamId>,
}

/// One training batch: stacked windows (originals, then augmented copies
/// when `halves == 2`) with their attribute values and classes.
#[derive(Debug, Clone)]
pub struct LossBatch<S> {
    pub frames: WindowBatch<S>,
    pub halves: usize,
    /// `N x M` continuous attributes (empty when no programs are used).
    pub attrs: Array2<f64>,
    /// `N` rows of `M` classes (empty when not needed).
    pub classes: Vec<Vec<usize>>,
}

impl<S: Scalar> LossBatch<S> {
    /// Build from originals and optional augmented copies of the same length.
    pub fn new(
        originals: &[&Window],
        augmented: Option<&[&Window]>,
        programs: Option<&ProgramSet>,
        need_classes: bool,
    ) -> Result<Self, TaskError> {
        let mut all: Vec<&Window> = originals.to_vec();
        if let Some(a) = augmented {
            if a.len() != originals.len() {
                return Err(TaskError::Config("augmented batch size differs".into()));
            }
            all.extend_from_slice(a);
        }
        let frames = WindowBatch::from_windows(&all)?;
        let (attrs, classes) = match programs {
            Some(ps) => {
                let mut attrs = Array2::zeros((all.len(), ps.len()));
                let mut classes = Vec::new();
                for (i, w) in all.iter().enumerate() {
                    let v = ps.evaluate_values(w)?;
                    if need_classes {
                        classes.push(ps.classify(&v)?);
                    }
                    for (j, x) in v.into_iter().enumerate() {
                        attrs[[i, j]] = x;
                    }
                }
                (attrs, classes)
            }
            None => (Array2::zeros((all.len(), 0)), Vec::new()),
        };
        Ok(Self {
            frames,
            halves: if augmented.is_some() { 2 } else { 1 },
            attrs,
            classes,
        })
    }

    pub fn rows(&self) -> usize {
        self.frames.batch_size()
    }
}

/// Named loss nodes from one forward pass; `total` is the weighted sum.
#[derive(Debug, Clone)]
pub struct LossNodes {
    pub total: NodeId,
    pub terms: Vec<(String, NodeId)>,
}

impl<S: Scalar> EmbeddingModel<S> {
    pub fn new(
        layout: Layout,
        tvae_cfg: TvaeConfig,
        loss: LossConfig,
        programs: Option<ProgramSet>,
        seed: u64,
    ) -> Result<Self, TaskError> {
        loss.validate()?;
        if layout.state_dim() != tvae_cfg.state_dim {
            return Err(TaskError::Config(format!(
                "layout state dimension {} differs from the model's {}",
                layout.state_dim(),
                tvae_cfg.state_dim
            )));
        }
        if let Some(ps) = &programs {
            ps.check_layout(layout)?;
        }
        if loss.uses_programs() && programs.is_none() {
            return Err(TaskError::Config(
                "enabled losses need a program set".into(),
            ));
        }
        let mut store = ParameterStore::new(seed);
        let tvae = TvaeModel::register(&mut store, tvae_cfg)?;
        let m = programs.as_ref().map_or(0, ProgramSet::len);
        let heads = TaskHeads {
            decode: if loss.has(LossTerm::Decoding) {
                Some(MlpHead::register(
                    &mut store,
                    "head.decode",
                    tvae_cfg.latent_dim,
                    m,
                )?)
            } else {
                None
            },
            contrast: if loss.has(LossTerm::Contrastive) {
                Some(MlpHead::register(
                    &mut store,
                    "head.contrast",
                    tvae_cfg.latent_dim,
                    HEAD_UNITS,
                )?)
            } else {
                None
            },
        };
        Ok(Self {
            layout,
            store,
            tvae,
            heads,
            programs,
            loss,
            approximators: Vec::new(),
            frozen: Vec::new(),
        })
    }

    /// Install one trained approximator per program, in program order. Their
    /// parameters are frozen during training.
    pub fn attach_approximators(
        &mut self,
        approx: &[ProgramApproximator],
    ) -> Result<(), TaskError> {
        let ps = self
            .programs
            .as_ref()
            .ok_or_else(|| TaskError::Config("no program set".into()))?;
        if approx.len() != ps.len()
            || approx
                .iter()
                .zip(&ps.programs)
                .any(|(a, p)| a.program.id != p.id)
        {
            return Err(TaskError::Config(
                "approximators must match the program set order".into(),
            ));
        }
        let before = self.store.len();
        let mut nets = Vec::new();
        for a in approx {
            nets.push(a.install(&mut self.store, &format!("frozen.{}", a.program.id))?);
        }
        self.frozen = self.store.ids().skip(before).collect();
        self.approximators = nets;
        Ok(())
    }

    pub fn frozen_params(&self) -> &[ParamId] {
        &self.frozen
    }

    fn attr_scales(&self) -> Vec<f64> {
        match &self.programs {
            Some(ps) if self.loss.scale_attributes => ps.scales.clone(),
            Some(ps) => vec![1.0; ps.len()],
            None => Vec::new(),
        }
    }

    /// Squared errors between program outputs on generated states and
    /// `targets`, `N x M`.
    pub fn consistency_errors(
        &self,
        tape: &mut Tape<S>,
        states: &[NodeId],
        center_index: usize,
        targets: &Array2<f64>,
    ) -> Result<NodeId, TaskError> {
        let ps = self
            .programs
            .as_ref()
            .ok_or_else(|| TaskError::Config("consistency loss needs programs".into()))?;
        let layout = self.layout;
        ps.check_layout(layout)?;
        let scales = self.attr_scales();
        let mut cols = Vec::with_capacity(ps.len());
        for (j, p) in ps.programs.iter().enumerate() {
            let pred = match self.loss.consistency_mode {
                ConsistencyMode::Direct => {
                    let mut alg = TapeAlgebra::new(tape, layout, states, center_index);
                    p.record(&mut alg)
                }
                ConsistencyMode::Approximator => {
                    let net = self.approximators.get(j).ok_or_else(|| {
                        TaskError::Config("approximator mode without trained approximators".into())
                    })?;
                    let prev = states[center_index.saturating_sub(1)];
                    net.forward(tape, &self.store, prev, states[center_index])
                }
            };
            let target = tape.input(
                targets
                    .column(j)
                    .to_owned()
                    .insert_axis(ndarray::Axis(1))
                    .mapv(S::lit),
            );
            let d = tape.sub(pred, target);
            let d = tape.scale(d, S::lit(1.0 / scales[j]));
            cols.push(tape.square(d));
        }
        Ok(tape.concat_cols(&cols))
    }

    /// Squared errors between `f(z_mu)` and `targets`, `N x M`.
    pub fn decoding_errors(
        &self,
        tape: &mut Tape<S>,
        mu: NodeId,
        targets: &Array2<f64>,
    ) -> Result<NodeId, TaskError> {
        let head = self
            .heads
            .decode
            .ok_or_else(|| TaskError::Config("decoding head not registered".into()))?;
        let pred = head.forward(tape, &self.store, mu);
        if tape.value(pred).ncols() != targets.ncols() {
            return Err(TaskError::Config(format!(
                "decoding head has {} outputs for {} programs",
                tape.value(pred).ncols(),
                targets.ncols()
            )));
        }
        let scales = self.attr_scales();
        let t = tape.input(targets.mapv(S::lit));
        let d = tape.sub(pred, t);
        let inv = Array2::from_shape_fn(targets.dim(), |(_, j)| S::lit(1.0 / scales[j]));
        let inv = tape.input(inv);
        let d = tape.mul(d, inv);
        Ok(tape.square(d))
    }

    /// Weighted objective. Every term except the contrastive one is averaged
    /// separately over the original and augmented halves and the halves are
    /// added; the contrastive term runs once over the whole batch and is
    /// divided by its row count.
    pub fn loss_nodes(
        &self,
        tape: &mut Tape<S>,
        batch: &LossBatch<S>,
        eps: Array2<S>,
    ) -> Result<LossNodes, TaskError> {
        let cfg = &self.loss;
        let n = batch.rows();
        let half = n / batch.halves;
        let frames = batch.frames.input_nodes(tape);
        let (mu, logvar) = self.tvae.encode_nodes(tape, &self.store, &frames)?;
        let needs_z = cfg.has(LossTerm::Tvae) || cfg.has(LossTerm::Consistency);
        let z = if needs_z {
            Some(TvaeModel::reparameterize(tape, mu, logvar, eps))
        } else {
            None
        };
        let mut terms: Vec<(String, NodeId, f64)> = Vec::new();
        let per_half = |tape: &mut Tape<S>,
                        term: LossTerm,
                        rows: NodeId,
                        terms: &mut Vec<(String, NodeId, f64)>| {
            for h in 0..batch.halves {
                let part = if batch.halves == 1 {
                    rows
                } else {
                    tape.slice_rows(rows, h * half, half)
                };
                let v = tape.mean(part);
                let name = if h == 0 {
                    term.name().to_string()
                } else {
                    format!("{}_aug", term.name())
                };
                terms.push((name, v, cfg.weights.get(term)));
            }
        };
        if cfg.has(LossTerm::Tvae) {
            let z = z.expect("z drawn");
            let deltas = self
                .tvae
                .teacher_forced_deltas(tape, &self.store, &frames, z);
            let mut rows: Option<NodeId> = None;
            for (t, &pred) in deltas.iter().enumerate() {
                let target = tape.value(frames[t + 1]) - tape.value(frames[t]);
                let target = tape.input(target);
                let r = tape.gaussian_nll_rows(pred, target);
                rows = Some(match rows {
                    Some(acc) => tape.add(acc, r),
                    None => r,
                });
            }
            let kl = tape.kl_unit_gaussian_rows(mu, logvar);
            let rows = match rows {
                Some(r) => tape.add(r, kl),
                None => kl,
            };
            per_half(tape, LossTerm::Tvae, rows, &mut terms);
        }
        if cfg.has(LossTerm::Consistency) {
            let z = z.expect("z drawn");
            let states = self
                .tvae
                .rollout_nodes(tape, &self.store, frames[0], z, frames.len() - 1);
            let center = frames.len() / 2;
            let err = self.consistency_errors(tape, &states, center, &batch.attrs)?;
            per_half(tape, LossTerm::Consistency, err, &mut terms);
        }
        if cfg.has(LossTerm::Decoding) {
            let err = self.decoding_errors(tape, mu, &batch.attrs)?;
            per_half(tape, LossTerm::Decoding, err, &mut terms);
        }
        if cfg.has(LossTerm::Contrastive) {
            let head = self
                .heads
                .contrast
                .ok_or_else(|| TaskError::Config("contrastive head not registered".into()))?;
            let g = head.forward(tape, &self.store, mu);
            let labels = match cfg.contrastive_mode {
                ContrastiveMode::Programs => batch.classes.clone(),
                ContrastiveMode::Unsupervised => {
                    if batch.halves != 2 {
                        return Err(TaskError::Config(
                            "unsupervised contrastive loss needs augmentation".into(),
                        ));
                    }
                    twin_labels(half)
                }
            };
            let l = contrastive_loss(tape, g, &labels, cfg.temperature)?;
            let l = tape.scale(l, S::lit(1.0 / n as f64));
            terms.push(("contrastive".into(), l, cfg.weights.contrastive));
        }
        let mut total: Option<NodeId> = None;
        for (_, node, w) in &terms {
            let wn = tape.scale(*node, S::lit(*w));
            total = Some(match total {
                Some(t) => tape.add(t, wn),
                None => wn,
            });
        }
        let total = total.ok_or_else(|| TaskError::Config("no loss terms enabled".into()))?;
        Ok(LossNodes {
            total,
            terms: terms.into_iter().map(|(s, n, _)| (s, n)).collect(),
        })
    }

    /// Posterior means for many windows, `N x latent`.
    pub fn encode_windows(&self, windows: &[Window]) -> Result<Array2<f64>, TaskError> {
        Ok(self.tvae.encode_windows(&self.store, windows, 256)?)
    }
}

#[cfg(test)]
mod tests;
