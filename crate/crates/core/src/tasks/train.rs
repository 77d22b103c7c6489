//! Minibatch training of the embedding model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ContrastiveMode, EmbeddingModel, LossBatch, LossTerm, TaskError};
use crate::augment::augment_window;
use crate::diff::{adam_step, AdamConfig, Tape};
use crate::programs::{fly, Domain};
use crate::scalar::Scalar;
use crate::trajectory::{window_at, EdgePadding, Trajectory, Window};
use crate::tvae::standard_normal;

/// Every frame of every trajectory, addressable as a window.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub trajectories: Vec<Trajectory>,
    pub window_len: usize,
    index: Vec<(usize, usize)>,
}

impl TrainingData {
    pub fn new(trajectories: Vec<Trajectory>, window_len: usize) -> Self {
        let index = trajectories
            .iter()
            .enumerate()
            .flat_map(|(t, tr)| (0..tr.len()).map(move |f| (t, f)))
            .collect();
        Self {
            trajectories,
            window_len,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn window(&self, i: usize) -> Window {
        let (t, f) = self.index[i];
        window_at(
            &self.trajectories[t],
            f,
            self.window_len,
            EdgePadding::Repeat,
        )
        .expect("odd window length")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 128,
            lr: 2e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub terms: Vec<(String, f64)>,
}

impl StepRecord {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.0 == name).map(|t| t.1)
    }
}

fn domain_of(keypoints: usize) -> Domain {
    if keypoints == fly::FLY_SLOTS {
        Domain::Fly
    } else {
        Domain::Mouse
    }
}

/// Run `cfg.steps` Adam steps on uniformly drawn windows. `on_step` sees
/// every step's losses.
pub fn train_embedding<S: Scalar>(
    model: &mut EmbeddingModel<S>,
    data: &TrainingData,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>, TaskError> {
    if data.is_empty() {
        return Err(TaskError::Config("no training windows".into()));
    }
    if cfg.batch_size == 0 {
        return Err(TaskError::Config("batch size must be positive".into()));
    }
    let loss = model.loss.clone();
    let need_classes =
        loss.has(LossTerm::Contrastive) && loss.contrastive_mode == ContrastiveMode::Programs;
    if need_classes {
        let ps = model
            .programs
            .as_ref()
            .ok_or_else(|| TaskError::Config("no program set".into()))?;
        if ps.discretizers.iter().any(Option::is_none) {
            return Err(TaskError::Config(
                "contrastive loss needs fitted discretizers".into(),
            ));
        }
    }
    let programs = if loss.uses_programs() {
        model.programs.clone()
    } else {
        None
    };
    let domain = domain_of(model.layout.keypoints);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let windows: Vec<Window> = (0..cfg.batch_size)
            .map(|_| data.window(rng.random_range(0..data.len())))
            .collect();
        let augmented: Option<Vec<Window>> = if loss.augmentation {
            Some(
                windows
                    .iter()
                    .map(|w| {
                        augment_window(&mut rng, &loss.augment_policy, domain, w).map(|(_, a)| a)
                    })
                    .collect::<Result<_, _>>()?,
            )
        } else {
            None
        };
        let orig: Vec<&Window> = windows.iter().collect();
        let aug: Option<Vec<&Window>> = augmented.as_ref().map(|a| a.iter().collect());
        let batch = LossBatch::<S>::new(&orig, aug.as_deref(), programs.as_ref(), need_classes)?;
        let eps = standard_normal(&mut rng, batch.rows(), model.tvae.cfg.latent_dim);
        let mut tape = Tape::new();
        let nodes = model.loss_nodes(&mut tape, &batch, eps)?;
        let mut grads = tape.backward(nodes.total, model.store.len())?;
        for &id in model.frozen_params() {
            grads.clear(id);
        }
        adam_step(&mut model.store, &grads, &adam)?;
        let rec = StepRecord {
            step,
            total: tape.scalar(nodes.total).to_f64_lossy(),
            terms: nodes
                .terms
                .iter()
                .map(|(n, id)| (n.clone(), tape.scalar(*id).to_f64_lossy()))
                .collect(),
        };
        on_step(&rec);
        history.push(rec);
    }
    Ok(history)
}
