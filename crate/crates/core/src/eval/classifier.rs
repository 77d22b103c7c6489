//! Two-hidden-layer frame classifier trained with softmax cross-entropy.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::map::quiet_map;
use super::EvalError;
use crate::diff::{adam_step, AdamConfig, AffineParams, NodeId, ParameterStore, Tape};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub hidden: [usize; 2],
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: [256, 32],
            lr: 1e-3,
            batch_size: 512,
            max_epochs: 100,
            patience: 10,
            seed: 0,
        }
    }
}

/// Layer widths by training fraction: (256, 32) from one half upward,
/// (128, 16) from one tenth, (64, 16) below.
pub fn hidden_sizes_for_fraction(fraction: f64) -> [usize; 2] {
    if fraction >= 0.5 {
        [256, 32]
    } else if fraction >= 0.1 - 1e-12 {
        [128, 16]
    } else {
        [64, 16]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_map: f64,
}

/// Trained network with the feature standardization it was fitted with.
#[derive(Debug, Clone)]
pub struct Classifier<S> {
    store: ParameterStore<S>,
    layers: [AffineParams; 3],
    mean: Vec<f64>,
    scale: Vec<f64>,
    classes: usize,
}

impl<S: Scalar> Classifier<S> {
    fn new(x: &Array2<f64>, classes: usize, cfg: &ClassifierConfig) -> Result<Self, EvalError> {
        let dim = x.ncols();
        let mut store = ParameterStore::new(cfg.seed);
        let [h1, h2] = cfg.hidden;
        let layers = [
            AffineParams::register(&mut store, "cls.l1", dim, h1)?,
            AffineParams::register(&mut store, "cls.l2", h1, h2)?,
            AffineParams::register(&mut store, "cls.out", h2, classes)?,
        ];
        let n = x.nrows().max(1) as f64;
        let mean: Vec<f64> = x.columns().into_iter().map(|c| c.sum() / n).collect();
        let scale = x
            .columns()
            .into_iter()
            .zip(&mean)
            .map(|(c, m)| {
                let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self {
            store,
            layers,
            mean,
            scale,
            classes,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    fn standardize(&self, x: &Array2<f64>) -> Array2<S> {
        Array2::from_shape_fn(x.dim(), |(i, j)| {
            S::lit((x[[i, j]] - self.mean[j]) * self.scale[j])
        })
    }

    fn logits(&self, tape: &mut Tape<S>, x: NodeId) -> NodeId {
        let h = tape.affine(&self.store, self.layers[0], x);
        let h = tape.relu(h);
        let h = tape.affine(&self.store, self.layers[1], h);
        let h = tape.relu(h);
        tape.affine(&self.store, self.layers[2], h)
    }

    /// Class probabilities, one row per input row.
    pub fn predict_scores(&self, x: &Array2<f64>) -> Result<Array2<f64>, EvalError> {
        if x.ncols() != self.input_dim() {
            return Err(EvalError::Dimension {
                expected: self.input_dim(),
                found: x.ncols(),
            });
        }
        let mut tape = Tape::frozen();
        let input = tape.input(self.standardize(x));
        let logits = self.logits(&mut tape, input);
        let mut p = tape.value(logits).mapv(|v| v.to_f64_lossy());
        for mut row in p.rows_mut() {
            let hi = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - hi).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        Ok(p)
    }
}

/// Fit on `(x, y)` and return the epoch with the best validation MAP.
/// Without a validation set the training MAP is monitored instead.
pub fn train_classifier<S: Scalar>(
    x: &Array2<f64>,
    y: &[usize],
    classes: usize,
    val: Option<(&Array2<f64>, &[usize])>,
    cfg: &ClassifierConfig,
) -> Result<(Classifier<S>, Vec<EpochRecord>), EvalError> {
    if x.nrows() != y.len() {
        return Err(EvalError::Dimension {
            expected: y.len(),
            found: x.nrows(),
        });
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
        return Err(EvalError::Config(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut present = vec![false; classes];
    for &c in y {
        present[c] = true;
    }
    let missing: Vec<usize> = (0..classes).filter(|&c| !present[c]).collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingClasses(missing));
    }
    if cfg.batch_size == 0 {
        return Err(EvalError::Config("batch size must be positive".into()));
    }
    let mut model = Classifier::<S>::new(x, classes, cfg)?;
    let xs = model.standardize(x);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..y.len()).collect();
    let (mut best, mut best_map, mut since) = (model.store.clone(), f64::NEG_INFINITY, 0);
    let mut log = Vec::new();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = xs.select(ndarray::Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let mut tape = Tape::new();
            let input = tape.input(xb);
            let logits = model.logits(&mut tape, input);
            let loss = tape.softmax_cross_entropy(logits, &yb);
            loss_sum += tape.scalar(loss).to_f64_lossy() * chunk.len() as f64;
            let grads = tape.backward(loss, model.store.len())?;
            adam_step(&mut model.store, &grads, &adam)?;
        }
        let (vx, vy) = val.unwrap_or((x, y));
        let val_map = quiet_map(&model.predict_scores(vx)?, vy).unwrap_or(0.0);
        log.push(EpochRecord {
            epoch,
            train_loss: loss_sum / y.len() as f64,
            val_map,
        });
        if val_map > best_map {
            best_map = val_map;
            best = model.store.clone();
            since = 0;
        } else {
            since += 1;
            if since >= cfg.patience {
                break;
            }
        }
    }
    model.store = best;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::eval::mean_average_precision;

    fn blobs(n: usize, seed: u64, shuffle_labels: bool) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let x = Array2::from_shape_fn((n, 4), |(i, j)| {
            let c = y[i] as f64;
            let centre = if j == 0 { 3.0 * c } else { -2.0 * c };
            centre + rng.random_range(-0.5..0.5)
        });
        if shuffle_labels {
            y.shuffle(&mut rng);
        }
        (x, y)
    }

    #[test]
    fn separable_reaches_perfect_map() {
        let (x, y) = blobs(300, 1, false);
        let cfg = ClassifierConfig {
            hidden: [16, 8],
            max_epochs: 50,
            patience: 50,
            batch_size: 64,
            ..ClassifierConfig::default()
        };
        let (m, log) = train_classifier::<f64>(&x, &y, 3, None, &cfg).unwrap();
        assert!(log.len() <= 50);
        let r = mean_average_precision(&m.predict_scores(&x).unwrap(), &y).unwrap();
        assert!((r.mean - 1.0).abs() < 1e-12, "map {}", r.mean);
    }

    #[test]
    fn shuffled_labels_give_prior() {
        let (x, y) = blobs(600, 2, true);
        let (vx, vy) = blobs(600, 3, true);
        let cfg = ClassifierConfig {
            hidden: [16, 8],
            max_epochs: 30,
            batch_size: 64,
            ..ClassifierConfig::default()
        };
        let (m, _) = train_classifier::<f64>(&x, &y, 3, Some((&vx, &vy)), &cfg).unwrap();
        let (tx, ty) = blobs(900, 4, true);
        let r = mean_average_precision(&m.predict_scores(&tx).unwrap(), &ty).unwrap();
        assert!((r.mean - 1.0 / 3.0).abs() < 0.08, "map {}", r.mean);
    }

    #[test]
    fn seeded_runs_match() {
        let (x, y) = blobs(200, 5, false);
        let cfg = ClassifierConfig {
            hidden: [8, 4],
            max_epochs: 5,
            batch_size: 32,
            ..ClassifierConfig::default()
        };
        let (_, a) = train_classifier::<f32>(&x, &y, 3, None, &cfg).unwrap();
        let (_, b) = train_classifier::<f32>(&x, &y, 3, None, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_class_is_reported() {
        let (x, _) = blobs(10, 6, false);
        let y = vec![0; 10];
        match train_classifier::<f64>(&x, &y, 3, None, &ClassifierConfig::default()) {
            Err(EvalError::MissingClasses(c)) => assert_eq!(c, vec![1, 2]),
            other => panic!("unexpected {:?}", other.map(|r| r.1)),
        }
    }

    #[test]
    fn table_sizes() {
        assert_eq!(hidden_sizes_for_fraction(1.0), [256, 32]);
        assert_eq!(hidden_sizes_for_fraction(0.5), [256, 32]);
        assert_eq!(hidden_sizes_for_fraction(0.25), [128, 16]);
        assert_eq!(hidden_sizes_for_fraction(0.1), [128, 16]);
        assert_eq!(hidden_sizes_for_fraction(0.05), [64, 16]);
        assert_eq!(hidden_sizes_for_fraction(0.01), [64, 16]);
    }
}
