use ndarray::Zip;
use serde::{Deserialize, Serialize};

use super::{DiffError, Gradients, ParameterStore};
use crate::scalar::Scalar;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Untouched parameters see a zero gradient.
pub fn adam_step<S: Scalar>(
    store: &mut ParameterStore<S>,
    grads: &Gradients<S>,
    cfg: &AdamConfig,
) -> Result<(), DiffError> {
    if grads.len() > store.len() {
        return Err(DiffError::ShapeMismatch {
            context: "gradient count".into(),
            expected: (store.len(), 1),
            found: (grads.len(), 1),
        });
    }
    for id in store.ids() {
        if let Some(g) = grads.get(id) {
            if g.dim() != store.get(id).dim() {
                return Err(DiffError::ShapeMismatch {
                    context: format!("gradient of `{}`", store.name(id)),
                    expected: store.get(id).dim(),
                    found: g.dim(),
                });
            }
            if !g.iter().all(|x| x.is_finite()) {
                return Err(DiffError::NonFiniteUpdate(store.name(id).to_string()));
            }
        }
    }

    store.step += 1;
    let t = store.step as i32;
    let b1 = S::lit(cfg.beta1);
    let b2 = S::lit(cfg.beta2);
    let one = S::one();
    let bias1 = one - b1.powi(t);
    let bias2 = one - b2.powi(t);
    let lr = S::lit(cfg.lr);
    let eps = S::lit(cfg.eps);

    for idx in 0..store.len() {
        let grad = grads.get(super::ParamId(idx));
        let m = &mut store.first_moment[idx];
        let v = &mut store.second_moment[idx];
        let p = &mut store.values[idx];
        match grad {
            Some(g) => {
                Zip::from(&mut *m)
                    .and(g)
                    .for_each(|m, &g| *m = b1 * *m + (one - b1) * g);
                Zip::from(&mut *v)
                    .and(g)
                    .for_each(|v, &g| *v = b2 * *v + (one - b2) * g * g);
            }
            None => {
                m.mapv_inplace(|x| b1 * x);
                v.mapv_inplace(|x| b2 * x);
            }
        }
        let mut finite = true;
        Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
            let mh = m / bias1;
            let vh = v / bias2;
            *p -= lr * mh / (vh.sqrt() + eps);
            finite &= p.is_finite();
        });
        if !finite {
            return Err(DiffError::NonFiniteUpdate(store.names[idx].clone()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParameterStore::<f64>::new(0);
        let id = store.insert("x", array![[1.0]]).unwrap();
        let mut g = Gradients::empty(1);
        g.set(id, array![[1.0]]);
        adam_step(&mut store, &g, &AdamConfig::with_lr(2e-4)).unwrap();
        let moved = 1.0 - store.get(id)[[0, 0]];
        assert!((moved - 2e-4).abs() < 1e-9, "moved {moved}");
        assert_eq!(store.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_fresh_parameters_and_decays_moments() {
        let mut store = ParameterStore::<f64>::new(0);
        let id = store.insert("x", array![[0.5, -0.25]]).unwrap();
        let mut g = Gradients::empty(1);
        g.set(id, array![[0.0, 0.0]]);
        adam_step(&mut store, &g, &AdamConfig::default()).unwrap();
        assert_eq!(store.get(id), &array![[0.5, -0.25]]);

        // seed some momentum, then feed zeros
        store.first_moment[0] = array![[1.0, 1.0]];
        store.second_moment[0] = array![[1.0, 1.0]];
        adam_step(&mut store, &g, &AdamConfig::default()).unwrap();
        assert!((store.first_moment[0][[0, 0]] - 0.9).abs() < 1e-15);
        assert!((store.second_moment[0][[0, 0]] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut store = ParameterStore::<f64>::new(0);
        let id = store.insert("x", array![[0.0, 0.0]]).unwrap();
        let mut g = Gradients::empty(1);
        g.set(id, array![[1.0]]);
        assert!(matches!(
            adam_step(&mut store, &g, &AdamConfig::default()),
            Err(DiffError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut store = ParameterStore::<f32>::new(9);
            let w = store.insert_weight("w", 4, 3).unwrap();
            for k in 0..20 {
                let mut g = Gradients::empty(1);
                g.set(w, store.get(w).mapv(|x| x * 0.3 + k as f32 * 0.01));
                adam_step(&mut store, &g, &AdamConfig::default()).unwrap();
            }
            store.get(w).clone()
        };
        let a = run();
        let b = run();
        assert!(a
            .iter()
            .zip(b.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
