use super::{NodeId, ParameterStore, Tape};

/// Central-difference step used by [`gradient_check`].
pub const FD_STEP: f64 = 1e-5;

/// Magnitude below which gradient entries are compared absolutely, per unit
/// of loss. Central-difference roundoff grows with `|loss|`, so the floor is
/// `RELATIVE_FLOOR * max(1, |loss|)`.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// Analytic vs finite-difference agreement, per parameter.
#[derive(Debug, Clone)]
pub struct GradientReport {
    pub entries: Vec<(String, f64)>,
    pub tolerance: f64,
}

impl GradientReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.1).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.1 <= self.tolerance)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.entries
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
    }
}

/// Compare tape gradients of `loss_fn` against central differences on every
/// parameter entry.
///
/// `loss_fn` must be a deterministic function of the store; any sampling
/// inside it has to reseed from a fixed value on each call.
pub fn gradient_check<F>(params: &ParameterStore<f64>, tolerance: f64, loss_fn: F) -> GradientReport
where
    F: Fn(&mut Tape<f64>, &ParameterStore<f64>) -> NodeId,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, params);
    let analytic = tape
        .backward(loss, params.len())
        .expect("gradient check requires a finite forward pass");

    let floor = RELATIVE_FLOOR * tape.scalar(loss).abs().max(1.0);
    let mut probe = params.clone();
    let eval = |store: &ParameterStore<f64>| {
        let mut t = Tape::new();
        let l = loss_fn(&mut t, store);
        t.scalar(l)
    };

    let mut entries = Vec::with_capacity(params.len());
    for id in params.ids() {
        let shape = params.get(id).dim();
        let mut worst = 0.0f64;
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = probe.get(id)[[r, c]];
                probe.get_mut(id)[[r, c]] = orig + FD_STEP;
                let up = eval(&probe);
                probe.get_mut(id)[[r, c]] = orig - FD_STEP;
                let down = eval(&probe);
                probe.get_mut(id)[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * FD_STEP);
                let exact = analytic.get(id).map_or(0.0, |g| g[[r, c]]);
                let denom = exact.abs().max(numeric.abs()).max(floor);
                worst = worst.max((exact - numeric).abs() / denom);
            }
        }
        entries.push((params.name(id).to_string(), worst));
    }
    GradientReport { entries, tolerance }
}

#[cfg(test)]
mod tests {
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diff::GruParams;

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        let mut store = ParameterStore::<f64>::new(0);
        let x = store.insert("x", array![[3.0]]).unwrap();
        let mut tape = Tape::new();
        let xn = tape.param(&store, x);
        let y = tape.square(xn);
        let g = tape.backward(y, 1).unwrap();
        assert_eq!(g.get(x).unwrap()[[0, 0]], 6.0);
        let report = gradient_check(&store, 1e-4, |t, s| {
            let xn = t.param(s, x);
            t.square(xn)
        });
        let numeric = ((3.0 + FD_STEP).powi(2) - (3.0 - FD_STEP).powi(2)) / (2.0 * FD_STEP);
        assert!((numeric - 6.0).abs() < 1e-8);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn gru_step_with_random_parameters() {
        let mut store = ParameterStore::<f64>::new(11);
        let gru = GruParams::register(&mut store, "gru", 3, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // non-zero biases so every gate path is exercised
        for id in [gru.b_input, gru.b_hidden] {
            store
                .get_mut(id)
                .mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        let x = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let h = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
        let w = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
        let report = gradient_check(&store, 1e-4, |t, s| {
            let xn = t.input(x.clone());
            let hn = t.input(h.clone());
            let h1 = t.gru_step(s, gru, xn, hn);
            let h2 = t.gru_step(s, gru, xn, h1);
            let wn = t.input(w.clone());
            let prod = t.mul(h2, wn);
            t.sum(prod)
        });
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn every_primitive_agrees_with_finite_differences() {
        let mut store = ParameterStore::<f64>::new(5);
        let a = store.insert_weight("a", 3, 4).unwrap();
        let b = store.insert_weight("b", 3, 4).unwrap();
        let c = store.insert_weight("c", 4, 2).unwrap();
        let row = store.insert_weight("row", 1, 4).unwrap();
        let labels = [0usize, 1, 1];
        let mask = array![[true, false], [true, true], [false, true]];
        let report = gradient_check(&store, 1e-4, |t, s| {
            let a = t.param(s, a);
            let b = t.param(s, b);
            let c = t.param(s, c);
            let row = t.param(s, row);
            let sum = t.add(a, b);
            let diff = t.sub(a, b);
            let prod = t.mul(sum, diff);
            let sig = t.sigmoid(prod);
            let sp = t.softplus(b);
            let q = t.div(sig, sp);
            let q = t.add_row(q, row);
            let th = t.tanh(q);
            let m = t.matmul(th, c);
            let e = t.exp(m);
            let l = t.ln(e);
            let ang = t.atan2(a, sp);
            let ang_abs = t.abs(ang);
            let angsum = t.sum_cols(ang_abs);
            let scaled = t.mul_col(l, angsum);
            let sq = t.square(b);
            let rs = t.sum_cols(sq);
            let rs = t.add_scalar(rs, 0.1);
            let root = t.sqrt(rs);
            let dc = t.div_col(scaled, root);
            let cl = t.clamp(dc, -50.0, 50.0);
            let lse = t.log_sum_exp_rows(cl, Some(&mask));
            let xent = t.softmax_cross_entropy(cl, &labels);
            let gram = t.matmul_t(a, b);
            let gs = t.sum_rows(gram);
            let cat = t.concat_cols(&[gs, row]);
            let cat2 = t.concat_rows(&[cat, cat]);
            let sl = t.slice_cols(cat2, 1, 3);
            let sl = t.slice_rows(sl, 1, 1);
            let r = t.relu(sl);
            let s1 = t.sum(lse);
            let s2 = t.mean(r);
            let tot = t.add(s1, s2);
            let tot = t.add(tot, xent);
            t.scale(tot, 0.7)
        });
        assert!(report.passed(), "{report:?}");
    }
}
