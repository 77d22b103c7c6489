//! Program-supervised contrastive loss, vectorized over the batch.

use ndarray::Array2;

use super::TaskError;
use crate::diff::{NodeId, Tape};
use crate::scalar::Scalar;

/// Per-anchor weights for the vectorized form.
///
/// `w[i][k] = sum_j [k != i, same class under j] / n_pos(i, j)` and
/// `count[i]` = number of programs with at least one positive for anchor `i`.
pub(crate) fn positive_weights(labels: &[Vec<usize>]) -> (Array2<f64>, Vec<f64>) {
    let n = labels.len();
    let m = labels.first().map_or(0, Vec::len);
    let mut w = Array2::<f64>::zeros((n, n));
    let mut count = vec![0.0; n];
    for i in 0..n {
        for (j, &class) in labels[i].iter().enumerate().take(m) {
            let pos: Vec<usize> = (0..n)
                .filter(|&k| k != i && labels[k][j] == class)
                .collect();
            if pos.is_empty() {
                continue;
            }
            count[i] += 1.0;
            let inv = 1.0 / pos.len() as f64;
            for k in pos {
                w[[i, k]] += inv;
            }
        }
    }
    (w, count)
}

/// Sum over anchors `i` and programs `j` of
/// `-1/n_pos * sum_{k != i, same class} log(exp(g_i.g_k/t) / sum_{l != i} exp(g_i.g_l/t))`
/// with `g` the L2-normalized rows of `proj`. Anchors with no positive under
/// a program contribute nothing for it. `labels[i][j]` is the class of row
/// `i` under program `j`.
pub fn contrastive_loss<S: Scalar>(
    tape: &mut Tape<S>,
    proj: NodeId,
    labels: &[Vec<usize>],
    temperature: f64,
) -> Result<NodeId, TaskError> {
    let n = tape.value(proj).nrows();
    if n < 2 {
        return Err(TaskError::BatchTooSmall(n));
    }
    if labels.len() != n {
        return Err(TaskError::LabelCount {
            expected: n,
            found: labels.len(),
        });
    }
    if temperature <= 0.0 {
        return Err(TaskError::Temperature(temperature));
    }
    let g = tape.l2_normalize_rows(proj);
    let sim = tape.matmul_t(g, g);
    let logits = tape.scale(sim, S::lit(1.0 / temperature));
    let mask = Array2::from_shape_fn((n, n), |(i, l)| i != l);
    let lse = tape.log_sum_exp_rows(logits, Some(&mask));
    let (w, count) = positive_weights(labels);
    let count = tape.input(Array2::from_shape_fn((n, 1), |(i, _)| S::lit(count[i])));
    let w = tape.input(w.mapv(S::lit));
    let a = tape.mul(lse, count);
    let a = tape.sum(a);
    let b = tape.mul(w, logits);
    let b = tape.sum(b);
    Ok(tape.sub(a, b))
}

/// Labels for the unsupervised variant: row `i` and its augmented twin
/// `i + b` share a class, every other pair differs.
pub fn twin_labels(b: usize) -> Vec<Vec<usize>> {
    (0..2 * b).map(|i| vec![i % b]).collect()
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn two_same_class_elements_give_zero() {
        let mut tape = Tape::<f64>::new();
        let p = tape.input(array![[0.3, -1.0], [2.0, 0.5]]);
        let l = contrastive_loss(&mut tape, p, &[vec![1], vec![1]], 0.07).unwrap();
        assert!(tape.scalar(l).abs() < 1e-12);
    }

    #[test]
    fn all_distinct_classes_contribute_nothing() {
        let mut tape = Tape::<f64>::new();
        let p = tape.input(array![[0.3, -1.0], [2.0, 0.5], [0.1, 0.1]]);
        let l = contrastive_loss(&mut tape, p, &[vec![0], vec![1], vec![2]], 0.5).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn rejects_single_element() {
        let mut tape = Tape::<f64>::new();
        let p = tape.input(array![[1.0, 0.0]]);
        assert!(matches!(
            contrastive_loss(&mut tape, p, &[vec![0]], 0.07),
            Err(TaskError::BatchTooSmall(1))
        ));
    }

    #[test]
    fn invariant_to_common_rotation() {
        let p = array![[0.3, -1.0], [2.0, 0.5], [0.1, 0.4], [-0.7, 0.2]];
        let labels = vec![vec![0, 1], vec![0, 2], vec![1, 1], vec![1, 2]];
        let (s, c) = 0.83f64.sin_cos();
        let rot = array![[c, s], [-s, c]];
        let eval = |p: Array2<f64>| {
            let mut tape = Tape::<f64>::new();
            let n = tape.input(p);
            let l = contrastive_loss(&mut tape, n, &labels, 0.2).unwrap();
            tape.scalar(l)
        };
        assert!((eval(p.clone()) - eval(p.dot(&rot))).abs() < 1e-12);
    }
}
