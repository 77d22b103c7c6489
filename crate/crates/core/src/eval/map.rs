//! Average precision over ranked scores.

use ndarray::Array2;

use super::EvalError;

/// Area under the precision-recall curve, summing precision at every
/// recall step. Tied scores enter the ranking together, so the result does
/// not depend on how ties are ordered. `None` when there are no positives.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positives.len(), "one label per score");
    let n_pos = positives.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut group_pos = 0;
        while i < order.len() && scores[order[i]].total_cmp(&s).is_eq() {
            group_pos += positives[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        if group_pos > 0 {
            tp += group_pos;
            ap += (group_pos as f64 / n_pos as f64) * (tp as f64 / seen as f64);
        }
    }
    Some(ap)
}

/// Per-class AP (`None` for classes without positives) and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// One-vs-rest AP for every column of `scores` (`n x classes`); the mean
/// weighs every class with positives equally.
pub fn mean_average_precision(
    scores: &Array2<f64>,
    labels: &[usize],
) -> Result<MapReport, EvalError> {
    if scores.nrows() != labels.len() {
        return Err(EvalError::Dimension {
            expected: labels.len(),
            found: scores.nrows(),
        });
    }
    let per_class = per_class_ap(scores, labels);
    for (c, ap) in per_class.iter().enumerate() {
        if ap.is_none() {
            log::warn!("class {c} has no positive frames; excluded from MAP");
        }
    }
    let mean = macro_mean(&per_class).ok_or(EvalError::NoPositives)?;
    Ok(MapReport { per_class, mean })
}

fn per_class_ap(scores: &Array2<f64>, labels: &[usize]) -> Vec<Option<f64>> {
    (0..scores.ncols())
        .map(|c| {
            let col: Vec<f64> = scores.column(c).to_vec();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            average_precision(&col, &pos)
        })
        .collect()
}

fn macro_mean(per_class: &[Option<f64>]) -> Option<f64> {
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    if valid.is_empty() {
        None
    } else {
        Some(valid.iter().sum::<f64>() / valid.len() as f64)
    }
}

/// Macro mean without warnings, for per-epoch monitoring.
pub(crate) fn quiet_map(scores: &Array2<f64>, labels: &[usize]) -> Option<f64> {
    macro_mean(&per_class_ap(scores, labels))
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn hand_case() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_ranking() {
        let ap = average_precision(&[0.9, 0.8, 0.1, 0.0], &[true, true, false, false]);
        assert_eq!(ap, Some(1.0));
        assert_eq!(average_precision(&[0.3], &[false]), None);
    }

    #[test]
    fn all_tied_is_prevalence() {
        let ap = average_precision(&[0.5; 4], &[true, false, false, false]).unwrap();
        assert!((ap - 0.25).abs() < 1e-12);
    }

    #[test]
    fn monotone_transform_invariance() {
        let s = [0.1, 0.7, 0.3, 0.3, 0.9, 0.05];
        let l = [false, true, true, false, false, true];
        let t: Vec<f64> = s.iter().map(|v: &f64| (3.0 * v).exp() - 2.0).collect();
        assert_eq!(average_precision(&s, &l), average_precision(&t, &l));
    }

    #[test]
    fn macro_mean_skips_empty_classes() {
        let scores = array![[0.9, 0.1, 0.0], [0.2, 0.8, 0.0], [0.6, 0.4, 0.0]];
        let r = mean_average_precision(&scores, &[0, 1, 0]).unwrap();
        assert_eq!(r.per_class[2], None);
        assert_eq!(r.per_class[0], Some(1.0));
        assert_eq!(r.per_class[1], Some(1.0));
        assert_eq!(r.mean, 1.0);
        assert!(mean_average_precision(&scores, &[0, 1]).is_err());
    }
}
