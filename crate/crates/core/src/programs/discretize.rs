//! Tercile thresholds turning a continuous attribute into three classes.

use serde::{Deserialize, Serialize};

use super::{evaluate_program, AttributeProgram, ProgramError};
use crate::trajectory::Window;

/// Smallest sample a dataset-level fit accepts.
pub const MIN_FIT_SAMPLE: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Discretizer {
    pub t1: f64,
    pub t2: f64,
}

/// Linear-interpolation percentile at `q` in `[0, 1]` on sorted data, using
/// positions `q * (n - 1)`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

impl Discretizer {
    /// Thresholds at the 1/3 and 2/3 percentiles of `values`.
    pub fn fit_values(values: &[f64]) -> Result<Self, ProgramError> {
        let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        sorted.sort_by(f64::total_cmp);
        let mut distinct = sorted.clone();
        distinct.dedup();
        if distinct.len() < 3 {
            return Err(ProgramError::Degenerate("<values>".into()));
        }
        let t1 = percentile(&sorted, 1.0 / 3.0);
        let t2 = percentile(&sorted, 2.0 / 3.0);
        if t1 == t2 {
            return Err(ProgramError::Degenerate("<values>".into()));
        }
        Ok(Self { t1, t2 })
    }
}

/// Class 0 for `v <= t1`, 1 for `t1 < v <= t2`, 2 above.
pub fn discretize(v: f64, d: &Discretizer) -> usize {
    if v <= d.t1 {
        0
    } else if v <= d.t2 {
        1
    } else {
        2
    }
}

/// Fit on a program's outputs over a window sample of at least
/// [`MIN_FIT_SAMPLE`] windows.
pub fn fit_discretizer(
    p: &AttributeProgram,
    windows: &[Window],
) -> Result<Discretizer, ProgramError> {
    if windows.len() < MIN_FIT_SAMPLE {
        return Err(ProgramError::SampleTooSmall {
            id: p.id.clone(),
            needed: MIN_FIT_SAMPLE,
            got: windows.len(),
        });
    }
    let values = windows
        .iter()
        .map(|w| evaluate_program(p, w).map(|v| v.value))
        .collect::<Result<Vec<_>, _>>()?;
    Discretizer::fit_values(&values).map_err(|_| ProgramError::Degenerate(p.id.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_to_nine() {
        let v: Vec<f64> = (1..=9).map(f64::from).collect();
        let d = Discretizer::fit_values(&v).unwrap();
        assert!((d.t1 - 11.0 / 3.0).abs() < 1e-12);
        assert!((d.t2 - 19.0 / 3.0).abs() < 1e-12);
        assert_eq!(discretize(2.0, &d), 0);
        assert_eq!(discretize(5.0, &d), 1);
        assert_eq!(discretize(8.0, &d), 2);
    }

    #[test]
    fn three_value_blocks() {
        let v: Vec<f64> = [0.0, 1.0, 2.0].iter().flat_map(|&x| vec![x; 50]).collect();
        let d = Discretizer::fit_values(&v).unwrap();
        assert!((d.t1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((d.t2 - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn boundaries_fall_in_lower_class() {
        let d = Discretizer { t1: 1.0, t2: 2.0 };
        assert_eq!(discretize(1.0, &d), 0);
        assert_eq!(discretize(2.0, &d), 1);
        assert_eq!(discretize(2.0 + 1e-12, &d), 2);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(Discretizer::fit_values(&[1.0; 200]).is_err());
        assert!(Discretizer::fit_values(&[0.0, 1.0]).is_err());
        let mut v = vec![5.0; 100];
        v.push(0.0);
        v.push(9.0);
        assert!(Discretizer::fit_values(&v).is_err());
    }
}
