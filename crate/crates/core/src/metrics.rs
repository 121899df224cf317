//! Importance weights, collapse diagnostics and evaluation metrics.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Normalised nonnegative importance weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    w: DVector<f64>,
}

impl WeightVector {
    /// Normalise raw nonnegative weights. All-zero or non-finite input is the
    /// degenerate-weights error (likelihood underflow).
    pub fn normalized(raw: DVector<f64>) -> Result<Self> {
        if raw.is_empty() || raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::DegenerateWeights);
        }
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 {
            return Err(Error::DegenerateWeights);
        }
        Ok(Self { w: raw / sum })
    }

    /// Normalise from log weights with a max shift, so that underflow of the
    /// raw likelihood never zeroes out every weight at once.
    pub fn from_log_weights(log_w: &DVector<f64>) -> Result<Self> {
        let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::DegenerateWeights);
        }
        Self::normalized(log_w.map(|lw| (lw - max).exp()))
    }

    pub fn uniform(n: usize) -> Self {
        Self { w: DVector::from_element(n, 1.0 / n as f64) }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.w
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w.iter()
    }
}

/// Effective sample size `1 / sum(w_i^2)`; ranges from 1 (all mass on one
/// member) to N_ens (uniform).
pub fn effective_sample_size(w: &WeightVector) -> f64 {
    let s: f64 = w.iter().map(|v| v * v).sum();
    1.0 / s
}

/// Sample quartiles at positions `i (N + 1) / 4`, i = 1, 2, 3, on the sorted
/// sample, with linear interpolation between adjacent order statistics at
/// fractional positions. Needs at least four values.
pub fn quartiles(values: &[f64]) -> Result<(f64, f64, f64)> {
    if values.len() < 4 {
        return Err(Error::SampleTooSmall);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("quartiles of non-finite sample".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let at = |i: f64| -> f64 {
        // 1-based position, clamped into [1, n].
        let pos = (i * (n + 1.0) / 4.0).clamp(1.0, n);
        let k = pos.floor() as usize;
        let frac = pos - k as f64;
        if frac == 0.0 || k >= sorted.len() {
            sorted[k - 1]
        } else {
            sorted[k - 1] + frac * (sorted[k] - sorted[k - 1])
        }
    };
    Ok((at(1.0), at(2.0), at(3.0)))
}

/// `[Q1 - factor * IQR, Q3 + factor * IQR]` of the sample.
pub fn iqr_interval(values: &[f64], factor: f64) -> Result<(f64, f64)> {
    let (q1, _, q3) = quartiles(values)?;
    let iqr = q3 - q1;
    Ok((q1 - factor * iqr, q3 + factor * iqr))
}

/// Time-and-component averaged root mean squared error of a state estimate
/// against the truth; the first `skip` cycles are excluded.
pub fn rmse(estimates: &[DVector<f64>], truth: &[DVector<f64>], skip: usize) -> Result<f64> {
    if estimates.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "estimate series has {} entries, truth {}",
            estimates.len(),
            truth.len()
        )));
    }
    if skip >= estimates.len() {
        return Err(Error::InvalidConfig(format!(
            "skip {} must be below series length {}",
            skip,
            estimates.len()
        )));
    }
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for (est, tr) in estimates.iter().zip(truth.iter()).skip(skip) {
        if est.len() != tr.len() {
            return Err(Error::DimensionMismatch("estimate/truth state dims differ".into()));
        }
        sum_sq += (est - tr).norm_squared();
        count += est.len();
    }
    Ok((sum_sq / count as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;
    use proptest::prelude::*;

    #[test]
    fn ess_uniform_and_degenerate() {
        let uniform = WeightVector::uniform(10);
        assert_abs_diff_eq!(effective_sample_size(&uniform), 10.0, epsilon = 1e-12);

        let point = WeightVector::normalized(dvector![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(effective_sample_size(&point), 1.0, epsilon = 1e-12);

        let mixed = WeightVector::normalized(dvector![0.5, 0.25, 0.25]).unwrap();
        assert_abs_diff_eq!(effective_sample_size(&mixed), 8.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn all_zero_weights_are_degenerate() {
        assert!(matches!(
            WeightVector::normalized(DVector::zeros(5)),
            Err(Error::DegenerateWeights)
        ));
    }

    #[test]
    fn log_weights_survive_underflow() {
        let w = WeightVector::from_log_weights(&dvector![-2000.0, -2001.0]).unwrap();
        assert!(w.as_vector()[0] > w.as_vector()[1]);
        assert_abs_diff_eq!(w.as_vector().sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn quartiles_integer_positions() {
        let v: Vec<f64> = (1..=7).map(|x| x as f64).collect();
        assert_eq!(quartiles(&v).unwrap(), (2.0, 4.0, 6.0));
    }

    #[test]
    fn quartiles_constant_sample() {
        let v = vec![3.5; 6];
        assert_eq!(quartiles(&v).unwrap(), (3.5, 3.5, 3.5));
    }

    #[test]
    fn quartiles_interpolated_positions() {
        // N = 8: positions 2.25, 4.5, 6.75 interpolated by hand.
        let v: Vec<f64> = (1..=8).map(|x| x as f64).collect();
        let (q1, q2, q3) = quartiles(&v).unwrap();
        assert_abs_diff_eq!(q1, 2.25, epsilon = 1e-12);
        assert_abs_diff_eq!(q2, 4.5, epsilon = 1e-12);
        assert_abs_diff_eq!(q3, 6.75, epsilon = 1e-12);
    }

    #[test]
    fn quartiles_reject_small_sample() {
        assert!(matches!(quartiles(&[1.0, 2.0, 3.0]), Err(Error::SampleTooSmall)));
    }

    #[test]
    fn iqr_interval_cases() {
        let v: Vec<f64> = (1..=7).map(|x| x as f64).collect();
        assert_eq!(iqr_interval(&v, 0.0).unwrap(), (2.0, 6.0));
        let (lo, hi) = iqr_interval(&v, 1.5).unwrap();
        assert_abs_diff_eq!(lo, -4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(hi, 12.0, epsilon = 1e-12);

        let c = vec![2.0; 5];
        assert_eq!(iqr_interval(&c, 1.5).unwrap(), (2.0, 2.0));
    }

    #[test]
    fn rmse_examples() {
        let zero = rmse(
            &[dvector![1.0, 2.0], dvector![3.0, 4.0]],
            &[dvector![1.0, 2.0], dvector![3.0, 4.0]],
            0,
        )
        .unwrap();
        assert_eq!(zero, 0.0);

        let unit = rmse(&[dvector![1.0], dvector![1.0]], &[dvector![0.0], dvector![2.0]], 0).unwrap();
        assert_abs_diff_eq!(unit, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn rmse_constant_shift_oracle() {
        let rng = RngStream::new(21);
        let truth: Vec<_> = (0..20).map(|k| rng.substream(k).standard_normal_vector(4)).collect();
        let c = 0.37;
        let est: Vec<_> = truth.iter().map(|t| t.add_scalar(c)).collect();
        assert_abs_diff_eq!(rmse(&est, &truth, 3).unwrap(), c, epsilon = 1e-12);
    }

    #[test]
    fn rmse_rejects_mismatch() {
        assert!(rmse(&[dvector![1.0]], &[], 0).is_err());
        assert!(rmse(&[dvector![1.0]], &[dvector![1.0]], 1).is_err());
    }

    proptest! {
        #[test]
        fn ess_stays_in_range(raw in proptest::collection::vec(0.0f64..1.0, 2..40)) {
            prop_assume!(raw.iter().sum::<f64>() > 1e-12);
            let w = WeightVector::normalized(DVector::from_vec(raw)).unwrap();
            let ess = effective_sample_size(&w);
            prop_assert!(ess >= 1.0 - 1e-9);
            prop_assert!(ess <= w.len() as f64 + 1e-9);
        }

        #[test]
        fn quartiles_are_monotone(values in proptest::collection::vec(-1e3f64..1e3, 4..60)) {
            let (q1, q2, q3) = quartiles(&values).unwrap();
            prop_assert!(q1 <= q2 && q2 <= q3);
        }

        #[test]
        fn wider_factor_contains_bare_interval(values in proptest::collection::vec(-1e3f64..1e3, 4..60)) {
            let (lo0, hi0) = iqr_interval(&values, 0.0).unwrap();
            let (lo15, hi15) = iqr_interval(&values, 1.5).unwrap();
            prop_assert!(lo15 <= lo0 && hi15 >= hi0);
        }
    }
}
