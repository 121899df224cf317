//! Ensemble container and the spread-maintenance operations (inflation,
//! rejuvenation) shared by every filter.

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Matrix of ensemble members: one state vector per column.
///
/// Column order is stable across operations; an operation that permutes or
/// replaces members says so explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: DMatrix<f64>,
}

impl Ensemble {
    /// Wrap a state-dim × n_ens matrix. Requires at least two members and
    /// finite entries.
    pub fn new(members: DMatrix<f64>) -> Result<Self> {
        if members.ncols() < 2 {
            return Err(Error::InvalidConfig(format!(
                "ensemble needs N_ens >= 2 members, got {}",
                members.ncols()
            )));
        }
        if members.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("ensemble contains non-finite entries".into()));
        }
        Ok(Self { members })
    }

    pub fn from_columns(columns: &[DVector<f64>]) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::InvalidConfig("ensemble needs N_ens >= 2 members, got 0".into()));
        }
        let dim = columns[0].len();
        if columns.iter().any(|c| c.len() != dim) {
            return Err(Error::DimensionMismatch("ensemble members differ in length".into()));
        }
        let mut m = DMatrix::zeros(dim, columns.len());
        for (j, c) in columns.iter().enumerate() {
            m.set_column(j, c);
        }
        Self::new(m)
    }

    /// Internal constructor for matrices produced by already-validated
    /// arithmetic on an existing ensemble.
    pub(crate) fn from_matrix_unchecked(members: DMatrix<f64>) -> Self {
        Self { members }
    }

    pub fn state_dim(&self) -> usize {
        self.members.nrows()
    }

    pub fn n_members(&self) -> usize {
        self.members.ncols()
    }

    pub fn members(&self) -> &DMatrix<f64> {
        &self.members
    }

    pub fn member(&self, i: usize) -> DVectorView<'_, f64> {
        self.members.column(i)
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.members
    }

    pub fn mean(&self) -> DVector<f64> {
        let n = self.n_members() as f64;
        let mut mean = DVector::zeros(self.state_dim());
        for col in self.members.column_iter() {
            mean += col;
        }
        mean / n
    }
}

/// Forecast mean and anomaly matrix.
#[derive(Debug, Clone)]
pub struct EnsembleStatistics {
    pub mean: DVector<f64>,
    /// Column i is member_i - mean; columns sum to (numerically) zero.
    pub anomalies: DMatrix<f64>,
}

/// Mean and member deviations of an ensemble.
pub fn ensemble_statistics(ensemble: &Ensemble) -> EnsembleStatistics {
    let mean = ensemble.mean();
    let mut anomalies = ensemble.members().clone();
    for mut col in anomalies.column_iter_mut() {
        col -= &mean;
    }
    EnsembleStatistics { mean, anomalies }
}

/// Scale anomalies about the mean by `gamma >= 1`; the mean is unchanged.
pub fn apply_inflation(ensemble: &Ensemble, gamma: f64) -> Result<Ensemble> {
    if !(gamma >= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "inflation factor must satisfy gamma >= 1, got {gamma}"
        )));
    }
    if gamma == 1.0 {
        return Ok(ensemble.clone());
    }
    let stats = ensemble_statistics(ensemble);
    let mut members = DMatrix::zeros(ensemble.state_dim(), ensemble.n_members());
    for j in 0..ensemble.n_members() {
        let col = &stats.mean + stats.anomalies.column(j) * gamma;
        members.set_column(j, &col);
    }
    Ok(Ensemble::from_matrix_unchecked(members))
}

/// Denominator convention for the rejuvenation noise amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RejuvenationScaling {
    /// tau / sqrt(N_ens - 1); the default.
    #[default]
    SqrtEnsembleMinusOne,
    /// tau / (N_ens - 1); alternative convention kept selectable.
    EnsembleMinusOne,
}

impl RejuvenationScaling {
    pub fn amplitude(&self, tau: f64, n_ens: usize) -> f64 {
        match self {
            RejuvenationScaling::SqrtEnsembleMinusOne => tau / ((n_ens as f64) - 1.0).sqrt(),
            RejuvenationScaling::EnsembleMinusOne => tau / ((n_ens as f64) - 1.0),
        }
    }
}

/// Perturb each member with anomaly-weighted Gaussian noise:
/// `member_j += A * xi[:, j] * tau / sqrt(N_ens - 1)` with `xi` i.i.d. standard
/// normal. Zero-mean in expectation; a no-op for `tau == 0` or a collapsed
/// ensemble.
pub fn apply_rejuvenation(ensemble: &Ensemble, tau: f64, rng: RngStream) -> Result<Ensemble> {
    apply_rejuvenation_scaled(ensemble, tau, RejuvenationScaling::default(), rng)
}

pub fn apply_rejuvenation_scaled(
    ensemble: &Ensemble,
    tau: f64,
    scaling: RejuvenationScaling,
    rng: RngStream,
) -> Result<Ensemble> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "rejuvenation parameter must satisfy tau >= 0, got {tau}"
        )));
    }
    if tau == 0.0 {
        return Ok(ensemble.clone());
    }
    let n = ensemble.n_members();
    let stats = ensemble_statistics(ensemble);
    if stats.anomalies.iter().all(|v| *v == 0.0) {
        return Ok(ensemble.clone());
    }
    let xi = rng.standard_normal_matrix(n, n);
    let perturbation = &stats.anomalies * xi * scaling.amplitude(tau, n);
    Ok(Ensemble::from_matrix_unchecked(ensemble.members() + perturbation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;

    fn two_point() -> Ensemble {
        Ensemble::new(dmatrix![1.0, 3.0; 1.0, 3.0]).unwrap()
    }

    #[test]
    fn statistics_two_point_symmetry() {
        let stats = ensemble_statistics(&two_point());
        assert_eq!(stats.mean, nalgebra::dvector![2.0, 2.0]);
        assert_eq!(stats.anomalies, dmatrix![-1.0, 1.0; -1.0, 1.0]);
    }

    #[test]
    fn statistics_identical_members() {
        let e = Ensemble::new(DMatrix::from_element(3, 5, 4.25)).unwrap();
        let stats = ensemble_statistics(&e);
        assert_eq!(stats.mean, DVector::from_element(3, 4.25));
        assert!(stats.anomalies.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn statistics_anomaly_columns_sum_to_zero() {
        let e = Ensemble::new(RngStream::new(11).standard_normal_matrix(5, 10)).unwrap();
        let stats = ensemble_statistics(&e);
        // Direct summation oracle.
        let mut rowsum = DVector::<f64>::zeros(5);
        for col in stats.anomalies.column_iter() {
            rowsum += col;
        }
        assert!(rowsum.amax() < 1e-12);
    }

    #[test]
    fn inflation_identity_and_doubling() {
        let e = two_point();
        assert_eq!(apply_inflation(&e, 1.0).unwrap(), e);

        let scalar = Ensemble::new(dmatrix![-1.0, 1.0]).unwrap();
        let inflated = apply_inflation(&scalar, 2.0).unwrap();
        assert_eq!(inflated.members(), &dmatrix![-2.0, 2.0]);
    }

    #[test]
    fn inflation_preserves_mean() {
        let e = Ensemble::new(RngStream::new(5).standard_normal_matrix(4, 9)).unwrap();
        let inflated = apply_inflation(&e, 1.05).unwrap();
        assert_abs_diff_eq!(inflated.mean(), e.mean(), epsilon = 1e-12);
    }

    #[test]
    fn inflation_rejects_contraction() {
        assert!(matches!(apply_inflation(&two_point(), 0.9), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn rejuvenation_identity_cases() {
        let e = two_point();
        let rng = RngStream::new(0);
        assert_eq!(apply_rejuvenation(&e, 0.0, rng).unwrap(), e);

        let collapsed = Ensemble::new(DMatrix::from_element(2, 4, 1.5)).unwrap();
        assert_eq!(apply_rejuvenation(&collapsed, 0.7, rng).unwrap(), collapsed);
    }

    #[test]
    fn rejuvenation_perturbation_is_zero_mean() {
        // Monte Carlo oracle: 10^4 repetitions, sample mean within 3 sigma/sqrt(reps).
        let e = Ensemble::new(dmatrix![-1.0, 0.5, 2.0; 0.25, -0.75, 1.0]).unwrap();
        let tau = 0.2;
        let reps = 10_000;
        let root = RngStream::new(99);
        let mut sum = DMatrix::zeros(2, 3);
        for r in 0..reps {
            let perturbed = apply_rejuvenation(&e, tau, root.substream(r as u64)).unwrap();
            sum += perturbed.members() - e.members();
        }
        let mean = sum / reps as f64;
        // Per-entry std of one perturbation is bounded by tau * max|A| * sqrt(n)/sqrt(n-1).
        let sigma_bound = tau * 2.0 * (3.0f64).sqrt() / (2.0f64).sqrt();
        let tol = 3.0 * sigma_bound / (reps as f64).sqrt();
        assert!(mean.amax() < tol, "bias {} exceeds {}", mean.amax(), tol);
    }

    #[test]
    fn ensemble_rejects_single_member_and_nan() {
        assert!(Ensemble::new(DMatrix::from_element(3, 1, 0.0)).is_err());
        let mut m = DMatrix::from_element(2, 3, 0.0);
        m[(1, 2)] = f64::NAN;
        assert!(Ensemble::new(m).is_err());
    }
}
