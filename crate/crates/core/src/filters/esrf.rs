//! Ensemble square root filter and its localised variant.
//!
//! The analysis is the deterministic linear transform `z_a = Z_f D` with
//! `D = S + (w - 1/N) 1^T`, where S is the symmetric inverse square root of
//! `I + beta/(N-1) (HA)^T R^-1 (HA)` and w are the square-root importance
//! weights. `beta` is the tempering exponent; a plain full update is
//! `beta = 1`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::ensemble::{apply_inflation, Ensemble};
use crate::error::{Error, Result};
use crate::filters::localization::{localization_weights, LocalizationConfig};
use crate::observation::ObservationModel;

#[derive(Debug, Clone)]
pub struct EsrfConfig {
    /// Multiplicative anomaly inflation, applied before the update.
    pub inflation: f64,
    /// Likelihood fraction assimilated by this update (1 - alpha of the
    /// tempering split); 1 for the untempered filter.
    pub tempering_exponent: f64,
    pub localization: Option<LocalizationConfig>,
}

impl Default for EsrfConfig {
    fn default() -> Self {
        Self { inflation: 1.05, tempering_exponent: 1.0, localization: None }
    }
}

impl EsrfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inflation >= 1.0) {
            return Err(Error::InvalidConfig(format!("inflation must be >= 1, got {}", self.inflation)));
        }
        if !(0.0..=1.0).contains(&self.tempering_exponent) {
            return Err(Error::InvalidConfig(format!(
                "tempering exponent must lie in [0, 1], got {}",
                self.tempering_exponent
            )));
        }
        Ok(())
    }

    pub fn with_exponent(&self, beta: f64) -> Self {
        Self { tempering_exponent: beta, ..self.clone() }
    }
}

/// Symmetric inverse square root and inverse of
/// `M = I + beta/(N-1) (HA)^T W (HA)` for a weighted precision `W`.
fn sqrt_pair(ha: &DMatrix<f64>, weighted_precision: &DMatrix<f64>, beta: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = ha.ncols();
    let scale = beta / (n as f64 - 1.0);
    let mut m = DMatrix::identity(n, n);
    if beta != 0.0 {
        let b = ha.transpose() * weighted_precision * ha;
        // W is symmetric in every supported configuration; symmetrise to guard
        // the eigensolver against rounding.
        m += (&b + b.transpose()) * (0.5 * scale);
    }
    let eig = m.symmetric_eigen();
    let mut inv_sqrt = DVector::zeros(n);
    let mut inv = DVector::zeros(n);
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        let l = lambda.max(1e-14);
        inv_sqrt[i] = 1.0 / l.sqrt();
        inv[i] = 1.0 / l;
    }
    let q = &eig.eigenvectors;
    let s = q * DMatrix::from_diagonal(&inv_sqrt) * q.transpose();
    let s2 = q * DMatrix::from_diagonal(&inv) * q.transpose();
    Ok((s, s2))
}

/// Square root transform matrix `S` for observed anomalies `HA`, observation
/// covariance `R` and tempering exponent `beta`.
pub fn square_root_matrix(ha: &DMatrix<f64>, r: &DMatrix<f64>, beta: f64) -> Result<DMatrix<f64>> {
    let n_y = ha.nrows();
    if r.nrows() != n_y || r.ncols() != n_y {
        return Err(Error::DimensionMismatch("R does not match HA".into()));
    }
    let chol = nalgebra::Cholesky::new(r.clone())
        .ok_or_else(|| Error::InvalidConfig("R must be positive definite".into()))?;
    let r_inv = chol.inverse();
    Ok(sqrt_pair(ha, &r_inv, beta)?.0)
}

/// Transform coefficients `D` for one (possibly localised) analysis.
fn filter_coefficients(
    ha: &DMatrix<f64>,
    weighted_precision: &DMatrix<f64>,
    innovation: &DVector<f64>,
    beta: f64,
) -> Result<DMatrix<f64>> {
    let n = ha.ncols();
    let nf = n as f64;
    let scale = beta / (nf - 1.0);
    let (s, s2) = sqrt_pair(ha, weighted_precision, beta)?;
    let w_hat = DVector::from_element(n, 1.0 / nf)
        - &s2 * (ha.transpose() * (weighted_precision * innovation)) * scale;
    let mut d = s;
    for i in 0..n {
        let shift = w_hat[i] - 1.0 / nf;
        for j in 0..n {
            d[(i, j)] += shift;
        }
    }
    Ok(d)
}

fn observed_stats(e: &Ensemble, obs: &ObservationModel) -> (DMatrix<f64>, DVector<f64>) {
    let hz = obs.observe_ensemble(e);
    let n = e.n_members() as f64;
    let mut h_mean = DVector::zeros(hz.nrows());
    for col in hz.column_iter() {
        h_mean += col;
    }
    h_mean /= n;
    let mut ha = hz;
    for mut col in ha.column_iter_mut() {
        col -= &h_mean;
    }
    (ha, h_mean)
}

/// Global ESRF analysis: inflation, then the square-root transform.
pub fn esrf_update(
    e: &Ensemble,
    y: &DVector<f64>,
    obs: &ObservationModel,
    cfg: &EsrfConfig,
) -> Result<Ensemble> {
    cfg.validate()?;
    if y.len() != obs.obs_dim() {
        return Err(Error::DimensionMismatch("observation has wrong dimension".into()));
    }
    let inflated = apply_inflation(e, cfg.inflation)?;
    let (ha, h_mean) = observed_stats(&inflated, obs);
    let innovation = h_mean - y;
    let d = filter_coefficients(&ha, obs.noise_inv()?, &innovation, cfg.tempering_exponent)?;
    Ok(Ensemble::from_matrix_unchecked(inflated.members() * d))
}

/// Localised ESRF: an independent square-root analysis per grid point with
/// observation influence tapered by the localisation matrix.
pub fn lesrf_update(
    e: &Ensemble,
    y: &DVector<f64>,
    obs: &ObservationModel,
    cfg: &EsrfConfig,
) -> Result<Ensemble> {
    cfg.validate()?;
    let loc = cfg
        .localization
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("LESRF requires a localization config".into()))?;
    if loc.state_positions.len() != e.state_dim() || loc.obs_positions.len() != obs.obs_dim() {
        return Err(Error::DimensionMismatch("localization positions do not match dimensions".into()));
    }
    let inflated = apply_inflation(e, cfg.inflation)?;
    let (ha, h_mean) = observed_stats(&inflated, obs);
    let innovation = h_mean - y;
    let r_inv = obs.noise_inv()?;
    let beta = cfg.tempering_exponent;

    let groups = loc.position_groups();
    let rows: Vec<(Vec<usize>, DMatrix<f64>)> = groups
        .par_iter()
        .map(|(x_g, comps)| -> Result<(Vec<usize>, DMatrix<f64>)> {
            let c = localization_weights(loc, *x_g);
            let members_rows = {
                let mut rows = DMatrix::zeros(comps.len(), inflated.n_members());
                for (k, &comp) in comps.iter().enumerate() {
                    rows.row_mut(k).copy_from(&inflated.members().row(comp));
                }
                rows
            };
            if c.iter().all(|w| *w == 0.0) {
                // No observations in range: components keep the inflated forecast.
                return Ok((comps.clone(), members_rows));
            }
            let mut weighted = r_inv.clone();
            for (l, mut row) in weighted.row_iter_mut().enumerate() {
                row *= c[l];
            }
            let d = filter_coefficients(&ha, &weighted, &innovation, beta)?;
            Ok((comps.clone(), members_rows * d))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut analysis = DMatrix::zeros(e.state_dim(), e.n_members());
    for (comps, values) in rows {
        for (k, comp) in comps.into_iter().enumerate() {
            analysis.row_mut(comp).copy_from(&values.row(k));
        }
    }
    Ok(Ensemble::from_matrix_unchecked(analysis))
}
