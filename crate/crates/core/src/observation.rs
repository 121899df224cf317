//! Observation operators and their noise model.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// How states map into observation space.
#[derive(Debug, Clone, PartialEq)]
pub enum ObservationMap {
    /// Pick out the listed state components.
    Selection(Vec<usize>),
    /// Pick out components and add a fixed offset (e.g. surface elevation =
    /// water depth + orography).
    Affine { indices: Vec<usize>, offset: DVector<f64> },
}

impl ObservationMap {
    pub fn indices(&self) -> &[usize] {
        match self {
            ObservationMap::Selection(idx) => idx,
            ObservationMap::Affine { indices, .. } => indices,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.indices().len()
    }
}

/// Observation operator H together with the noise covariance R.
#[derive(Debug, Clone)]
pub struct ObservationModel {
    map: ObservationMap,
    state_dim: usize,
    /// Exactly zero in the noiseless twin-test mode; SPD otherwise.
    noise_cov: DMatrix<f64>,
    noise_chol: Option<Cholesky<f64, Dyn>>,
    noise_inv: Option<DMatrix<f64>>,
}

impl ObservationModel {
    pub fn new(map: ObservationMap, noise_cov: DMatrix<f64>, state_dim: usize) -> Result<Self> {
        Self::validate_map(&map, state_dim)?;
        let n_y = map.obs_dim();
        if noise_cov.nrows() != n_y || noise_cov.ncols() != n_y {
            return Err(Error::DimensionMismatch(format!(
                "R is {}x{} but the map observes {n_y} components",
                noise_cov.nrows(),
                noise_cov.ncols()
            )));
        }
        if (&noise_cov - noise_cov.transpose()).amax() > 1e-12 * (1.0 + noise_cov.amax()) {
            return Err(Error::InvalidConfig("R must be symmetric".into()));
        }
        let chol = Cholesky::new(noise_cov.clone())
            .ok_or_else(|| Error::InvalidConfig("R must be positive definite".into()))?;
        let noise_inv = chol.inverse();
        Ok(Self { map, state_dim, noise_cov, noise_chol: Some(chol), noise_inv: Some(noise_inv) })
    }

    /// Exact-zero observation noise; only generate_twin accepts this mode.
    pub fn noiseless(map: ObservationMap, state_dim: usize) -> Result<Self> {
        Self::validate_map(&map, state_dim)?;
        let n_y = map.obs_dim();
        Ok(Self {
            map,
            state_dim,
            noise_cov: DMatrix::zeros(n_y, n_y),
            noise_chol: None,
            noise_inv: None,
        })
    }

    fn validate_map(map: &ObservationMap, state_dim: usize) -> Result<()> {
        let idx = map.indices();
        if idx.is_empty() {
            return Err(Error::InvalidConfig("observation map selects no components".into()));
        }
        let mut seen = vec![false; state_dim];
        for &i in idx {
            if i >= state_dim {
                return Err(Error::InvalidConfig(format!(
                    "observed index {i} out of range for state dimension {state_dim}"
                )));
            }
            if seen[i] {
                return Err(Error::InvalidConfig(format!("observed index {i} repeated")));
            }
            seen[i] = true;
        }
        if let ObservationMap::Affine { indices, offset } = map {
            if offset.len() != indices.len() {
                return Err(Error::DimensionMismatch("affine offset length != index count".into()));
            }
        }
        Ok(())
    }

    pub fn map(&self) -> &ObservationMap {
        &self.map
    }

    pub fn obs_dim(&self) -> usize {
        self.map.obs_dim()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    pub fn is_noiseless(&self) -> bool {
        self.noise_chol.is_none()
    }

    /// R^-1, cached. The noiseless test mode has no inverse.
    pub fn noise_inv(&self) -> Result<&DMatrix<f64>> {
        self.noise_inv
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("filters require positive definite R".into()))
    }

    /// Apply H without noise.
    pub fn observe(&self, state: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(state.len(), self.state_dim);
        match &self.map {
            ObservationMap::Selection(idx) => DVector::from_iterator(idx.len(), idx.iter().map(|&i| state[i])),
            ObservationMap::Affine { indices, offset } => {
                DVector::from_iterator(indices.len(), indices.iter().enumerate().map(|(k, &i)| state[i] + offset[k]))
            }
        }
    }

    /// H applied to every member; returns an obs_dim x N_ens matrix.
    pub fn observe_ensemble(&self, ensemble: &Ensemble) -> DMatrix<f64> {
        let idx = self.map.indices();
        let mut out = DMatrix::zeros(idx.len(), ensemble.n_members());
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).copy_from(&ensemble.members().row(i));
        }
        if let ObservationMap::Affine { offset, .. } = &self.map {
            for mut col in out.column_iter_mut() {
                col += offset;
            }
        }
        out
    }

    /// Draw one observation: H(state) plus Cholesky-coloured Gaussian noise.
    pub fn sample_observation(&self, state: &DVector<f64>, rng: RngStream) -> DVector<f64> {
        let clean = self.observe(state);
        match &self.noise_chol {
            None => clean,
            Some(chol) => clean + chol.l() * rng.standard_normal_vector(self.obs_dim()),
        }
    }
}
