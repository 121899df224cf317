//! Dynamical models for twin experiments: Lorenz 63, Lorenz 96 and the
//! dampened Langevin equation in a double-well potential, plus truth and
//! observation generation.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::observation::ObservationModel;
use crate::rng::RngStream;

/// Potential driving the Langevin dynamics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PotentialKind {
    /// phi(q) = (q - offset)^2 (q + offset)^2, wells at +-offset.
    DoubleWell { offset: f64 },
    /// phi(q) = 0.5 * stiffness * q^2; used for integrator checks.
    Harmonic { stiffness: f64 },
}

impl PotentialKind {
    pub fn gradient(&self, q: f64) -> f64 {
        match *self {
            // d/dq (q^2 - a^2)^2 = 4 q (q^2 - a^2)
            PotentialKind::DoubleWell { offset } => 4.0 * q * (q * q - offset * offset),
            PotentialKind::Harmonic { stiffness } => stiffness * q,
        }
    }

    pub fn value(&self, q: f64) -> f64 {
        match *self {
            PotentialKind::DoubleWell { offset } => {
                let s = q * q - offset * offset;
                s * s
            }
            PotentialKind::Harmonic { stiffness } => 0.5 * stiffness * q * q,
        }
    }
}

/// Sign of the deterministic force in the momentum equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DriftSign {
    /// dp = -grad(phi) dt - ...; wells attract. The default.
    #[default]
    AttractingWells,
    /// dp = +grad(phi) dt - ...; kept selectable for comparison runs.
    RepellingWells,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DynamicalModel {
    Lorenz63 { sigma: f64, rho: f64, beta: f64, dt: f64 },
    Lorenz96 { forcing: f64, n_grid: usize, dt: f64 },
    /// State is (q, p) stacked; dq = p/M dt, dp = -grad(phi) dt - friction p dt
    /// + noise M^(1/2) dW.
    Langevin {
        mass: f64,
        friction: f64,
        noise: f64,
        potential: PotentialKind,
        drift_sign: DriftSign,
        dt: f64,
    },
}

impl DynamicalModel {
    /// Lorenz 63 with the standard chaotic parameters.
    pub fn lorenz63_standard() -> Self {
        DynamicalModel::Lorenz63 { sigma: 10.0, rho: 28.0, beta: 8.0 / 3.0, dt: 0.01 }
    }

    pub fn lorenz96_standard(n_grid: usize) -> Self {
        DynamicalModel::Lorenz96 { forcing: 8.0, n_grid, dt: 0.01 }
    }

    /// Double-well Langevin benchmark: M = 1, friction 10, noise sqrt(5000),
    /// wells at +-5.
    pub fn langevin_double_well() -> Self {
        DynamicalModel::Langevin {
            mass: 1.0,
            friction: 10.0,
            noise: 5000f64.sqrt(),
            potential: PotentialKind::DoubleWell { offset: 5.0 },
            drift_sign: DriftSign::default(),
            dt: 0.01,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            DynamicalModel::Lorenz63 { .. } => 3,
            DynamicalModel::Lorenz96 { n_grid, .. } => *n_grid,
            DynamicalModel::Langevin { .. } => 2,
        }
    }

    pub fn internal_dt(&self) -> f64 {
        match self {
            DynamicalModel::Lorenz63 { dt, .. }
            | DynamicalModel::Lorenz96 { dt, .. }
            | DynamicalModel::Langevin { dt, .. } => *dt,
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self, DynamicalModel::Langevin { noise, .. } if *noise != 0.0)
    }

    /// Time derivative of the deterministic models.
    pub fn rhs(&self, state: &DVector<f64>) -> Result<DVector<f64>> {
        if state.len() != self.state_dim() {
            return Err(Error::DimensionMismatch(format!(
                "state has dimension {}, model expects {}",
                state.len(),
                self.state_dim()
            )));
        }
        match self {
            DynamicalModel::Lorenz63 { sigma, rho, beta, .. } => {
                let (x, y, z) = (state[0], state[1], state[2]);
                Ok(DVector::from_vec(vec![
                    sigma * (y - x),
                    x * (rho - z) - y,
                    x * y - beta * z,
                ]))
            }
            DynamicalModel::Lorenz96 { forcing, n_grid, .. } => {
                let n = *n_grid;
                let mut d = DVector::zeros(n);
                for i in 0..n {
                    let ip1 = (i + 1) % n;
                    let im1 = (i + n - 1) % n;
                    let im2 = (i + n - 2) % n;
                    d[i] = (state[ip1] - state[im2]) * state[im1] - state[i] + forcing;
                }
                Ok(d)
            }
            DynamicalModel::Langevin { .. } => Err(Error::InvalidConfig(
                "the Langevin model is stochastic; use baoab_step/propagate".into(),
            )),
        }
    }

    /// Classical fourth-order Runge-Kutta over `duration`, which must be an
    /// integer multiple of the internal step within 1e-9.
    pub fn integrate(&self, state: &DVector<f64>, duration: f64) -> Result<DVector<f64>> {
        if duration < 0.0 {
            return Err(Error::InvalidConfig("duration must be nonnegative".into()));
        }
        let dt = self.internal_dt();
        let steps = (duration / dt).round();
        if (duration - steps * dt).abs() > 1e-9 {
            return Err(Error::IncommensurateStep);
        }
        let mut z = state.clone();
        for _ in 0..steps as u64 {
            z = self.rk4_step(&z, dt)?;
        }
        Ok(z)
    }

    fn rk4_step(&self, z: &DVector<f64>, dt: f64) -> Result<DVector<f64>> {
        let k1 = self.rhs(z)?;
        let k2 = self.rhs(&(z + &k1 * (dt / 2.0)))?;
        let k3 = self.rhs(&(z + &k2 * (dt / 2.0)))?;
        let k4 = self.rhs(&(z + &k3 * dt))?;
        Ok(z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
    }

    /// One BAOAB substep of the Langevin dynamics: half kick, half drift,
    /// exact Ornstein-Uhlenbeck momentum update, half drift, half kick.
    pub fn baoab_step(
        &self,
        q: &DVector<f64>,
        p: &DVector<f64>,
        dt: f64,
        rng: &mut impl Rng,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let DynamicalModel::Langevin { mass, friction, noise, potential, drift_sign, .. } = self
        else {
            return Err(Error::InvalidConfig("baoab_step requires the Langevin model".into()));
        };
        let force_sign = match drift_sign {
            DriftSign::AttractingWells => -1.0,
            DriftSign::RepellingWells => 1.0,
        };
        let half = 0.5 * dt;
        let kick = |q: &DVector<f64>, p: &DVector<f64>| -> DVector<f64> {
            let mut out = p.clone();
            for i in 0..q.len() {
                out[i] += half * force_sign * potential.gradient(q[i]);
            }
            out
        };

        let mut p1 = kick(q, p);
        let mut q1 = q + &p1 * (half / mass);
        // Exact OU update: damping exp(-friction dt) and the stationary-variance
        // matched fluctuation noise^2 M (1 - exp(-2 friction dt)) / (2 friction).
        if *friction > 0.0 || *noise > 0.0 {
            let damp = (-friction * dt).exp();
            let fluct = if *noise == 0.0 {
                0.0
            } else if *friction == 0.0 {
                noise * mass.sqrt() * dt.sqrt()
            } else {
                noise * mass.sqrt() * ((1.0 - damp * damp) / (2.0 * friction)).sqrt()
            };
            for i in 0..p1.len() {
                let xi: f64 = rng.sample(StandardNormal);
                p1[i] = damp * p1[i] + fluct * xi;
            }
        }
        q1 += &p1 * (half / mass);
        let p2 = kick(&q1, &p1);
        Ok((q1, p2))
    }

    /// Advance a state over `duration`, drawing stochastic forcing from `rng`
    /// for the Langevin model and reducing to RK4 otherwise.
    pub fn propagate(&self, state: &DVector<f64>, duration: f64, rng: RngStream) -> Result<DVector<f64>> {
        match self {
            DynamicalModel::Langevin { .. } => {
                if state.len() != 2 {
                    return Err(Error::DimensionMismatch("Langevin state is (q, p)".into()));
                }
                let dt = self.internal_dt();
                let steps = (duration / dt).round();
                if (duration - steps * dt).abs() > 1e-9 {
                    return Err(Error::IncommensurateStep);
                }
                let mut q = DVector::from_element(1, state[0]);
                let mut p = DVector::from_element(1, state[1]);
                let mut gen = rng.rng();
                for _ in 0..steps as u64 {
                    (q, p) = self.baoab_step(&q, &p, dt, &mut gen)?;
                }
                Ok(DVector::from_vec(vec![q[0], p[0]]))
            }
            _ => self.integrate(state, duration),
        }
    }
}

/// Truth trajectory and the noisy observations generated from it.
#[derive(Debug, Clone)]
pub struct TwinRun {
    /// State at each assimilation instant (cycle k holds the truth after the
    /// k-th forecast interval).
    pub truth: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
    pub dt_obs: f64,
}

/// Anything that can advance a state vector over a forecast interval.
pub trait Propagator: Sync {
    fn state_dim(&self) -> usize;
    fn propagate_state(&self, state: &DVector<f64>, duration: f64, rng: RngStream) -> Result<DVector<f64>>;
}

impl Propagator for DynamicalModel {
    fn state_dim(&self) -> usize {
        self.state_dim()
    }

    fn propagate_state(&self, state: &DVector<f64>, duration: f64, rng: RngStream) -> Result<DVector<f64>> {
        self.propagate(state, duration, rng)
    }
}

/// Propagate the truth cycle by cycle and attach observations
/// `y_k = H(truth_k) + chol(R) xi`.
pub fn generate_twin(
    model: &dyn Propagator,
    obs: &ObservationModel,
    initial_truth: &DVector<f64>,
    cycles: usize,
    dt_obs: f64,
    rng: RngStream,
) -> Result<TwinRun> {
    if initial_truth.len() != model.state_dim() {
        return Err(Error::DimensionMismatch("initial truth has wrong dimension".into()));
    }
    let truth_stream = rng.substream(0);
    let noise_stream = rng.substream(1);
    let mut truth = Vec::with_capacity(cycles);
    let mut observations = Vec::with_capacity(cycles);
    let mut state = initial_truth.clone();
    for k in 0..cycles {
        state = model.propagate_state(&state, dt_obs, truth_stream.substream(k as u64))?;
        observations.push(obs.sample_observation(&state, noise_stream.substream(k as u64)));
        truth.push(state.clone());
    }
    Ok(TwinRun { truth, observations, dt_obs })
}
