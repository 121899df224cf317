//! Feedback particle filter with a diffusion-map approximation of the gain.
//!
//! The gain solves a weighted Poisson equation; its empirical surrogate is a
//! kernel Markov matrix over the members with likelihood-tilted columns. The
//! kernel bandwidth is scale-free: the configured `epsilon` multiplies the
//! maximum squared inter-member distance.

use nalgebra::{DMatrix, DVector};

use crate::ensemble::{ensemble_statistics, Ensemble, RejuvenationScaling};
use crate::error::{Error, Result};
use crate::metrics::WeightVector;
use crate::observation::ObservationModel;
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainSolver {
    /// Dense LU solve of the regularised system; the default.
    Direct,
    /// Fixed-point iteration `phi <- T phi + rhs` with the given sweep count.
    FixedPoint { iterations: usize },
}

#[derive(Debug, Clone)]
pub struct FpfConfig {
    /// Bandwidth seed epsilon; the effective bandwidth is
    /// `epsilon * max_ij |z_i - z_j|^2`.
    pub bandwidth: f64,
    /// Likelihood fraction alpha in (0, 1] entering the Markov matrix.
    pub tempering_exponent: f64,
    pub rejuvenation: f64,
    pub rejuvenation_scaling: RejuvenationScaling,
    pub solver: GainSolver,
}

impl Default for FpfConfig {
    fn default() -> Self {
        Self {
            bandwidth: 0.01,
            tempering_exponent: 1.0,
            rejuvenation: 0.2,
            rejuvenation_scaling: RejuvenationScaling::default(),
            solver: GainSolver::Direct,
        }
    }
}

impl FpfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0) {
            return Err(Error::InvalidConfig(format!("bandwidth must be positive, got {}", self.bandwidth)));
        }
        if !(self.tempering_exponent > 0.0 && self.tempering_exponent <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "tempering exponent must lie in (0, 1], got {}",
                self.tempering_exponent
            )));
        }
        if !(self.rejuvenation >= 0.0) {
            return Err(Error::InvalidConfig(format!("rejuvenation must be >= 0, got {}", self.rejuvenation)));
        }
        Ok(())
    }

    pub fn with_exponent(&self, alpha: f64) -> Self {
        Self { tempering_exponent: alpha, ..self.clone() }
    }
}

/// Per-member gain matrices (state dim x obs dim).
#[derive(Debug, Clone)]
pub struct GainField {
    pub gains: Vec<DMatrix<f64>>,
}

/// Largest squared distance between members.
pub fn max_squared_distance(e: &Ensemble) -> f64 {
    let n = e.n_members();
    let mut max = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            max = max.max((e.member(i) - e.member(j)).norm_squared());
        }
    }
    max
}

/// `epsilon * max_ij |z_i - z_j|^2`.
pub fn effective_bandwidth(e: &Ensemble, epsilon: f64) -> f64 {
    epsilon * max_squared_distance(e)
}

/// Gaussian kernel `g_ij = exp(-|z_i - z_j|^2 / 4 eps)` and its
/// symmetrically normalised companion `k_ij = g_ij / sqrt(sum_l g_il) /
/// sqrt(sum_l g_lj)`.
pub fn kernel_matrices(e: &Ensemble, eps_eff: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = e.n_members();
    let mut g = DMatrix::from_element(n, n, 1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (-(e.member(i) - e.member(j)).norm_squared() / (4.0 * eps_eff)).exp();
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    let row_sums: Vec<f64> = (0..n).map(|i| g.row(i).sum()).collect();
    let mut k = g.clone();
    for i in 0..n {
        for j in 0..n {
            k[(i, j)] /= (row_sums[i] * row_sums[j]).sqrt();
        }
    }
    (g, k)
}

fn tempered_likelihood(
    e: &Ensemble,
    y: &DVector<f64>,
    obs: &ObservationModel,
    alpha: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let observed = obs.observe_ensemble(e);
    let r_inv = obs.noise_inv()?;
    let n = e.n_members();
    let log_l = DVector::from_fn(n, |j, _| {
        let innov = observed.column(j) - y;
        -0.5 * alpha * (r_inv * &innov).dot(&innov)
    });
    // Max shift in log space; the common factor cancels in T and pi.
    let w = WeightVector::from_log_weights(&log_l)?;
    let _ = w; // degenerate-likelihood detection only
    let max = log_l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((observed, log_l.map(|v| (v - max).exp())))
}

/// Row-stochastic Markov matrix with likelihood-tilted columns.
pub fn markov_matrix(
    e: &Ensemble,
    y: &DVector<f64>,
    obs: &ObservationModel,
    eps_eff: f64,
    alpha: f64,
) -> Result<DMatrix<f64>> {
    let (_, k) = kernel_matrices(e, eps_eff);
    let (_, l) = tempered_likelihood(e, y, obs, alpha)?;
    let n = e.n_members();
    let mut t = k;
    for j in 0..n {
        let lj = l[j];
        for i in 0..n {
            t[(i, j)] *= lj;
        }
    }
    for mut row in t.row_iter_mut() {
        let sum = row.sum();
        row /= sum;
    }
    Ok(t)
}

struct GainPieces {
    t: DMatrix<f64>,
    pi: DVector<f64>,
    rhs: DMatrix<f64>,
    h_vals: DMatrix<f64>,
    eps_eff: f64,
}

fn assemble_pieces(
    e: &Ensemble,
    y: &DVector<f64>,
    obs: &ObservationModel,
    cfg: &FpfConfig,
) -> Result<GainPieces> {
    let eps_eff = effective_bandwidth(e, cfg.bandwidth);
    if eps_eff <= 0.0 {
        return Err(Error::GainSolveFailed("collapsed ensemble has zero kernel bandwidth".into()));
    }
    let (_, k) = kernel_matrices(e, eps_eff);
    let (h_vals, l) = tempered_likelihood(e, y, obs, cfg.tempering_exponent)?;
    let n = e.n_members();
    let mut kw = k;
    for j in 0..n {
        for i in 0..n {
            kw[(i, j)] *= l[j];
        }
    }
    let d = DVector::from_fn(n, |i, _| kw.row(i).sum());
    let mut t = kw;
    for (i, mut row) in t.row_iter_mut().enumerate() {
        row /= d[i];
    }
    let pi = &d / d.sum();

    // h_hat = sum_i pi_i H(z_i); right-hand side rows eps R^-1 (H_i - h_hat).
    let h_hat = &h_vals * &pi;
    let r_inv = obs.noise_inv()?;
    let n_y = obs.obs_dim();
    let mut rhs = DMatrix::zeros(n, n_y);
    for i in 0..n {
        let centered = h_vals.column(i) - &h_hat;
        rhs.row_mut(i).copy_from(&(r_inv * centered * eps_eff).transpose());
    }
    Ok(GainPieces { t, pi, rhs, h_vals, eps_eff })
}

fn pin_mean(phi: &mut DMatrix<f64>, pi: &DVector<f64>) {
    for c in 0..phi.ncols() {
        let mean = phi.column(c).dot(pi);
        for r in 0..phi.nrows() {
            phi[(r, c)] -= mean;
        }
    }
}

/// Solve the regularised Poisson surrogate and assemble the per-member gain.
pub fn solve_gain(e: &Ensemble, y: &DVector<f64>, obs: &ObservationModel, cfg: &FpfConfig) -> Result<GainField> {
    cfg.validate()?;
    let pieces = assemble_pieces(e, y, obs, cfg)?;
    let GainPieces { t, pi, rhs, h_vals, eps_eff } = pieces;
    let n = e.n_members();

    // (id - T + averaging) phi = rhs; the rank-one averaging term pins the
    // constant direction that id - T annihilates.
    let mut phi = match cfg.solver {
        GainSolver::Direct => {
            let mut a = DMatrix::identity(n, n) - &t;
            a.add_scalar_mut(1.0 / n as f64);
            a.lu()
                .solve(&rhs)
                .ok_or_else(|| Error::GainSolveFailed("regularised system is singular".into()))?
        }
        GainSolver::FixedPoint { iterations } => {
            let mut phi = DMatrix::zeros(n, rhs.ncols());
            for _ in 0..iterations {
                phi = &t * &phi + &rhs;
                pin_mean(&mut phi, &pi);
            }
            phi
        }
    };
    pin_mean(&mut phi, &pi);

    // r_i = phi_i + eps H(z_i); s_ij = T_ij (r_j - (T r)_i) / (2 eps);
    // K_i = sum_j s_ij z_j.
    let r = &phi + h_vals.transpose() * eps_eff;
    let tr = &t * &r;
    let n_y = r.ncols();
    let n_z = e.state_dim();
    let members = e.members();
    let mut gains = Vec::with_capacity(n);
    for i in 0..n {
        let mut k_i = DMatrix::zeros(n_z, n_y);
        let mut weighted_state = DVector::zeros(n_z);
        for j in 0..n {
            let tij = t[(i, j)];
            let zj = members.column(j);
            weighted_state.axpy(tij, &zj, 1.0);
            for c in 0..n_y {
                k_i.column_mut(c).axpy(tij * r[(j, c)], &zj, 1.0);
            }
        }
        for c in 0..n_y {
            k_i.column_mut(c).axpy(-tr[(i, c)], &weighted_state, 1.0);
        }
        gains.push(k_i / (2.0 * eps_eff));
    }
    Ok(GainField { gains })
}

/// One feedback-particle analysis: gain times the averaged innovation, then
/// rejuvenation. A fully collapsed ensemble short-circuits to the
/// zero-gain branch.
pub fn fpf_update(
    e: &Ensemble,
    y: &DVector<f64>,
    obs: &ObservationModel,
    cfg: &FpfConfig,
    rng: RngStream,
) -> Result<Ensemble> {
    cfg.validate()?;
    let stats = ensemble_statistics(e);
    let collapsed = max_squared_distance(e) == 0.0;
    let mut analysis = e.members().clone();
    if !collapsed {
        let gain = solve_gain(e, y, obs, cfg)?;
        let h_mean = obs.observe(&stats.mean);
        let observed = obs.observe_ensemble(e);
        for i in 0..e.n_members() {
            let innovation = (observed.column(i) + &h_mean) * 0.5 - y;
            let correction = &gain.gains[i] * innovation;
            let mut col = analysis.column_mut(i);
            col -= &correction;
        }
    }
    if cfg.rejuvenation > 0.0 {
        let n = e.n_members();
        let xi = rng.substream(1).standard_normal_matrix(n, n);
        analysis += &stats.anomalies * xi * cfg.rejuvenation_scaling.amplitude(cfg.rejuvenation, n);
    }
    Ok(Ensemble::from_matrix_unchecked(analysis))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observation::ObservationMap;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};
    use rand_distr::Distribution;

    fn scalar_obs(r: f64) -> ObservationModel {
        ObservationModel::new(ObservationMap::Selection(vec![0]), DMatrix::from_element(1, 1, r), 1).unwrap()
    }

    /// Observation that is constant across members: observe a component that
    /// is identical in every member.
    fn constant_h_ensemble() -> (Ensemble, ObservationModel) {
        // First component constant, second varies.
        let e = Ensemble::new(dmatrix![2.0, 2.0, 2.0, 2.0; -1.0, 0.0, 1.0, 3.0]).unwrap();
        let obs = ObservationModel::new(ObservationMap::Selection(vec![0]), DMatrix::identity(1, 1), 2).unwrap();
        (e, obs)
    }

    #[test]
    fn kernel_of_identical_members_is_all_ones() {
        let e = Ensemble::new(DMatrix::from_element(2, 4, 1.0)).unwrap();
        let (g, _) = kernel_matrices(&e, 0.5);
        assert!(g.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn kernel_two_member_formula() {
        let e = Ensemble::new(dmatrix![0.0, 3.0]).unwrap();
        let eps = 0.7;
        let (g, _) = kernel_matrices(&e, eps);
        assert_abs_diff_eq!(g[(0, 1)], (-9.0 / (4.0 * eps)).exp(), epsilon = 1e-15);
        assert_eq!(g[(0, 0)], 1.0);
    }

    #[test]
    fn normalised_kernel_is_symmetric() {
        let e = Ensemble::new(RngStream::new(1).standard_normal_matrix(3, 8)).unwrap();
        let (_, k) = kernel_matrices(&e, effective_bandwidth(&e, 0.01));
        assert!((&k - k.transpose()).amax() < 1e-12);
        assert!(k.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn markov_rows_sum_to_one() {
        let e = Ensemble::new(RngStream::new(2).standard_normal_matrix(2, 9)).unwrap();
        let obs = ObservationModel::new(
            ObservationMap::Selection(vec![0, 1]),
            DMatrix::identity(2, 2) * 0.5,
            2,
        )
        .unwrap();
        let t = markov_matrix(&e, &dvector![0.2, -0.4], &obs, effective_bandwidth(&e, 0.01), 1.0).unwrap();
        for i in 0..9 {
            assert_abs_diff_eq!(t.row(i).sum(), 1.0, epsilon = 1e-12);
        }
        assert!(t.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn constant_likelihood_cancels() {
        let (e, obs) = constant_h_ensemble();
        let eps = effective_bandwidth(&e, 0.01);
        let t = markov_matrix(&e, &dvector![1.0], &obs, eps, 1.0).unwrap();
        let (_, k) = kernel_matrices(&e, eps);
        let mut k_norm = k.clone();
        for mut row in k_norm.row_iter_mut() {
            let s = row.sum();
            row /= s;
        }
        assert_abs_diff_eq!(t, k_norm, epsilon = 1e-12);

        // alpha -> 0 gives the same cancellation on a non-constant H.
        let e2 = Ensemble::new(dmatrix![0.0, 1.0, 2.5, 4.0]).unwrap();
        let eps2 = effective_bandwidth(&e2, 0.01);
        let t0 = markov_matrix(&e2, &dvector![1.0], &scalar_obs(1.0), eps2, 1e-12).unwrap();
        let (_, k2) = kernel_matrices(&e2, eps2);
        let mut k2_norm = k2;
        for mut row in k2_norm.row_iter_mut() {
            let s = row.sum();
            row /= s;
        }
        assert_abs_diff_eq!(t0, k2_norm, epsilon = 1e-9);
    }

    #[test]
    fn constant_observable_gives_zero_gain() {
        let (e, obs) = constant_h_ensemble();
        let cfg = FpfConfig::default();
        let gain = solve_gain(&e, &dvector![1.5], &obs, &cfg).unwrap();
        for k_i in &gain.gains {
            assert!(k_i.amax() < 1e-12);
        }
        // And the update reduces to the forecast when rejuvenation is off.
        let cfg0 = FpfConfig { rejuvenation: 0.0, ..FpfConfig::default() };
        let analysis = fpf_update(&e, &dvector![1.5], &obs, &cfg0, RngStream::new(3)).unwrap();
        assert_abs_diff_eq!(analysis.members(), e.members(), epsilon = 1e-12);
    }

    #[test]
    fn rhs_is_centred_under_pi() {
        let e = Ensemble::new(RngStream::new(4).standard_normal_matrix(1, 6)).unwrap();
        let obs = scalar_obs(1.0);
        let cfg = FpfConfig::default();
        let pieces = assemble_pieces(&e, &dvector![0.3], &obs, &cfg).unwrap();
        let centered = pieces.rhs.transpose() * &pieces.pi;
        assert!(centered.amax() < 1e-12);
    }

    #[test]
    fn gain_solve_residual_is_small() {
        let e = Ensemble::new(RngStream::new(5).standard_normal_matrix(2, 10)).unwrap();
        let obs = ObservationModel::new(
            ObservationMap::Selection(vec![0]),
            DMatrix::identity(1, 1) * 2.0,
            2,
        )
        .unwrap();
        let cfg = FpfConfig::default();
        let y = dvector![0.7];
        let pieces = assemble_pieces(&e, &y, &obs, &cfg).unwrap();
        let n = e.n_members();
        let mut a = DMatrix::identity(n, n) - &pieces.t;
        a.add_scalar_mut(1.0 / n as f64);
        let phi = a.clone().lu().solve(&pieces.rhs).unwrap();
        let residual = (&a * &phi - &pieces.rhs).amax();
        assert!(residual < 1e-10 * (1.0 + pieces.rhs.amax()), "residual {residual}");
    }

    #[test]
    fn direct_solve_matches_long_fixed_point_iteration() {
        let e = Ensemble::new(dmatrix![-1.0, 0.2, 1.4]).unwrap();
        let obs = scalar_obs(1.0);
        let y = dvector![0.5];
        let direct = solve_gain(&e, &y, &obs, &FpfConfig::default()).unwrap();
        let iterated = solve_gain(
            &e,
            &y,
            &obs,
            &FpfConfig { solver: GainSolver::FixedPoint { iterations: 10_000 }, ..FpfConfig::default() },
        )
        .unwrap();
        for (a, b) in direct.gains.iter().zip(&iterated.gains) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn collapsed_ensemble_short_circuits_to_identity() {
        let e = Ensemble::new(DMatrix::from_element(2, 5, 3.0)).unwrap();
        let obs = ObservationModel::new(ObservationMap::Selection(vec![0]), DMatrix::identity(1, 1), 2).unwrap();
        let cfg = FpfConfig { rejuvenation: 0.0, ..FpfConfig::default() };
        let analysis = fpf_update(&e, &dvector![0.0], &obs, &cfg, RngStream::new(6)).unwrap();
        assert_eq!(analysis.members(), e.members());
        // solve_gain itself reports the degenerate kernel.
        assert!(matches!(solve_gain(&e, &dvector![0.0], &obs, &cfg), Err(Error::GainSolveFailed(_))));
    }

    #[test]
    fn scalar_linear_gaussian_tracks_kalman_mean() {
        // Prior N(0,1), H = id, R = 1, y = 1: posterior mean 0.5. The
        // empirical FPF is approximately consistent; 0.1 absolute tolerance.
        let n = 200;
        let mut rng = RngStream::new(7).rng();
        let normal = rand_distr::StandardNormal;
        let members = DMatrix::from_fn(1, n, |_, _| normal.sample(&mut rng));
        let e = Ensemble::new(members).unwrap();
        let cfg = FpfConfig { rejuvenation: 0.0, ..FpfConfig::default() };
        let analysis = fpf_update(&e, &dvector![1.0], &scalar_obs(1.0), &cfg, RngStream::new(8)).unwrap();
        let mean = analysis.mean()[0];
        assert!((mean - 0.5).abs() < 0.1, "analysis mean {mean}");
    }

    #[test]
    fn update_is_deterministic_given_stream() {
        let e = Ensemble::new(RngStream::new(9).standard_normal_matrix(2, 7)).unwrap();
        let obs = ObservationModel::new(
            ObservationMap::Selection(vec![1]),
            DMatrix::identity(1, 1) * 0.5,
            2,
        )
        .unwrap();
        let cfg = FpfConfig::default();
        let a = fpf_update(&e, &dvector![0.1], &obs, &cfg, RngStream::new(10)).unwrap();
        let b = fpf_update(&e, &dvector![0.1], &obs, &cfg, RngStream::new(10)).unwrap();
        assert_eq!(a.members(), b.members());
    }
}
