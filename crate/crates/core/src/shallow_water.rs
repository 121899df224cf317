//! One-dimensional shallow-water equations with orography.
//!
//! Second-order MUSCL finite volumes with hydrostatic reconstruction at the
//! interfaces and a central-upwind numerical flux. The scheme is well
//! balanced (the lake-at-rest state is preserved to machine precision over
//! the discontinuous orography of the dam-break scenario), conserves mass
//! exactly up to the boundary-flux ledger, and keeps `h >= 0` under the CFL
//! bound. Wall boundary at `x = L`, homogeneous Neumann at `x = 0`.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::models::Propagator;
use crate::rng::RngStream;

/// Cells with `h` below this are treated as dry: velocity zero, excluded from
/// the CFL speed scan.
pub const DRY_THRESHOLD: f64 = 1e-8;

/// Hard stability bound of the scheme; `cfl_dt` stays below it by default.
const CFL_LIMIT: f64 = 0.5;

/// Cell-averaged water state over a fixed grid and orography.
#[derive(Debug, Clone, PartialEq)]
pub struct SWState {
    /// Water height over ground per cell (m); total surface is `h + z`.
    pub h: DVector<f64>,
    /// Cell momentum h*u (m^2/s).
    pub hu: DVector<f64>,
    /// Orography per cell (m).
    pub orography: DVector<f64>,
    /// N_cells + 1 ascending interface positions (m).
    pub cell_edges: DVector<f64>,
    /// Accumulated mass admitted through the x = 0 boundary; total mass minus
    /// this ledger is invariant under `sw_step`.
    pub inflow_ledger: f64,
}

impl SWState {
    pub fn new(
        h: DVector<f64>,
        hu: DVector<f64>,
        orography: DVector<f64>,
        cell_edges: DVector<f64>,
    ) -> Result<Self> {
        let n = h.len();
        if hu.len() != n || orography.len() != n || cell_edges.len() != n + 1 {
            return Err(Error::DimensionMismatch("inconsistent shallow-water field lengths".into()));
        }
        if h.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidConfig("water height must be nonnegative".into()));
        }
        for i in 0..n {
            if cell_edges[i + 1] <= cell_edges[i] {
                return Err(Error::InvalidConfig("cell edges must be strictly increasing".into()));
            }
        }
        Ok(Self { h, hu, orography, cell_edges, inflow_ledger: 0.0 })
    }

    pub fn n_cells(&self) -> usize {
        self.h.len()
    }

    pub fn cell_width(&self, i: usize) -> f64 {
        self.cell_edges[i + 1] - self.cell_edges[i]
    }

    pub fn cell_center(&self, i: usize) -> f64 {
        0.5 * (self.cell_edges[i] + self.cell_edges[i + 1])
    }

    pub fn total_mass(&self) -> f64 {
        (0..self.n_cells()).map(|i| self.h[i] * self.cell_width(i)).sum()
    }

    /// Surface elevation h + z per cell.
    pub fn surface(&self) -> DVector<f64> {
        &self.h + &self.orography
    }
}

/// Geometry of the dam-break scenario: flat floor up to `x_r`, linear ridge
/// peaking at `x_d`, descent to the basin floor at `x_b`, basin to `length`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SWScenario {
    pub x_w: f64,
    pub x_r: f64,
    pub x_d: f64,
    pub x_b: f64,
    pub length: f64,
    pub h0: f64,
    pub hw: f64,
    pub z_basin: f64,
    pub z_crest: f64,
    pub gravity: f64,
    pub n_uniform: usize,
}

impl SWScenario {
    /// Reference dam-break geometry.
    pub fn reference() -> Self {
        Self {
            x_w: 3.0,
            x_r: 10.0,
            x_d: 20.0,
            x_b: 24.0,
            length: 28.0,
            h0: 1.5,
            hw: 1.8,
            z_basin: 0.5,
            z_crest: 2.2,
            gravity: 9.81,
            n_uniform: 49,
        }
    }

    fn validate(&self, x_w: f64) -> Result<()> {
        if !(0.0 < x_w && x_w < self.x_r && self.x_r < self.x_d && self.x_d < self.x_b && self.x_b < self.length)
        {
            return Err(Error::InvalidConfig(format!(
                "scenario geometry must satisfy 0 < x_w < x_r < x_d < x_b < L (x_w = {x_w})"
            )));
        }
        if self.hw < self.h0 {
            return Err(Error::InvalidConfig("raised block height H_w must be >= H_0".into()));
        }
        if self.n_uniform < 2 {
            return Err(Error::InvalidConfig("need at least two uniform cells".into()));
        }
        Ok(())
    }

    /// Piecewise-linear orography.
    pub fn orography_at(&self, x: f64) -> f64 {
        if x <= self.x_r {
            0.0
        } else if x <= self.x_d {
            self.z_crest * (x - self.x_r) / (self.x_d - self.x_r)
        } else if x <= self.x_b {
            self.z_crest + (self.z_basin - self.z_crest) * (x - self.x_d) / (self.x_b - self.x_d)
        } else {
            self.z_basin
        }
    }

    fn surface_at(&self, x: f64, x_w: f64) -> f64 {
        if x >= x_w && x <= self.x_r {
            self.hw
        } else {
            self.h0
        }
    }
}

/// Build the initial condition: total height `H_w` on the raised block
/// `[x_w, x_r]` moving at `sqrt(g (H_w - H_0))`, `H_0` elsewhere, depths cut
/// off at the orography. Fields are exact cell averages; the grid is
/// `n_uniform` equal cells on `[0, x_b)` plus the single basin cell
/// `[x_b, L]`.
pub fn build_scenario(scenario: &SWScenario, x_w: f64) -> Result<SWState> {
    scenario.validate(x_w)?;
    let n = scenario.n_uniform + 1;
    let dx = scenario.x_b / scenario.n_uniform as f64;
    let mut edges = DVector::zeros(n + 1);
    for i in 0..=scenario.n_uniform {
        edges[i] = i as f64 * dx;
    }
    edges[n] = scenario.length;

    // Breakpoints of the piecewise-linear integrand: geometry kinks, block
    // edges and the points where the ridge pierces the undisturbed surface.
    let mut breaks = vec![x_w, scenario.x_r, scenario.x_d, scenario.x_b];
    for (xa, za, xb, zb) in [
        (scenario.x_r, 0.0, scenario.x_d, scenario.z_crest),
        (scenario.x_d, scenario.z_crest, scenario.x_b, scenario.z_basin),
    ] {
        let (fa, fb) = (za - scenario.h0, zb - scenario.h0);
        if (fa < 0.0) != (fb < 0.0) {
            breaks.push(xa + (xb - xa) * fa / (fa - fb));
        }
    }
    breaks.sort_by(f64::total_cmp);

    let velocity = (scenario.gravity * (scenario.hw - scenario.h0)).sqrt();
    let mut h = DVector::zeros(n);
    let mut hu = DVector::zeros(n);
    let mut z = DVector::zeros(n);
    for i in 0..n {
        let (lo, hi) = (edges[i], edges[i + 1]);
        let mut pts = vec![lo];
        pts.extend(breaks.iter().copied().filter(|&b| b > lo && b < hi));
        pts.push(hi);
        let mut mass = 0.0;
        let mut rest_mass = 0.0;
        let mut momentum = 0.0;
        let mut bottom = 0.0;
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let surf = scenario.surface_at(0.5 * (a + b), x_w);
            let (za, zb) = (scenario.orography_at(a), scenario.orography_at(b));
            let seg = 0.5 * ((surf - za).max(0.0) + (surf - zb).max(0.0)) * (b - a);
            mass += seg;
            rest_mass += 0.5 * ((scenario.h0 - za).max(0.0) + (scenario.h0 - zb).max(0.0)) * (b - a);
            bottom += 0.5 * (za + zb) * (b - a);
            let mid = 0.5 * (a + b);
            if mid >= x_w && mid <= scenario.x_r {
                momentum += seg * velocity;
            }
        }
        let width = hi - lo;
        h[i] = mass / width;
        hu[i] = momentum / width;
        // Effective cell bottom: keeps the exact cell-averaged mass AND the
        // discrete rest condition h + z = H_0 in cells that are wet at rest
        // (partially flooded slope cells would otherwise read as perturbed).
        let rest_depth = rest_mass / width;
        z[i] = if rest_depth > 0.0 { scenario.h0 - rest_depth } else { bottom / width };
    }
    SWState::new(h, hu, z, edges)
}

/// Largest stable time step: `cfl * min(dx) / max(|u| + sqrt(g h))` over wet
/// cells.
pub fn cfl_dt(state: &SWState, g: f64, cfl: f64) -> Result<f64> {
    let mut max_speed = 0.0f64;
    let mut any_wet = false;
    for i in 0..state.n_cells() {
        if state.h[i] > DRY_THRESHOLD {
            any_wet = true;
            let u = state.hu[i] / state.h[i];
            max_speed = max_speed.max(u.abs() + (g * state.h[i]).sqrt());
        }
    }
    if !any_wet || max_speed == 0.0 {
        return Err(Error::NoWetCells);
    }
    let min_dx = (0..state.n_cells()).map(|i| state.cell_width(i)).fold(f64::INFINITY, f64::min);
    Ok(cfl * min_dx / max_speed)
}

/// Cut negative depths at zero and drop the momentum of clamped cells.
pub fn clamp_nonnegative(state: &SWState) -> SWState {
    let mut out = state.clone();
    for i in 0..out.n_cells() {
        if out.h[i] < 0.0 {
            out.h[i] = 0.0;
            out.hu[i] = 0.0;
        }
    }
    out
}

fn minmod(a: f64, b: f64) -> f64 {
    if a > 0.0 && b > 0.0 {
        a.min(b)
    } else if a < 0.0 && b < 0.0 {
        a.max(b)
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Default)]
struct Face {
    h: f64,
    surface: f64,
    u: f64,
}

impl Face {
    fn bottom(&self) -> f64 {
        self.surface - self.h
    }
}

/// Central-upwind flux on the hydrostatically reconstructed interface states.
/// Identical sides short-circuit to the physical flux so that balanced states
/// produce bitwise-equal fluxes.
fn interface_flux(g: f64, left: Face, right: Face) -> (f64, f64, f64, f64) {
    let z_face = left.bottom().max(right.bottom());
    let h_minus = (left.surface - z_face).max(0.0);
    let h_plus = (right.surface - z_face).max(0.0);
    let (u_minus, u_plus) = (left.u, right.u);

    let phys = |h: f64, u: f64| (h * u, h * u * u + 0.5 * g * h * h);
    if h_minus == h_plus && u_minus == u_plus {
        let (fh, fm) = phys(h_minus, u_minus);
        return (fh, fm, h_minus, h_plus);
    }
    let c_minus = (g * h_minus).sqrt();
    let c_plus = (g * h_plus).sqrt();
    let a_plus = (u_minus + c_minus).max(u_plus + c_plus).max(0.0);
    let a_minus = (u_minus - c_minus).min(u_plus - c_plus).min(0.0);
    let span = a_plus - a_minus;
    if span < 1e-14 {
        return (0.0, 0.0, h_minus, h_plus);
    }
    let (fh_l, fm_l) = phys(h_minus, u_minus);
    let (fh_r, fm_r) = phys(h_plus, u_plus);
    let coupling = a_plus * a_minus / span;
    let fh = (a_plus * fh_l - a_minus * fh_r) / span + coupling * (h_plus - h_minus);
    let fm = (a_plus * fm_l - a_minus * fm_r) / span + coupling * (h_plus * u_plus - h_minus * u_minus);
    (fh, fm, h_minus, h_plus)
}

/// One forward-Euler stage of the semidiscrete scheme. Returns updated
/// fields and the mass flux through the x = 0 boundary.
fn euler_stage(
    h: &DVector<f64>,
    hu: &DVector<f64>,
    orography: &DVector<f64>,
    widths: &[f64],
    g: f64,
    dt: f64,
) -> Result<(DVector<f64>, DVector<f64>, f64)> {
    let n = h.len();
    let velocity = |i: usize| if h[i] > DRY_THRESHOLD { hu[i] / h[i] } else { 0.0 };
    let surface = |i: usize| h[i] + orography[i];

    // MUSCL slopes as full across-cell increments; h-increments clamped so
    // both face depths stay nonnegative, the face bottom is H - h.
    let mut delta_h = vec![0.0; n];
    let mut delta_surf = vec![0.0; n];
    let mut delta_u = vec![0.0; n];
    for i in 1..n - 1 {
        let w = widths[i];
        let dm = 0.5 * (widths[i - 1] + w);
        let dp = 0.5 * (w + widths[i + 1]);
        let slope = |vm: f64, v: f64, vp: f64| minmod((v - vm) / dm, (vp - v) / dp) * w;
        delta_h[i] = slope(h[i - 1], h[i], h[i + 1]);
        delta_surf[i] = slope(surface(i - 1), surface(i), surface(i + 1));
        delta_u[i] = slope(velocity(i - 1), velocity(i), velocity(i + 1));
        let cap = 2.0 * h[i];
        delta_h[i] = delta_h[i].clamp(-cap, cap);
    }

    let face = |i: usize, side: f64| Face {
        h: h[i] + side * 0.5 * delta_h[i],
        surface: surface(i) + side * 0.5 * delta_surf[i],
        u: velocity(i) + side * 0.5 * delta_u[i],
    };

    // Interface fluxes; index k separates cells k-1 and k.
    let mut flux_h = vec![0.0; n + 1];
    let mut flux_m = vec![0.0; n + 1];
    let mut star_left = vec![0.0; n + 1]; // reconstructed depth on the left side
    let mut star_right = vec![0.0; n + 1];
    for k in 0..=n {
        let (left, right) = if k == 0 {
            // Homogeneous Neumann: ghost equals the first cell.
            (face(0, 0.0), face(0, 0.0))
        } else if k == n {
            // Wall: mirror the last right face.
            let l = face(n - 1, 1.0);
            (l, Face { h: l.h, surface: l.surface, u: -l.u })
        } else {
            (face(k - 1, 1.0), face(k, -1.0))
        };
        let (fh, fm, hl, hr) = interface_flux(g, left, right);
        flux_h[k] = fh;
        flux_m[k] = fm;
        star_left[k] = hl;
        star_right[k] = hr;
    }

    let mut h_new = DVector::zeros(n);
    let mut hu_new = DVector::zeros(n);
    for i in 0..n {
        let lam = dt / widths[i];
        h_new[i] = h[i] - lam * (flux_h[i + 1] - flux_h[i]);
        // Hydrostatic flux corrections and the centred bed source combine into
        // a single factored term that vanishes identically at lake at rest.
        let h_l = h[i] - 0.5 * delta_h[i];
        let h_r = h[i] + 0.5 * delta_h[i];
        let delta_z = delta_surf[i] - delta_h[i];
        let source = 0.5 * g * (h_l + h_r) * (delta_h[i] + delta_z);
        let correction = -0.5 * g * star_left[i + 1] * star_left[i + 1]
            + 0.5 * g * star_right[i] * star_right[i]
            + source;
        hu_new[i] = hu[i] - lam * (flux_m[i + 1] - flux_m[i] + correction);

        if h_new[i] < 0.0 {
            // Only rounding debris is tolerated; genuine negatives mean the
            // CFL positivity bound was violated.
            if h_new[i] > -1e-13 * (1.0 + h[i]) {
                h_new[i] = 0.0;
            } else {
                return Err(Error::UnstableStep);
            }
        }
        if h_new[i] < DRY_THRESHOLD {
            hu_new[i] = 0.0;
        }
    }
    Ok((h_new, hu_new, flux_h[0]))
}

/// One conservative SSP-RK2 step of size `dt`, which must respect the CFL
/// bound.
pub fn sw_step(state: &SWState, g: f64, dt: f64) -> Result<SWState> {
    let n = state.n_cells();
    if dt <= 0.0 {
        return Err(Error::InvalidConfig("time step must be positive".into()));
    }
    // Stability guard against the hard CFL limit.
    let mut max_speed = 0.0f64;
    for i in 0..n {
        if state.h[i] > DRY_THRESHOLD {
            let u = state.hu[i] / state.h[i];
            max_speed = max_speed.max(u.abs() + (g * state.h[i]).sqrt());
        }
    }
    let widths: Vec<f64> = (0..n).map(|i| state.cell_width(i)).collect();
    let min_dx = widths.iter().cloned().fold(f64::INFINITY, f64::min);
    if max_speed * dt / min_dx > CFL_LIMIT * (1.0 + 1e-9) {
        return Err(Error::UnstableStep);
    }

    let (h1, hu1, inflow1) = euler_stage(&state.h, &state.hu, &state.orography, &widths, g, dt)?;
    let (h2, hu2, inflow2) = euler_stage(&h1, &hu1, &state.orography, &widths, g, dt)?;

    let mut h_new = DVector::zeros(n);
    let mut hu_new = DVector::zeros(n);
    for i in 0..n {
        h_new[i] = 0.5 * (state.h[i] + h2[i]);
        hu_new[i] = 0.5 * (state.hu[i] + hu2[i]);
        if h_new[i] < DRY_THRESHOLD {
            hu_new[i] = 0.0;
        }
    }

    Ok(SWState {
        h: h_new,
        hu: hu_new,
        orography: state.orography.clone(),
        cell_edges: state.cell_edges.clone(),
        inflow_ledger: state.inflow_ledger + 0.5 * dt * (inflow1 + inflow2),
    })
}

/// Shallow-water propagator over the fixed scenario grid, exposing the flat
/// `[h; hu]` encoding used by ensembles.
#[derive(Debug, Clone)]
pub struct SWModel {
    pub orography: DVector<f64>,
    pub cell_edges: DVector<f64>,
    pub gravity: f64,
    pub cfl: f64,
}

/// Mass bookkeeping of one forecast: drift is the conservation defect after
/// accounting for boundary inflow.
#[derive(Debug, Clone, Copy)]
pub struct MassAudit {
    pub initial_mass: f64,
    pub final_mass: f64,
    pub inflow: f64,
}

impl MassAudit {
    pub fn relative_drift(&self) -> f64 {
        ((self.final_mass - self.initial_mass) - self.inflow).abs() / self.initial_mass.max(1e-300)
    }
}

impl SWModel {
    pub fn from_scenario(scenario: &SWScenario) -> Result<Self> {
        let state = build_scenario(scenario, scenario.x_w)?;
        Ok(Self {
            orography: state.orography,
            cell_edges: state.cell_edges,
            gravity: scenario.gravity,
            cfl: 0.45,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.orography.len()
    }

    pub fn cell_centers(&self) -> Vec<f64> {
        (0..self.n_cells()).map(|i| 0.5 * (self.cell_edges[i] + self.cell_edges[i + 1])).collect()
    }

    pub fn pack(state: &SWState) -> DVector<f64> {
        let n = state.n_cells();
        let mut v = DVector::zeros(2 * n);
        v.rows_mut(0, n).copy_from(&state.h);
        v.rows_mut(n, n).copy_from(&state.hu);
        v
    }

    pub fn unpack(&self, flat: &DVector<f64>) -> Result<SWState> {
        let n = self.n_cells();
        if flat.len() != 2 * n {
            return Err(Error::DimensionMismatch("flat shallow-water state has wrong length".into()));
        }
        SWState::new(
            flat.rows(0, n).into_owned(),
            flat.rows(n, n).into_owned(),
            self.orography.clone(),
            self.cell_edges.clone(),
        )
    }

    /// Clamp a flat member to the physical range (h >= 0, momentum dropped in
    /// clamped or dry cells).
    pub fn sanitize_member(&self, flat: &DVector<f64>) -> DVector<f64> {
        let n = self.n_cells();
        let mut v = flat.clone();
        for i in 0..n {
            if v[i] < 0.0 {
                v[i] = 0.0;
                v[n + i] = 0.0;
            } else if v[i] < DRY_THRESHOLD {
                v[n + i] = 0.0;
            }
        }
        v
    }

    pub fn propagate_with_audit(&self, flat: &DVector<f64>, duration: f64) -> Result<(DVector<f64>, MassAudit)> {
        let mut state = self.unpack(flat)?;
        let initial_mass = state.total_mass();
        let mut remaining = duration;
        let floor = 1e-12 * duration.max(1.0);
        while remaining > floor {
            let dt = cfl_dt(&state, self.gravity, self.cfl)?.min(remaining);
            state = sw_step(&state, self.gravity, dt)?;
            remaining -= dt;
        }
        let audit = MassAudit {
            initial_mass,
            final_mass: state.total_mass(),
            inflow: state.inflow_ledger,
        };
        Ok((Self::pack(&state), audit))
    }
}

impl Propagator for SWModel {
    fn state_dim(&self) -> usize {
        2 * self.n_cells()
    }

    fn propagate_state(&self, state: &DVector<f64>, duration: f64, _rng: RngStream) -> Result<DVector<f64>> {
        self.propagate_with_audit(state, duration).map(|(s, _)| s)
    }
}
