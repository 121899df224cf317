//! R-localisation: per-gridpoint tapering of observation influence.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Taper (filtering) function applied to scaled distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TaperKind {
    /// rho(s) = max(0, 1 - s); support ends at r_loc.
    #[default]
    LinearHat,
    /// Fifth-order Gaspari-Cohn piecewise polynomial, rescaled so its support
    /// also ends at r_loc.
    GaspariCohn,
}

impl TaperKind {
    /// Evaluate at s = distance / r_loc.
    pub fn evaluate(&self, s: f64) -> f64 {
        match self {
            TaperKind::LinearHat => (1.0 - s).max(0.0),
            TaperKind::GaspariCohn => gaspari_cohn(2.0 * s),
        }
    }
}

/// Classical Gaspari-Cohn correlation with support theta < 2.
fn gaspari_cohn(theta: f64) -> f64 {
    let t = theta.abs();
    if t < 1.0 {
        -0.25 * t.powi(5) + 0.5 * t.powi(4) + 0.625 * t.powi(3) - (5.0 / 3.0) * t.powi(2) + 1.0
    } else if t < 2.0 {
        (1.0 / 12.0) * t.powi(5) - 0.5 * t.powi(4) + 0.625 * t.powi(3) + (5.0 / 3.0) * t.powi(2)
            - 5.0 * t
            + 4.0
            - (2.0 / 3.0) / t
    } else {
        0.0
    }
}

/// Distance on the grid carrying the state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistanceMetric {
    /// |a - b| on a line (channel geometries).
    Euclidean,
    /// Ring distance min(|a - b|, period - |a - b|) (periodic lattices).
    Ring { period: f64 },
}

impl DistanceMetric {
    pub fn distance(&self, a: f64, b: f64) -> f64 {
        let d = (a - b).abs();
        match self {
            DistanceMetric::Euclidean => d,
            DistanceMetric::Ring { period } => d.min(period - d),
        }
    }
}

/// Positions and taper defining local analyses.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationConfig {
    pub r_loc: f64,
    pub taper: TaperKind,
    pub metric: DistanceMetric,
    /// Position of every state component (components sharing a position are
    /// updated together).
    pub state_positions: Vec<f64>,
    /// Position of every observation component.
    pub obs_positions: Vec<f64>,
}

impl LocalizationConfig {
    pub fn new(
        r_loc: f64,
        taper: TaperKind,
        metric: DistanceMetric,
        state_positions: Vec<f64>,
        obs_positions: Vec<f64>,
    ) -> Result<Self> {
        if !(r_loc > 0.0) {
            return Err(Error::InvalidConfig(format!("localization radius must be positive, got {r_loc}")));
        }
        if state_positions.is_empty() || obs_positions.is_empty() {
            return Err(Error::InvalidConfig("localization requires state and observation positions".into()));
        }
        Ok(Self { r_loc, taper, metric, state_positions, obs_positions })
    }

    pub fn weight(&self, a: f64, b: f64) -> f64 {
        self.taper.evaluate(self.metric.distance(a, b) / self.r_loc)
    }

    /// Distinct analysis positions with the state components living at each,
    /// in stable component order.
    pub fn position_groups(&self) -> Vec<(f64, Vec<usize>)> {
        let mut groups: Vec<(f64, Vec<usize>)> = Vec::new();
        for (idx, &pos) in self.state_positions.iter().enumerate() {
            match groups.iter_mut().find(|(p, _)| *p == pos) {
                Some((_, comps)) => comps.push(idx),
                None => groups.push((pos, vec![idx])),
            }
        }
        groups
    }
}

/// Diagonal entries of the localisation matrix at grid point `x_g`: the taper
/// evaluated at each observation component's scaled distance.
pub fn localization_weights(cfg: &LocalizationConfig, x_g: f64) -> DVector<f64> {
    DVector::from_iterator(
        cfg.obs_positions.len(),
        cfg.obs_positions.iter().map(|&xl| cfg.weight(x_g, xl)),
    )
}

/// Taper over state components, used by the localized transport metric.
pub fn state_taper_weights(cfg: &LocalizationConfig, x_g: f64) -> DVector<f64> {
    DVector::from_iterator(
        cfg.state_positions.len(),
        cfg.state_positions.iter().map(|&xl| cfg.weight(x_g, xl)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring_cfg(r_loc: f64) -> LocalizationConfig {
        let state: Vec<f64> = (0..120).map(|i| i as f64).collect();
        let obs: Vec<f64> = (0..60).map(|i| (2 * i) as f64).collect();
        LocalizationConfig::new(r_loc, TaperKind::LinearHat, DistanceMetric::Ring { period: 120.0 }, state, obs)
            .unwrap()
    }

    #[test]
    fn zero_distance_gives_unit_weight() {
        let cfg = ring_cfg(2.0);
        let w = localization_weights(&cfg, 0.0);
        assert_eq!(w[0], 1.0);
    }

    #[test]
    fn hat_support_is_compact() {
        let cfg = ring_cfg(2.0);
        let w = localization_weights(&cfg, 0.0);
        // Observed points are every second index; at r_loc = 2 only the
        // observation at distance 0 remains (distance 2 hits the hat's zero).
        for (l, &wl) in w.iter().enumerate() {
            let dist = cfg.metric.distance(0.0, cfg.obs_positions[l]);
            if dist >= 2.0 {
                assert_eq!(wl, 0.0);
            }
        }
        assert_eq!(w.iter().filter(|&&x| x > 0.0).count(), 1);
    }

    #[test]
    fn ring_support_enumeration_odd_point() {
        // Enumeration oracle on the ring metric: from an odd grid point the
        // active observations are the two even neighbours at distance 1.
        let cfg = ring_cfg(2.0);
        let w = localization_weights(&cfg, 1.0);
        let active: Vec<usize> = (0..w.len()).filter(|&l| w[l] > 0.0).collect();
        assert_eq!(active, vec![0, 1]); // observation components at positions 0 and 2
        assert_eq!(w[0], 0.5);
        assert_eq!(w[1], 0.5);
        assert!(active.len() <= 3);
    }

    #[test]
    fn ring_wraps_around() {
        let cfg = ring_cfg(2.0);
        let w = localization_weights(&cfg, 119.0);
        // Nearest even points to 119 on the ring: 118 and 0, both at distance 1.
        assert_eq!(w[59], 0.5);
        assert_eq!(w[0], 0.5);
    }

    #[test]
    fn gaspari_cohn_shape() {
        assert!((gaspari_cohn(0.0) - 1.0).abs() < 1e-15);
        assert_eq!(gaspari_cohn(2.0), 0.0);
        assert_eq!(gaspari_cohn(2.5), 0.0);
        // Monotone decrease on a few sample points.
        let mut prev = 1.0;
        for k in 1..=20 {
            let v = gaspari_cohn(0.1 * k as f64);
            assert!(v <= prev + 1e-12);
            assert!((0.0..=1.0).contains(&v));
            prev = v;
        }
    }

    #[test]
    fn position_groups_pair_shared_positions() {
        let cfg = LocalizationConfig::new(
            1.0,
            TaperKind::LinearHat,
            DistanceMetric::Euclidean,
            vec![0.5, 1.5, 0.5, 1.5],
            vec![0.5],
        )
        .unwrap();
        let groups = cfg.position_groups();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0], (0.5, vec![0, 2]));
        assert_eq!(groups[1], (1.5, vec![1, 3]));
    }
}
