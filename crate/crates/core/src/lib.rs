//! Nonlinear ensemble data assimilation with adaptive tempering.
//!
//! The crate provides three filter families over a shared [`Ensemble`]
//! container — Gaussian-approximative (ESRF and its localised variant),
//! transport/resampling particle filters (bootstrap, ETPF, LETPF) and the
//! feedback particle filter — together with the tempering machinery that
//! composes one filter from each family into a two-stage hybrid update, and
//! the benchmark models the combinations are evaluated on.

pub mod ensemble;
pub mod error;
pub mod filters;
pub mod metrics;
pub mod models;
pub mod observation;
pub mod rng;
pub mod shallow_water;

pub use ensemble::{
    apply_inflation, apply_rejuvenation, apply_rejuvenation_scaled, ensemble_statistics, Ensemble,
    EnsembleStatistics, RejuvenationScaling,
};
pub use error::{Error, Result};
pub use metrics::{effective_sample_size, iqr_interval, quartiles, rmse, WeightVector};
pub use models::{
    generate_twin, DriftSign, DynamicalModel, PotentialKind, Propagator, TwinRun,
};
pub use observation::{ObservationMap, ObservationModel};
pub use rng::{RngStream, StreamRng};
