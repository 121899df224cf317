//! Filter implementations grouped by family.

pub mod esrf;
pub mod fpf;
pub mod localization;
pub mod particle;
pub mod transport;
