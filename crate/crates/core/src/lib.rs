// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cloud;
pub mod error;
pub mod fixtures;
pub mod flow;
pub mod latent;
pub mod metrics;
pub mod mixture;
pub mod rng;
pub mod schedule;
pub mod sdot;
pub mod verify;

pub use cloud::PointCloud;
pub use error::{Error, Result};
pub use latent::LatentComplex;
pub use mixture::{marginal, MixtureMarginal};
pub use schedule::{IntegratingFactors, LipschitzBound, NoiseSchedule};
pub use sdot::{BrenierPotential, CellStats, SourceLaw};

/// Library version, stamped into every run directory.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
