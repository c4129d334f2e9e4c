//! Exemplar-free class-incremental learning on the unit hypersphere.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`]: dense matrices, a cyclic Jacobi eigensolver and the seeded RNG.
//! - [`sphere`]: geodesic distance, log/exp maps and Fréchet means on `S^{d-1}`.
//! - [`pga`]: per-class attribute anchors (principal geodesic analysis, plus a
//!   Euclidean PCA baseline) and the freeze-on-completion anchor store.
//! - [`encoder`]: frozen random-projection encoders, textual fusion, occlusion
//!   and augmented views.
//! - [`expert`]: per-task score/residual maps, the three training losses, their
//!   analytic gradients, SGD training and the information-bottleneck diagnostic.
//! - [`routing`]: cosine transport costs, log-domain Sinkhorn, Boltzmann task
//!   routing and mixture-of-experts prediction.
//! - [`pipeline`]: the stage-by-stage training driver, inference and metrics.
//! - [`io`]: config, dataset/state/results formats and synthetic task streams.
//! - [`verify`]: the independent oracle batteries behind `acil verify`.
//!
//! Geometry, anchors and transport are generic over [`Scalar`] (`f32`/`f64`);
//! the learning pipeline runs in `f64`, and the aliases below name the `f64`
//! instantiations used throughout.

pub mod cli;
pub mod encoder;
pub mod error;
pub mod expert;
pub mod hash;
pub mod io;
pub mod linalg;
pub mod pga;
pub mod pipeline;
pub mod routing;
pub mod scalar;
pub mod sphere;
pub mod verify;


pub use error::{Error, Result};
pub use scalar::Scalar;

/// Class label.
pub type ClassId = u32;
/// Task (stage) index.
pub type TaskId = u32;

pub type Matrix = linalg::Matrix<f64>;
pub type UnitVector = sphere::UnitVector<f64>;
pub type TangentVector = sphere::TangentVector<f64>;
pub type ClassAnchor = pga::ClassAnchor<f64>;
pub type AnchorStore = pga::AnchorStore<f64>;
pub type DiscreteMeasure = routing::DiscreteMeasure<f64>;
pub type TransportPlan = routing::TransportPlan<f64>;
pub type OtParams = routing::OtParams<f64>;
pub type RoutingDistribution = routing::RoutingDistribution<f64>;
