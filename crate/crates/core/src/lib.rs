// Tape ops return `Result` so they cannot be the std operator traits; `!(x > y)` rejects NaN on purpose.
#![allow(clippy::should_implement_trait, clippy::neg_cmp_op_on_partial_ord)]

pub mod apsim;
pub mod autodiff;
pub mod baselines;
pub mod error;
pub mod experiment;
pub mod field;
pub mod forward;
pub mod mesh;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod sparse;
pub mod training;

pub use error::{Error, Result};
pub use experiment::{DeskConfig, Method, MethodSettings, Scenario};
pub use field::SpatioTemporalField;
pub use forward::{Observation, TransferModel};
pub use mesh::{Adjacency, Point, TriMesh};
pub use metrics::MetricsReport;
pub use nalgebra;
pub use network::{NetworkConfig, NetworkParams};
pub use ops::{LaplacianOperator, TemporalGrid};
pub use training::{Backend, Problem, TrainConfig, TrainHistory};
