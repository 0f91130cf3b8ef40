pub mod calculus;
pub mod error;
pub mod field;
pub mod frac_calculus;
pub mod geometry;
pub mod heat;
pub mod linalg;
pub mod lp;
pub mod manifold;
pub mod operators;
pub mod report;
pub mod sample;
pub mod stencil;
pub mod verify;

pub use error::{Error, Result};
pub use field::TensorField;
pub use geometry::{GeometryCache, MetricGrid, MetricSpec};
pub use operators::LaplaceOperator;
