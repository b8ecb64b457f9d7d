//! Tensor state space model for dynamic multilayer binary networks:
//! simulation, variational EM fitting, model selection and evaluation.

pub mod error;
pub mod evaluate;
pub mod inference;
pub mod io;
pub mod model;
pub mod simulate;
pub mod tensor;

pub use error::{Error, Result};
pub use inference::{fit, FitOptions, FitResult, VariationalPosterior};
pub use model::{LatentTrajectory, ModelParams, ObservationSeries};
pub use simulate::{GroundTruth, Mechanism, SimConfig};
pub use tensor::{Mat, Tensor3};
