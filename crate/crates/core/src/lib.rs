pub mod calculus;
pub mod corrector;
pub mod error;
pub mod experiments;
pub mod fft;
pub mod field;
pub mod grid;
pub mod homog;
pub mod io;
pub mod localize;
pub mod sgap;
pub mod stats;
pub mod twoscale;

pub use calculus::{BoundaryCondition, ScalarField, SkewTensorField, SolveOptions, VectorField};
pub use corrector::CorrectorSet;
pub use error::{HomlabError, Result, Warning};
pub use experiments::{LabConfig, RateReport, Setting};
pub use field::{CoefficientSet, CovarianceKind, CovarianceSpec, ParameterField};
pub use grid::GridSpec;
pub use homog::HomogenizedCoefficients;
pub use localize::CubePartition;
pub use sgap::SpectralGapEstimate;
