//! Local MMSE estimators for each kind of stage.

pub mod linear;
pub mod scalar;

pub use linear::{
    component_solve, component_variances, denoise_linear, denoise_linear_observed, ComponentSolve,
    LinearEstimate, ObservedEstimate,
};
pub use scalar::{
    denoise_input, denoise_middle, denoise_middle_quadrature, denoise_middle_with_evidence, denoise_output_nonlinear, mc_oracle_moments,
    DenoiseResult, McMoments, ScalarChannel,
};
