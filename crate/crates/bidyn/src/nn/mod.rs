//! Function approximation: MLPs, Gaussian heads, reverse-mode gradients and
//! the adaptive-moment optimizer underlying every learned component.

pub mod adam;
pub mod fd;
pub mod gaussian;
pub mod mlp;

pub use adam::Adam;
pub use gaussian::{gaussian_nll, gaussian_nll_grad, GaussianHead, GaussianPrediction};
pub use mlp::{Activation, Mlp, MlpCache, MlpSpec};
