//! Rough-drift transport and diffusion of a passive scalar: kernels, exact
//! path sampling, the regularized drive, a pathwise spectral solver,
//! closed-form moments, Monte Carlo ensembles and a periodic two-scale
//! model.

pub mod ensemble;
pub mod error;
pub mod fft2;
pub mod io;
pub mod kernel;
pub mod moments;
pub mod quad;
pub mod sampler;
pub mod spectral;
pub mod stats;
pub mod twoscale;
pub mod veps;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/kernels.md")]
    pub struct Kernels;
    #[doc = include_str!("../../../book/src/regularized-drive.md")]
    pub struct RegularizedDrive;
    #[doc = include_str!("../../../book/src/spectral.md")]
    pub struct Spectral;
    #[doc = include_str!("../../../book/src/moments.md")]
    pub struct Moments;
    #[doc = include_str!("../../../book/src/ensembles.md")]
    pub struct Ensembles;
    #[doc = include_str!("../../../book/src/twoscale.md")]
    pub struct TwoScale;
}
