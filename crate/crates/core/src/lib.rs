//! Patient-specific glioma growth modelling and radiotherapy planning.
//!
//! The crate follows one pipeline end to end:
//!
//! 1. [`anatomy`] loads tissue maps (white/grey matter, CSF) and derives the
//!    spatially varying diffusivity of a Fisher-Kolmogorov growth model.
//! 2. [`growth`] integrates the model forward to a normalized tumor cell
//!    density on the voxel grid.
//! 3. [`imaging`] links simulated density to MRI segmentations (Bernoulli
//!    observation model) and FET-PET uptake (Gaussian observation model).
//! 4. [`priors`] + [`tmcmc`] calibrate the model parameters against one
//!    patient's scans with a transitional MCMC sampler.
//! 5. [`posterior`] pushes the parameter ensemble back through the solver to
//!    voxelwise density statistics, and [`rtplan`] turns those into target
//!    volumes that can be compared against conventional margin plans.
//!
//! [`synthetic`] fabricates ground-truth test patients so the whole loop can
//! be validated without clinical data.

pub mod anatomy;
pub mod calibrate;
pub mod edt;
pub mod error;
pub mod growth;
pub mod imaging;
pub mod nifti;
pub mod par;
pub mod posterior;
pub mod priors;
pub mod rtplan;
pub mod synthetic;
pub mod tmcmc;
pub mod volume;

pub use error::{Error, Result};
