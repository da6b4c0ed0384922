//! Two-stage generative pipeline for intracranial-aneurysm surface meshes.
//!
//! Aneurysm complexes are encoded as coefficients over the low-frequency
//! Laplacian eigenbasis of a canonical mesh ([`ghd`]), parent vessels as
//! sine-mode deflections of straight beams ([`centerline`]). Two variational
//! autoencoders ([`genmodel`]) learn these encodings, the first optionally
//! conditioned on differentiable morphological markers ([`markers`]), and
//! [`synthesis`] sweeps vessel tubes along generated centerlines and welds
//! them onto the generated complex.

pub mod centerline;
pub mod error;
pub mod evalmetrics;
pub mod genmodel;
pub mod ghd;
pub mod knn;
pub mod markers;
pub mod mesh;
pub mod synthesis;
pub mod toolkit;
pub mod util;

pub use error::{Error, Result};
