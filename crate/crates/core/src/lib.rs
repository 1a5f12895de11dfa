//! Generative image synthesis through latent 3D primitives.
//!
//! The pipeline decodes a latent code into a set of posed primitives, projects
//! each one into a feature/alpha/depth triplet with a differentiable
//! rasterizer, refines every triplet with a shared 2D network and composites
//! the results by depth. Everything is differentiable through the
//! [`autodiff`] tape.

pub mod autodiff;
pub mod compositor;
pub mod geometry;
pub mod gradsuite;
pub mod losses;
pub mod networks;
pub mod primitives;
pub mod projection;
pub mod training;

#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("non-finite value at index {index} ({what})")]
    NonFinite { what: String, index: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
