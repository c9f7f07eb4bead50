//! Precomputed, tensor-compressed normal distribution functions for
//! rendering glinty surfaces from high-resolution normal maps.

pub mod container;
pub mod cpd;
pub mod error;
pub mod envlight;
pub mod ndf;
pub mod pfm;
pub mod microfacet;
pub mod pyramid;
pub mod query;
pub mod render;
pub mod sampler;
pub mod store;
pub mod texture;
pub mod wangtiles;

pub use error::{Error, Result};
