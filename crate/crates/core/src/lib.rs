//! Artistic typography from a single glyph.
//!
//! A glyph is rasterized, split into a subject region (deformed to depict the
//! concept) and a surrounding region (decorated in place), and both are generated
//! together by a two-branch diffusion sampler that shares its initial noise,
//! fuses the branch predictions by mask and couples the branches through
//! attention.

pub mod attention;
pub mod backends;
pub mod error;
pub mod glyph;
pub mod imageops;
pub mod knowledge;
pub mod pipeline;
pub mod region;
pub mod sampler;
pub mod semtypo;

pub use error::{Error, Result};
