//! Text-aware image mixing for image-text contrastive learning.
//!
//! Patch scores from a small text-conditioned predictor pick which region of a
//! target image to discard and which region of a source image to paste over it.
//! The mixed image is trained against both captions with area-proportional soft
//! labels. The crate also carries the pieces needed to check the accompanying
//! mutual-information bounds exactly on small discrete distributions, and a toy
//! dual-encoder harness for comparing mixing strategies.
//!
//! ```
//! use timix::geometry::PatchGrid;
//! use timix::mixer::{MixRecipe, SideRatio};
//! use timix::tpp::ScoreMap;
//!
//! # fn main() -> timix::Result<()> {
//! let grid = PatchGrid::new(64, 64, 16)?;
//! let target = ScoreMap::new(grid, vec![0.5; 16])?;
//! let source = ScoreMap::new(grid, vec![0.5; 16])?;
//! let recipe = MixRecipe::text_aware(&target, &source, SideRatio::new(0.5)?)?;
//! assert_eq!(recipe.s_src + recipe.s_tgt, 1.0);
//! # Ok(())
//! # }
//! ```

#![allow(clippy::needless_range_loop)]

pub mod contrastive;
pub mod dataio;
pub mod error;
pub mod featurize;
pub mod geometry;
pub mod mi;
pub mod mixer;
pub mod rng;
pub mod toytrain;
pub mod tpp;

pub use error::{Error, Result};
