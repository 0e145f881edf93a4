//! Weakly supervised point cloud segmentation with a multi-prototype
//! classifier.
//!
//! Every class owns `M` prototypes; a point's class score is its best inner
//! product with any prototype of that class. Training combines
//! cross-entropy on the few labeled points with a subclass-averaging loss
//! on all points and two constraints keeping prototypes diverse yet
//! separable.

pub mod bank;
mod binio;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod numeric;
pub mod trainer;

pub use error::{Error, Result};
