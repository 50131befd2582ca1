//! Multi-beam synthetic aperture imaging for a car-mounted FMCW radar.
//!
//! The crate covers the whole chain: scene and trajectory description
//! ([`scene`]), dechirped echo synthesis and range compression ([`signal`]),
//! navigation sensor fusion ([`navigation`]), time-domain back-projection
//! with angular beam filters ([`focus`]) and display products ([`imaging`]).

pub mod container;
pub mod error;
pub mod focus;
pub mod geometry;
pub mod imaging;
pub mod kinematics;
pub mod matrix;
pub mod navigation;
pub mod scene;
pub mod signal;

pub use error::{Error, Result};
