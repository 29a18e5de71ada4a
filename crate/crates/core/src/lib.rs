//! Spatio-temporal quality enhancement for point-cloud attributes.
//!
//! The pipeline takes three consecutive decoded frames, recolors the
//! neighbours onto the current frame's geometry, and predicts a residual for
//! one color component with a small point network.

pub mod analysis;
pub mod error;
pub mod loss_train;
pub mod metrics;
pub mod network;
pub mod pcdata;
pub mod rmc;
pub mod spatial_index;
pub mod tensorad;

pub use error::{Error, Result};
pub use pcdata::{AttributeVector, Component, FrameTriplet, PointCloud};
pub use spatial_index::{NeighborIndex, SpatialIndex};
