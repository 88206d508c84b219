//! Slot-based object-centric scene decomposition of multi-camera video.
//!
//! The crate contains the full desk-scale pipeline:
//!
//! - [`scene`]: deterministic procedural generator of multi-camera driving
//!   sequences with ground-truth instance masks, camera poses, and future
//!   ego waypoints.
//! - [`record`]: the on-disk container format for sequence records,
//!   dataset manifests, and the batch iterator.
//! - [`model`]: the network — CNN patch encoder, pose-conditioned
//!   transformer with spatial pooling, per-slot variational posteriors,
//!   per-slot mixture pixel decoder, and the waypoint head.
//! - [`loss`]: KL, mixture reconstruction, waypoint task loss, and their
//!   weighted total.
//! - [`metrics`]: foreground adjusted Rand index and center-of-mass
//!   tracking distance with Hungarian matching.
//! - [`train`]: optimizer, training loop, checkpointing.
//! - [`viz`]: segmentation overlays and waypoint plots.
//!
//! Everything is driven by one flat key/value config format, see
//! [`config`].

pub mod config;
pub mod error;
pub mod geom;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod record;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
