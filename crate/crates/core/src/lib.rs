//! Cross-modality rigid point cloud registration.
//!
//! The pipeline voxel-normalizes both clouds, filters putative matches by
//! feature correlation to get a coarse pose, refines the pose on key regions
//! of the source with point-to-plane least squares, and fuses the local
//! solutions into one global transform. A synthetic cross-modality generator
//! and an evaluation harness live alongside.

pub mod cloud;
pub mod config;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod features;
pub mod index;
pub mod io;
pub mod keyregion;
pub mod local;
pub mod matching;
pub mod pipeline;
pub mod synth;
pub mod transform;

pub use cloud::PointCloud;
pub use config::{PipelineConfig, RefineMode};
pub use error::{Error, Result, Stage};
pub use index::{Neighbor, NeighborIndex};
pub use pipeline::{register, RegistrationResult};
pub use transform::RigidTransform;
