//! Change detection between two radiance fields of the same scene.
//!
//! The crate covers volume rendering, analytic test scenes, a trainable
//! voxel-grid field, similarity alignment, the per-pixel change decision and
//! evaluation metrics, plus a file-based pipeline tying them together.

pub mod align;
pub mod camera;
pub mod change_render;
pub mod detect;
pub mod error;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod scene;
pub mod voxel;

pub use camera::{Camera, Intrinsics, Pose, Ray, Vec3};
pub use error::{Error, ErrorKind, Result};
pub use render::{ColorImage, RadianceField, RadianceSample};
