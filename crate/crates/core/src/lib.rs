//! Detector-agnostic tooling for counting waterbirds in very-high-resolution
//! aerial survey imagery.
//!
//! The crate covers the data path around an object detector:
//!
//! * [`tiler`] crops survey frames into overlapping detector-sized tiles and
//!   clips annotations into them,
//! * [`augment`] oversamples minority-dominated training tiles,
//! * [`merge`] back-projects per-tile detections, removes cross-tile
//!   duplicates with NMS and produces per-class counts,
//! * [`eval`] computes interpolated AP, PR curves and confusion matrices,
//!   with [`oracle`] providing a seeded stand-in detector for testing.
//!
//! Geometry is generic over [`Scalar`]; the pipeline itself works in `f64`
//! through the [`BBox`] and [`Affine`] aliases.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod dataset;
pub mod detections;
pub mod eval;
pub mod geometry;
pub mod manifest;
pub mod merge;
pub mod oracle;
pub mod render;
pub mod scalar;
pub mod seed;
pub mod taxonomy;
pub mod tiler;

pub use geometry::{AffineTransform, BoundingBox, GeometryError};
pub use scalar::Scalar;
pub use taxonomy::ClassTaxonomy;

/// Double-precision box used throughout the pipeline.
pub type BBox = BoundingBox<f64>;
/// Double-precision affine transform used throughout the pipeline.
pub type Affine = AffineTransform<f64>;
/// Single-precision variants for detector-side callers.
pub type BBox32 = BoundingBox<f32>;
pub type Affine32 = AffineTransform<f32>;
