//! Sparse-view structure-from-motion with geometry-guided refinement of dense
//! point maps.
//!
//! The pipeline starts from feed-forward camera and point-map estimates,
//! filters dense pairwise correspondences by cycle consistency and
//! confidence, refines the cameras with a robust sparse bundle adjustment,
//! triangulates every surviving track by multi-view DLT, and finally uses the
//! triangulated points to correct the dense point maps patch by patch.
//!
//! All geometry is generic over the scalar type ([`Real`]); the aliases at
//! the crate root fix it to `f64`, which is what the CLI uses.

pub mod align;
pub mod ba;
pub mod error;
pub mod eval;
pub mod io;
pub mod matching;
pub mod pipeline;
pub mod refine;
pub mod rng;
pub mod scalar;
pub mod scene;
pub mod synth;
pub mod triangulate;

pub use error::{GeomError, IoError};
pub use scalar::Real;

pub type Camera = scene::CameraParams<f64>;
pub type PointMap = scene::PointMapSet<f64>;
pub type Pixel = scene::PixelCoord<f64>;
pub type Graph = matching::CorrGraph<f64>;
pub type Track = matching::Track<f64>;
pub type Cloud = triangulate::GuidedCloud<f64>;
pub type Similarity = align::Sim3<f64>;
