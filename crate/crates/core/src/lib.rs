//! Neural-field unfolding of sparse 3D targets in volumetric images.

pub mod error;
pub mod field;
pub mod geometry;
pub mod fitting;
pub mod objectives;
pub mod phantom;
pub mod render;
pub mod sampling;
pub mod volume;

pub use error::{Result, UnfoldError};
pub use field::{FieldConfig, FieldParams, NeuralField};
pub use geometry::{fit_plane_frame, PlaneFrame, TargetSet};
pub use volume::{GridSpec, Volume, VolumeKind, WorldPoint};
