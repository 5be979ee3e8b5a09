//! Turning annotations into training data.
//!
//! Polygon instances are rasterized into single-channel semantic masks
//! ([`polygons_to_mask`]); the data loader expands each mask into per-level
//! target planes ([`mask_to_hier_targets`]); training splits get inverse median
//! frequency class weights ([`compute_class_weights`]) and a shared fold
//! manifest ([`make_folds`]).

mod augment;
pub mod dataset;
mod folds;
pub mod io;
mod raster;
mod targets;
mod weights;

pub use augment::{augment, AffineConfig, AugmentConfig, BlurConfig, JitterConfig};
pub use folds::{make_folds, FoldManifest, Split};
pub use raster::{
    connected_components, polygons_to_mask, rasterize_polygon, PolygonInstance, PriorityOrder,
    MIN_OBJECT_PIXELS,
};
pub use targets::{hier_targets_to_mask, mask_to_hier_targets, HierTargetStack, SemanticMask};
pub use weights::{
    compute_class_weights, compute_flat_weights, count_classes, weights_from_counts, ClassCounts,
    FrequencyBasis, LossWeights, MedianScope, WeightScheme,
};
