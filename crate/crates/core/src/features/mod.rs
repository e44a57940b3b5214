//! Census transform, gradient keypoints with patches, and fixed filter-bank
//! feature pyramids.

mod census;
mod keypoints;
mod pyramid;

pub use census::{
    census_distance, census_transform, soft_code, soft_code_derivative, ternary_code, CensusMap,
    CENSUS_DISTANCE_SOFTNESS, DEFAULT_CENSUS_EPSILON, NEIGHBOURS,
};
pub use keypoints::{extract_keypoints, gradient_magnitude, KeypointParams, PatchSet};
pub use pyramid::{build_feature_pyramid, FeaturePyramid, FilterBank, PyramidConfig};
