//! Depth-from-motion supervision toolkit.
//!
//! The crate bundles the pieces needed to supervise a dense depth field from a
//! pair (or more) of frames without ground truth:
//!
//! * [`geometry`]: pinhole camera, rigid poses and rigid flow.
//! * [`imaging`]: image buffers, bilinear sampling, inverse warping, pyramids.
//! * [`features`]: ternary census, gradient keypoints with patches, filter-bank
//!   feature pyramids.
//! * [`losses`]: every loss term with its analytic gradient, and the combined
//!   flow and depth objectives.
//! * [`optimizer`]: gradient descent on log-depth and pose.
//! * [`synth`]: planar scenes rendered with analytic depth, flow and occlusion.
//! * [`eval`]: depth metrics with median scaling.
//! * [`experiment`]: depth recovery on a rendered scene, end to end.
//! * [`io`]: PFM, PGM/PPM, Middlebury `.flo` and JSON helpers.

pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod geometry;
pub mod gradcheck;
pub mod imaging;
pub mod io;
pub mod losses;
pub mod optimizer;
pub mod reduce;
pub mod synth;

pub use error::{Error, Result};
