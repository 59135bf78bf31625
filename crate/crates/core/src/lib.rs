//! RGB-D SLAM on a differentiable Gaussian-splat map, with a sparse corner
//! front end for pose bootstrapping and a sliding-window bundle adjuster.
//!
//! The map is a set of anisotropic 3D Gaussians rendered by alpha blending
//! ([`render`]). Camera tracking ([`tracking`]) combines a masked photometric
//! term against that map with a robust reprojection term over matched corners
//! ([`features`]). Keyframes are organised in an overlap/co-visibility graph
//! ([`keyframes`]) that drives both map optimisation ([`mapping`]) and the
//! local bundle adjustment backend ([`ba`]). Dataset loading, synthetic scene
//! generation and trajectory metrics live in [`seq`]; the frame-by-frame
//! orchestration used by the CLI lives in [`pipeline`].

pub mod adam;
pub mod ba;
pub mod config;
pub mod pipeline;
pub mod features;
pub mod field;
pub mod geometry;
pub mod grid;
pub mod keyframes;
pub mod mapping;
pub mod render;
pub mod seq;
pub mod tracking;
