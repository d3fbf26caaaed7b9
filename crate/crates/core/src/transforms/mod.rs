//! Bias-field synthesis, diffeomorphic warps, and random augmentation.

pub mod augment;
pub mod bias;
pub mod bspline;
pub mod smooth;
pub mod svf;

pub use augment::{rand_augment, RandAugConfig};
pub use bias::{apply_bias, project_bias, random_bias, realize_bias, BiasField};
pub use bspline::{bspline_upsample, ControlGrid};
pub use smooth::gaussian_smooth;
pub use svf::{
    compose, integrate_svf, project_velocity, random_velocity, realize_deformation, warp,
    warp_labels, DeformationField, MorphConfig, VelocityField,
};
