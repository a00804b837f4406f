//! Animatable 3D Gaussian avatars: expression blendshapes over a neutral
//! Gaussian set, linear blend skinning, a rigidly bound mouth interior,
//! differentiable splatting, training losses, temporal metrics and file
//! formats.

pub mod assets;
pub mod blendpose;
pub mod error;
pub mod image;
pub mod knn;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod model;
pub mod rasterizer;
pub mod sh;
pub mod ssim;
pub mod trainer;

pub use error::{Error, Result};
pub use image::Image;
pub use model::{
    ActivatedGaussianSet, BlendshapeModel, Camera, ExpressionCoeffs, GaussianSet, GradientSet,
    ParamGroup, PoseParams, RigidTransform, SkinWeights,
};
