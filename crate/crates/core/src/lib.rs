pub mod autodiff;
pub mod compare;
pub mod fbp;
pub mod gradcheck;
pub mod lpd;
pub mod metrics;
pub mod operator;
pub mod phantom;
pub mod projector;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod variational;

pub use autodiff::{AutodiffError, Graph, Gradients, Var};
pub use scalar::{Dtype, Scalar};
pub use tensor::{Tensor, TensorError};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Image32 = projector::Image<f32>;
pub type Image64 = projector::Image<f64>;
pub type Sinogram32 = projector::Sinogram<f32>;
pub type Sinogram64 = projector::Sinogram<f64>;
pub type RayTransform32 = projector::RayTransform<f32>;
pub type RayTransform64 = projector::RayTransform<f64>;
pub type Model32 = lpd::Model<f32>;
pub type Model64 = lpd::Model<f64>;
