pub mod autodiff;
pub mod backbone;
pub mod boxes;
pub mod distill;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod head;
pub mod kernels;
pub mod model;
pub mod params;
pub mod scene;
pub mod tensor;
pub mod train;

pub use boxes::{Box3D, Detection, ObjectClass};
pub use error::{Error, Result};
pub use tensor::Tensor;
