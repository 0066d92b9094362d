//! Class-asymmetric multi-source unsupervised domain adaptation for semantic
//! segmentation, at desk scale.
pub mod checks;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod train;
pub mod hgcn;
pub mod label;
pub mod mixing;
pub mod pseudo;
pub mod segnet;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use label::{LabelMap, IGNORE};
pub use tensor::{Graph, Tensor, Var};
