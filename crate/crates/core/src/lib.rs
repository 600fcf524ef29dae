pub mod analyzer;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod gradsuite;
pub mod msaf;
pub mod nn;
pub mod seq;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use autodiff::{Graph, Mode, Precision, Var};
pub use error::{Error, Result};
pub use msaf::{AttentionRecord, MsafConfig, MsafParams};
pub use tensor::{AxisSpec, ModalityFeature, Tensor};
