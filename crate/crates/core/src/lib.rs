pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod data;
pub mod gradcheck;
pub mod graph_encoder;
pub mod io;
pub mod model;
pub mod params;
pub mod pruner;
pub mod scalar;
pub mod sg;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph64 = autograd::Graph<f64>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type Model = model::PsgModel<f64>;
