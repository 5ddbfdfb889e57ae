pub mod autodiff;
pub mod backend;
pub mod cluster;
pub mod evaluation;
pub mod io;
pub mod network;
pub mod pipeline;
pub mod synthcorpus;
pub mod tensor;
pub mod trainer;

pub use tensor::Tensor;
