pub mod autograd;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod synth;
pub mod tensor;
pub mod volume;
