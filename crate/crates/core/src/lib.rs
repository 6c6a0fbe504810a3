pub mod cfm;
pub mod features;
pub mod infer;
pub mod model;
pub mod sampler;
pub mod stats;
pub mod tensor;
pub mod text;
pub mod training;
pub mod verify;
