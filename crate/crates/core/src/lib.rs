pub mod decoder;
pub mod labeler;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
