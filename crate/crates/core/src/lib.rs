pub mod tensorcore;
pub mod semantics;
pub mod tokenizer;
pub mod metrics;
pub mod data;
pub mod nnet;
pub mod model;
pub mod training;
pub mod decoding;
pub mod pipeline;
