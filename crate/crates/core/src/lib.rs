pub mod data;
pub mod engine;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod retriever;
pub mod selection;
pub mod tokenizer;
