pub mod cli;
pub mod cohort;
pub mod eval;
pub mod llm;
pub mod parallel;
pub mod qagen;
pub mod ranker;
pub mod retriever;
pub mod segment;
pub mod synth;
pub mod text;
pub mod text_ranker;
