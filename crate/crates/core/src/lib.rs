//! Dynamic-shape LLM inference micro-runtime.

pub mod cli;
pub mod graphir;
pub mod kvcache;
pub mod memplan;
pub mod quantfp4;
pub mod refexec;
pub mod shapeinfer;
pub mod symexpr;
