pub mod autodiff;
pub mod nn;
pub mod data;
pub mod seed;
pub mod pipeline;
pub mod eval;
pub mod gradsuite;
pub mod cli;
