pub mod autodiff;
pub mod data;
pub mod graph_estimator;
pub mod nn;
pub mod tokenizer;
pub mod block;
pub mod readout;
pub mod model;
pub mod training;
pub mod export;
pub mod gradcheck;
