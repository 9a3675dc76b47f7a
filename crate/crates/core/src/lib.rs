//! Checkpoint extrapolation toolkit: tensor archives, checkpoint arithmetic,
//! extrapolation-strength search and a synthetic preference-alignment lab.

pub mod alpha_search;
pub mod model_arith;
pub mod synthetic_lab;
pub mod tensor_store;
