pub mod geometry;
pub mod rod;
pub mod seeds;
pub mod dataset;
pub mod env;
pub mod policy_trainer;
pub mod eval_harness;
pub mod cli;
