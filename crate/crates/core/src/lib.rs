//! Reward-guided agent pipeline: trajectories, heuristic step rewards, PRM
//! datasets, scorers, environments, policies and the guided episode loop.

pub mod analytics;
pub mod dataset;
pub mod environment;
pub mod episode;
pub mod model;
pub mod policy;
pub mod reward;
pub mod scorer;
