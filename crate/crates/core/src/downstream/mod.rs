//! Frozen-encoder downstream tasks: behavior cloning on a toy control
//! environment and a linear motion probe.

mod env;
mod policy;
mod probe;

pub use env::{
    distance, render, scripted_expert, EnvConfig, EnvState, GoalLayout, Observation, ToyEnv, ACTION_DIM, PROPRIO_DIM,
};
pub use policy::{
    bc_train, collect_demos, extract_features, load_demos, rollout_eval, run_episode, save_demos, BcController, BcReport,
    Controller, Expert, MlpPolicy, PolicyConfig, RandomController, Trajectory,
};
pub use probe::{linear_probe, motion_probe, pair_features, ProbeConfig, ProbeReport};
