//! Deterministic 2D tabletop world with scripted experts, multi-view
//! rendering, dataset generation, and a replanning evaluator.

pub mod dataset;
pub mod evaluate;
pub mod expert;
pub mod render;
pub mod world;

pub use dataset::{generate_dataset, Dataset, EpisodeData};
pub use evaluate::{evaluate, oracle_policy, EvalObs, EvalReport, EvalRow};
pub use expert::expert_action;
pub use render::{render, FRAME_PX};
pub use world::{
    reset, step, StageTracker, TaskId, WorldState, ACTION_DIM, GRASP_RADIUS, MAX_OBJECTS,
    MOVE_SCALE, STATE_DIM, ZONE_TOL,
};
