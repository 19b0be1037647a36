//! Receding-horizon policy evaluation.
//!
//! The policy is queried for a chunk of future actions, the first
//! `replan` of them are executed, and the loop re-observes. Episodes
//! run in parallel; rows are ordered by task and episode index so the
//! report is deterministic.

use rayon::prelude::*;

use super::render::{frame_to_f32, render, VIEWS};
use super::world::{reset, step, StageTracker, TaskId, ACTION_DIM};
use crate::error::{OwmError, Result};
use crate::rng;

/// One observation handed to the policy: the three rendered views as
/// `f32` in `[0, 1]`, the flat state vector, and the task.
#[derive(Debug, Clone)]
pub struct EvalObs {
    pub frames: [Vec<f32>; 3],
    pub state: Vec<f64>,
    pub task: TaskId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalRow {
    pub task: TaskId,
    pub seed: u64,
    pub success: bool,
    pub steps: u32,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,seed,success,steps\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.task.name(),
                row.seed,
                row.success,
                row.steps
            ));
        }
        out
    }

    /// Success fraction, optionally restricted to one task. Empty
    /// selections count as zero.
    pub fn success_rate(&self, task: Option<TaskId>) -> f64 {
        let rows: Vec<&EvalRow> = self
            .rows
            .iter()
            .filter(|r| task.is_none_or(|t| r.task == t))
            .collect();
        if rows.is_empty() {
            return 0.0;
        }
        rows.iter().filter(|r| r.success).count() as f64 / rows.len() as f64
    }
}

/// Scripted expert wrapped as a chunk policy: rebuilds the world from the
/// observation vector and simulates the expert `horizon` steps forward.
/// The reference upper bound for closed-loop evaluation.
pub fn oracle_policy(
    horizon: usize,
) -> impl Fn(&EvalObs) -> Result<Vec<[f64; ACTION_DIM]>> + Sync {
    use super::expert::expert_action;
    use super::world::WorldState;
    move |obs: &EvalObs| {
        let mut state = WorldState::from_state_vector(obs.task, &obs.state)?;
        let mut chunk = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let action = expert_action(&state, obs.task);
            state = step(&state, &action);
            chunk.push(action);
        }
        Ok(chunk)
    }
}

/// Run `episodes` rollouts per task. `infer_ah` is the chunk length the
/// policy must return and `replan` how many of those actions execute
/// before the next query; `1 <= replan <= infer_ah` is enforced up
/// front. Episode `i` of a task resets from a seed derived from
/// `(seed, task, i)`, so reports are reproducible and episodes are
/// independent of evaluation order.
pub fn evaluate<P>(
    policy: P,
    tasks: &[TaskId],
    episodes: usize,
    infer_ah: usize,
    replan: usize,
    max_steps: u32,
    seed: u64,
) -> Result<EvalReport>
where
    P: Fn(&EvalObs) -> Result<Vec<[f64; ACTION_DIM]>> + Sync,
{
    if replan < 1 || replan > infer_ah {
        return Err(OwmError::Config(format!(
            "replan {replan} must satisfy 1 <= replan <= infer_ah ({infer_ah})"
        )));
    }
    let jobs: Vec<(TaskId, u64)> = tasks
        .iter()
        .flat_map(|t| (0..episodes as u64).map(move |i| (*t, i)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(task, i)| -> Result<EvalRow> {
            let name = format!("eval/{}", task.name());
            let reset_seed = {
                use rand::Rng;
                rng::stream_indexed(seed, &name, i).random::<u64>()
            };
            let mut state = reset(task, reset_seed);
            let mut tracker = StageTracker::new(task);
            'rollout: while state.step < max_steps {
                let obs = EvalObs {
                    frames: [
                        frame_to_f32(&render(&state, VIEWS[0])),
                        frame_to_f32(&render(&state, VIEWS[1])),
                        frame_to_f32(&render(&state, VIEWS[2])),
                    ],
                    state: state.state_vector(),
                    task,
                };
                let chunk = policy(&obs)?;
                if chunk.len() < infer_ah {
                    return Err(OwmError::Input(format!(
                        "policy returned {} actions, expected at least {infer_ah}",
                        chunk.len()
                    )));
                }
                for action in chunk.iter().take(replan) {
                    state = step(&state, action);
                    tracker.update(&state);
                    if tracker.success() || state.step >= max_steps {
                        break 'rollout;
                    }
                }
            }
            Ok(EvalRow {
                task,
                seed: i,
                success: tracker.success(),
                steps: state.step,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = rows;
    rows.sort_by_key(|r| (r.task.index(), r.seed));
    Ok(EvalReport { rows })
}
