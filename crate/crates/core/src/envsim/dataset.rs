//! Expert demonstration datasets.
//!
//! Episodes are rolled with the scripted expert and written to a single
//! tensor container. Failed attempts are resampled under a fresh derived
//! seed, so every stored episode is a success. Frames are stored as the
//! `u8` palette the renderer emits, which keeps files compact and makes
//! regeneration from the same seed byte-identical.

use std::path::Path;

use rand::Rng;

use super::expert::expert_action;
use super::render::{frame_to_f32, render, View, FRAME_LEN, FRAME_PX, VIEWS};
use super::world::{reset, step, StageTracker, TaskId, WorldState, ACTION_DIM, STATE_DIM};
use crate::container::{ContainerFile, RecordData};
use crate::error::{OwmError, Result};
use crate::rng;

/// Give up on a start placement after this many expert failures; with a
/// working expert a single resample is already rare.
const MAX_ATTEMPTS_PER_EPISODE: u64 = 50;

#[derive(Debug, Clone)]
pub struct EpisodeData {
    pub task: TaskId,
    /// Per view: `len` frames of `FRAME_LEN` palette bytes each.
    pub frames: [Vec<u8>; 3],
    /// Row-major `(len, STATE_DIM)`.
    pub states: Vec<f32>,
    /// Row-major `(len, ACTION_DIM)`.
    pub actions: Vec<f32>,
    pub len: usize,
    pub success: bool,
}

impl EpisodeData {
    pub fn frame_f32(&self, view: View, t: usize) -> Vec<f32> {
        let bytes = &self.frames[view.index()][t * FRAME_LEN..(t + 1) * FRAME_LEN];
        frame_to_f32(bytes)
    }

    pub fn state_row(&self, t: usize) -> &[f32] {
        &self.states[t * STATE_DIM..(t + 1) * STATE_DIM]
    }

    pub fn action_row(&self, t: usize) -> &[f32] {
        &self.actions[t * ACTION_DIM..(t + 1) * ACTION_DIM]
    }
}

fn record_step(ep: &mut EpisodeData, state: &WorldState, action: &[f64; ACTION_DIM]) {
    for view in VIEWS {
        ep.frames[view.index()].extend_from_slice(&render(state, view));
    }
    ep.states
        .extend(state.state_vector().iter().map(|&v| v as f32));
    ep.actions.extend(action.iter().map(|&a| a as f32));
    ep.len += 1;
}

/// Roll the expert from a seeded reset, recording the pre-action frame,
/// state, and action at every step. Returns `None` on timeout.
fn roll_episode(task: TaskId, reset_seed: u64, max_steps: u32) -> Option<EpisodeData> {
    let mut state = reset(task, reset_seed);
    let mut tracker = StageTracker::new(task);
    let mut ep = EpisodeData {
        task,
        frames: [Vec::new(), Vec::new(), Vec::new()],
        states: Vec::new(),
        actions: Vec::new(),
        len: 0,
        success: false,
    };
    for _ in 0..max_steps {
        let action = expert_action(&state, task);
        record_step(&mut ep, &state, &action);
        state = step(&state, &action);
        tracker.update(&state);
        if tracker.success() {
            ep.success = true;
            return Some(ep);
        }
    }
    None
}

/// Generate `episodes_per_task` successful expert episodes per task and
/// write them all to one container at `path`.
pub fn generate_dataset(
    tasks: &[TaskId],
    episodes_per_task: usize,
    max_steps: u32,
    seed: u64,
    path: &Path,
) -> Result<Dataset> {
    if tasks.is_empty() || episodes_per_task == 0 {
        return Err(OwmError::Config(
            "dataset needs at least one task and one episode".into(),
        ));
    }
    let mut episodes = Vec::with_capacity(tasks.len() * episodes_per_task);
    for task in tasks {
        let name = format!("data/{}", task.name());
        let mut attempt = 0u64;
        for _ in 0..episodes_per_task {
            let ep = loop {
                if attempt >= MAX_ATTEMPTS_PER_EPISODE * episodes_per_task as u64 {
                    return Err(OwmError::numeric(
                        "generate_dataset",
                        format!("expert kept failing on task {}", task.name()),
                    ));
                }
                let reset_seed = rng::stream_indexed(seed, &name, attempt).random::<u64>();
                attempt += 1;
                if let Some(ep) = roll_episode(*task, reset_seed, max_steps) {
                    break ep;
                }
            };
            episodes.push(ep);
        }
    }
    let dataset = Dataset { episodes };
    dataset.write_to(path)?;
    Ok(dataset)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub episodes: Vec<EpisodeData>,
}

impl Dataset {
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut file = ContainerFile::new();
        file.push(
            "meta/episodes",
            &[1],
            RecordData::I64(vec![self.episodes.len() as i64]),
        )?;
        for (i, ep) in self.episodes.iter().enumerate() {
            let frame_shape = [ep.len, FRAME_PX, FRAME_PX, 3];
            for view in VIEWS {
                file.push(
                    &format!("ep{i}/{}", view.name()),
                    &frame_shape,
                    RecordData::U8(ep.frames[view.index()].clone()),
                )?;
            }
            file.push(
                &format!("ep{i}/state"),
                &[ep.len, STATE_DIM],
                RecordData::F32(ep.states.clone()),
            )?;
            file.push(
                &format!("ep{i}/action"),
                &[ep.len, ACTION_DIM],
                RecordData::F32(ep.actions.clone()),
            )?;
            file.push(
                &format!("ep{i}/task"),
                &[1],
                RecordData::I64(vec![ep.task.index() as i64]),
            )?;
            file.push(
                &format!("ep{i}/success"),
                &[1],
                RecordData::I64(vec![ep.success as i64]),
            )?;
        }
        file.write_to(path)
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let file = ContainerFile::read_from(path)?;
        let count = file.require_i64_scalar("meta/episodes")? as usize;
        let mut episodes = Vec::with_capacity(count);
        for i in 0..count {
            let mut frames: [Vec<u8>; 3] = [Vec::new(), Vec::new(), Vec::new()];
            let mut len = 0;
            for view in VIEWS {
                let (shape, data) = file.require_u8(&format!("ep{i}/{}", view.name()))?;
                if shape.len() != 4 || shape[1] != FRAME_PX || shape[2] != FRAME_PX || shape[3] != 3
                {
                    return Err(OwmError::Format(format!(
                        "ep{i}/{}: unexpected frame shape {shape:?}",
                        view.name()
                    )));
                }
                len = shape[0];
                frames[view.index()] = data.to_vec();
            }
            let (sshape, states) = file.require_f32(&format!("ep{i}/state"))?;
            let (ashape, actions) = file.require_f32(&format!("ep{i}/action"))?;
            if sshape != [len, STATE_DIM] || ashape != [len, ACTION_DIM] {
                return Err(OwmError::Format(format!(
                    "ep{i}: state/action shapes {sshape:?}/{ashape:?} disagree with {len} frames"
                )));
            }
            let task_idx = file.require_i64_scalar(&format!("ep{i}/task"))?;
            let task = match task_idx {
                0 => TaskId::Push,
                1 => TaskId::PickPlace,
                2 => TaskId::Rearrange,
                other => {
                    return Err(OwmError::Format(format!("ep{i}: bad task index {other}")));
                }
            };
            let success = file.require_i64_scalar(&format!("ep{i}/success"))? != 0;
            episodes.push(EpisodeData {
                task,
                frames,
                states: states.to_vec(),
                actions: actions.to_vec(),
                len,
                success,
            });
        }
        Ok(Dataset { episodes })
    }
}
