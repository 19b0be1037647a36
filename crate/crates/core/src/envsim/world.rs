//! Kinematic tabletop state and transition rules.
//!
//! The table is the unit square. A point gripper moves by a clamped
//! displacement each step; while the grip is closed, the nearest object
//! within `GRASP_RADIUS` is displaced by the same amount. There are no
//! dynamics beyond that rule, so the transition is a pure function of
//! `(state, action)` and every rollout is exactly reproducible.

use rand::Rng;

use crate::error::{OwmError, Result};
use crate::rng;

/// Action layout: `[dx, dy, grip, aux]`, each channel in `[-1, 1]`.
pub const ACTION_DIM: usize = 4;
/// State layout: gripper x/y, grip flag, then `MAX_OBJECTS` object x/y pairs.
pub const STATE_DIM: usize = 3 + 2 * MAX_OBJECTS;
/// Fixed object-slot count; tasks with fewer objects pad with `ABSENT`.
pub const MAX_OBJECTS: usize = 3;
/// Sentinel coordinate for unused object slots in the state vector.
pub const ABSENT: f64 = -1.0;

/// Distance the gripper travels for a saturated move channel.
pub const MOVE_SCALE: f64 = 0.1;
/// A closed gripper drags the nearest object within this distance.
pub const GRASP_RADIUS: f64 = 0.06;
/// An object is placed once within this distance of its zone centre.
pub const ZONE_TOL: f64 = 0.08;

/// Spawn margin keeping initial placements away from the table edge.
const SPAWN_MIN: f64 = 0.15;
const SPAWN_MAX: f64 = 0.85;
/// Minimum spawn distance between objects, and from an object to its
/// own goal zone so no stage starts satisfied.
const SPAWN_SEP: f64 = 0.12;
const SPAWN_GOAL_CLEAR: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskId {
    Push,
    PickPlace,
    Rearrange,
}

impl TaskId {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "push" => Ok(TaskId::Push),
            "pick_place" => Ok(TaskId::PickPlace),
            "rearrange" => Ok(TaskId::Rearrange),
            other => Err(OwmError::Config(format!("unknown task '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskId::Push => "push",
            TaskId::PickPlace => "pick_place",
            TaskId::Rearrange => "rearrange",
        }
    }

    pub fn index(&self) -> usize {
        match self {
            TaskId::Push => 0,
            TaskId::PickPlace => 1,
            TaskId::Rearrange => 2,
        }
    }

    pub fn object_count(&self) -> usize {
        match self {
            TaskId::Push => 1,
            TaskId::PickPlace => 1,
            TaskId::Rearrange => 3,
        }
    }

    /// Goal zone centre for each placed object, fixed per task.
    pub fn zone(&self, object: usize) -> [f64; 2] {
        match self {
            TaskId::Push => [0.8, 0.5],
            TaskId::PickPlace => [0.5, 0.8],
            TaskId::Rearrange => [[0.2, 0.8], [0.5, 0.8], [0.8, 0.8]][object],
        }
    }

    /// Ordered completion stages. Short tasks have exactly one stage,
    /// long tasks at least three.
    pub fn stages(&self) -> Vec<StagePredicate> {
        match self {
            TaskId::Push => vec![StagePredicate::Placed { object: 0 }],
            TaskId::PickPlace => vec![
                StagePredicate::Holding { object: 0 },
                StagePredicate::Placed { object: 0 },
            ],
            TaskId::Rearrange => (0..3)
                .map(|object| StagePredicate::Placed { object })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StagePredicate {
    /// The grip is closed with the object in grasp range.
    Holding { object: usize },
    /// The object is within `ZONE_TOL` of its task zone.
    Placed { object: usize },
}

impl StagePredicate {
    pub fn holds(&self, state: &WorldState) -> bool {
        match *self {
            StagePredicate::Holding { object } => {
                state.closed && dist(state.gripper, state.objects[object]) <= GRASP_RADIUS
            }
            StagePredicate::Placed { object } => {
                dist(state.objects[object], state.task.zone(object)) <= ZONE_TOL
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub gripper: [f64; 2],
    pub closed: bool,
    pub objects: Vec<[f64; 2]>,
    pub task: TaskId,
    pub step: u32,
}

impl WorldState {
    /// Flat observation vector of length `STATE_DIM`; unused object
    /// slots hold the `ABSENT` sentinel.
    pub fn state_vector(&self) -> Vec<f64> {
        let mut v = vec![
            self.gripper[0],
            self.gripper[1],
            if self.closed { 1.0 } else { 0.0 },
        ];
        for slot in 0..MAX_OBJECTS {
            match self.objects.get(slot) {
                Some(p) => v.extend_from_slice(p),
                None => v.extend_from_slice(&[ABSENT, ABSENT]),
            }
        }
        v
    }

    /// Rebuild a state from its observation vector. The step counter is
    /// not part of the observation and restarts at zero.
    pub fn from_state_vector(task: TaskId, v: &[f64]) -> Result<Self> {
        if v.len() != STATE_DIM {
            return Err(OwmError::Input(format!(
                "state vector has {} entries, expected {STATE_DIM}",
                v.len()
            )));
        }
        let objects = (0..task.object_count())
            .map(|i| [v[3 + 2 * i], v[4 + 2 * i]])
            .collect();
        Ok(WorldState {
            gripper: [v[0], v[1]],
            closed: v[2] > 0.5,
            objects,
            task,
            step: 0,
        })
    }
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn clamp01(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

/// Sample a fresh episode start. Object placements avoid the table
/// edge, each other, and their own goal zones; distinct seeds give
/// distinct placements.
pub fn reset(task: TaskId, seed: u64) -> WorldState {
    let mut r = rng::stream(seed, "env/reset");
    let span = SPAWN_MAX - SPAWN_MIN;
    let draw = |r: &mut rand_chacha::ChaCha8Rng| {
        [
            SPAWN_MIN + span * r.random::<f64>(),
            SPAWN_MIN + span * r.random::<f64>(),
        ]
    };
    let mut objects: Vec<[f64; 2]> = Vec::with_capacity(task.object_count());
    for i in 0..task.object_count() {
        loop {
            let p = draw(&mut r);
            let clear_goal = dist(p, task.zone(i)) >= SPAWN_GOAL_CLEAR;
            let clear_others = objects.iter().all(|q| dist(p, *q) >= SPAWN_SEP);
            if clear_goal && clear_others {
                objects.push(p);
                break;
            }
        }
    }
    let gripper = draw(&mut r);
    WorldState {
        gripper,
        closed: false,
        objects,
        task,
        step: 0,
    }
}

/// The object a closed grip is dragging: the nearest one within
/// `GRASP_RADIUS`, ties to the lowest index. This is the single source
/// of truth shared by the transition and the expert.
pub fn held_object(state: &WorldState) -> Option<usize> {
    if !state.closed {
        return None;
    }
    state
        .objects
        .iter()
        .enumerate()
        .filter(|(_, p)| dist(state.gripper, **p) <= GRASP_RADIUS)
        .min_by(|(_, a), (_, b)| {
            dist(state.gripper, **a)
                .partial_cmp(&dist(state.gripper, **b))
                .unwrap()
        })
        .map(|(i, _)| i)
}

/// Advance one step. Move channels are clamped to `[-1, 1]` and scaled
/// by `MOVE_SCALE`; the gripper and any dragged object are clamped to
/// the table, and the dragged object sees the same effective
/// displacement as the gripper. A grasp drags only from the step after
/// it closes.
pub fn step(state: &WorldState, action: &[f64; ACTION_DIM]) -> WorldState {
    let dx = action[0].clamp(-1.0, 1.0) * MOVE_SCALE;
    let dy = action[1].clamp(-1.0, 1.0) * MOVE_SCALE;
    let closed = action[2] > 0.0;

    let new_gripper = clamp01([state.gripper[0] + dx, state.gripper[1] + dy]);
    let eff = [
        new_gripper[0] - state.gripper[0],
        new_gripper[1] - state.gripper[1],
    ];

    let mut objects = state.objects.clone();
    if closed {
        if let Some(i) = held_object(state) {
            objects[i] = clamp01([objects[i][0] + eff[0], objects[i][1] + eff[1]]);
        }
    }

    WorldState {
        gripper: new_gripper,
        closed,
        objects,
        task: state.task,
        step: state.step + 1,
    }
}

/// Monotone success accounting: stages complete strictly in order and
/// never revert, so a stage satisfied once stays counted even if the
/// underlying predicate later turns false (a grasp that is released).
#[derive(Debug, Clone)]
pub struct StageTracker {
    stages: Vec<StagePredicate>,
    done: usize,
}

impl StageTracker {
    pub fn new(task: TaskId) -> Self {
        StageTracker {
            stages: task.stages(),
            done: 0,
        }
    }

    pub fn update(&mut self, state: &WorldState) {
        while self.done < self.stages.len() && self.stages[self.done].holds(state) {
            self.done += 1;
        }
    }

    pub fn done(&self) -> usize {
        self.done
    }

    pub fn success(&self) -> bool {
        self.done == self.stages.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_counts_give_horizon_contrast() {
        assert_eq!(TaskId::Push.stages().len(), 1);
        assert_eq!(TaskId::PickPlace.stages().len(), 2);
        assert!(TaskId::Rearrange.stages().len() >= 3);
    }

    #[test]
    fn task_names_round_trip() {
        for task in [TaskId::Push, TaskId::PickPlace, TaskId::Rearrange] {
            assert_eq!(TaskId::from_name(task.name()).unwrap(), task);
        }
        assert!(TaskId::from_name("stack").is_err());
    }

    #[test]
    fn reset_is_deterministic_and_seeds_differ() {
        let a = reset(TaskId::Rearrange, 7);
        let b = reset(TaskId::Rearrange, 7);
        let c = reset(TaskId::Rearrange, 8);
        assert_eq!(a, b);
        assert_ne!(a.objects, c.objects);
        assert_eq!(a.objects.len(), 3);
        for (i, p) in a.objects.iter().enumerate() {
            assert!(dist(*p, TaskId::Rearrange.zone(i)) >= SPAWN_GOAL_CLEAR);
            for q in &a.objects[..i] {
                assert!(dist(*p, *q) >= SPAWN_SEP);
            }
        }
    }

    #[test]
    fn no_stage_starts_satisfied() {
        for task in [TaskId::Push, TaskId::PickPlace, TaskId::Rearrange] {
            for seed in 0..50 {
                let s = reset(task, seed);
                for stage in task.stages() {
                    assert!(!stage.holds(&s), "{task:?} seed {seed}");
                }
            }
        }
    }

    #[test]
    fn grasped_object_tracks_gripper_displacement() {
        let mut s = reset(TaskId::Push, 3);
        s.gripper = s.objects[0];
        // Close on the object, then move; the object sees the same delta.
        let s = step(&s, &[0.0, 0.0, 1.0, 0.0]);
        let before = s.objects[0];
        let s2 = step(&s, &[0.5, -0.25, 1.0, 0.0]);
        assert!((s2.objects[0][0] - (before[0] + 0.05)).abs() < 1e-12);
        assert!((s2.objects[0][1] - (before[1] - 0.025)).abs() < 1e-12);
    }

    #[test]
    fn open_gripper_never_moves_objects() {
        let mut s = reset(TaskId::Push, 4);
        s.gripper = s.objects[0];
        let before = s.objects[0];
        let s2 = step(&s, &[1.0, 1.0, -1.0, 0.0]);
        assert_eq!(s2.objects[0], before);
    }

    #[test]
    fn positions_stay_on_table_under_saturated_actions() {
        let mut s = reset(TaskId::Push, 5);
        s.gripper = s.objects[0];
        let mut s = step(&s, &[0.0, 0.0, 1.0, 0.0]);
        for _ in 0..40 {
            s = step(&s, &[1.0, 1.0, 1.0, 0.0]);
            for p in std::iter::once(&s.gripper).chain(s.objects.iter()) {
                assert!(p[0] >= 0.0 && p[0] <= 1.0 && p[1] >= 0.0 && p[1] <= 1.0);
            }
        }
        // Both pinned at the corner; the dragged object kept pace.
        assert!(dist(s.gripper, s.objects[0]) <= GRASP_RADIUS);
    }

    #[test]
    fn clamped_gripper_applies_effective_delta_to_object() {
        let s = WorldState {
            gripper: [0.98, 0.5],
            closed: true,
            objects: vec![[0.95, 0.5]],
            task: TaskId::Push,
            step: 0,
        };
        let s2 = step(&s, &[1.0, 0.0, 1.0, 0.0]);
        // Gripper only advanced 0.02 to the wall; so did the object.
        assert!((s2.gripper[0] - 1.0).abs() < 1e-12);
        assert!((s2.objects[0][0] - 0.97).abs() < 1e-12);
    }

    #[test]
    fn grip_closes_on_nearest_object_only() {
        let s = WorldState {
            gripper: [0.5, 0.5],
            closed: true,
            objects: vec![[0.52, 0.5], [0.46, 0.5], [0.9, 0.9]],
            task: TaskId::Rearrange,
            step: 0,
        };
        assert_eq!(held_object(&s), Some(0), "object 0 is nearest in range");
        let s2 = step(&s, &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(s2.objects[0], [0.52, 0.6], "nearest object is dragged");
        assert_eq!(s2.objects[1], [0.46, 0.5], "farther in-range object stays");
        assert_eq!(s2.objects[2], [0.9, 0.9]);
    }

    #[test]
    fn state_vector_layout_and_padding() {
        let s = reset(TaskId::Push, 11);
        let v = s.state_vector();
        assert_eq!(v.len(), STATE_DIM);
        assert_eq!(v[0], s.gripper[0]);
        assert_eq!(v[2], 0.0);
        assert_eq!(v[3], s.objects[0][0]);
        assert_eq!(&v[5..], &[ABSENT, ABSENT, ABSENT, ABSENT]);
    }

    #[test]
    fn tracker_is_monotone_across_release() {
        let task = TaskId::PickPlace;
        let mut s = reset(task, 2);
        let mut tracker = StageTracker::new(task);
        s.gripper = s.objects[0];
        let s = step(&s, &[0.0, 0.0, 1.0, 0.0]);
        tracker.update(&s);
        assert_eq!(tracker.done(), 1, "grasp stage counted");
        let s = step(&s, &[0.0, 0.0, -1.0, 0.0]);
        tracker.update(&s);
        assert_eq!(tracker.done(), 1, "release does not revert the stage");
        assert!(!tracker.success());
    }

    #[test]
    fn transition_is_pure() {
        let s = reset(TaskId::Rearrange, 9);
        let a = [0.3, -0.7, 1.0, 0.2];
        assert_eq!(step(&s, &a), step(&s, &a));
        assert_eq!(s.step + 1, step(&s, &a).step);
    }
}
