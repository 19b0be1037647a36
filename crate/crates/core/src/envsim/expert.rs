//! Scripted proportional expert.
//!
//! The expert is a pure function of the current state: it finds the
//! first object whose placement predicate is unsatisfied, grasps it,
//! drags it to its zone, and releases. Displacement channels are the
//! clamped proportional error, so the action goes to zero as the
//! gripper converges on its target.
//!
//! The grip is judged with the same `held_object` rule the transition
//! uses, and it only closes once the target is the nearest object in
//! range; since the proportional approach lands exactly on the target,
//! an established grasp has zero offset and can never be stolen by a
//! bystander object mid-drag.

use super::world::{
    dist, held_object, StagePredicate, TaskId, WorldState, ACTION_DIM, GRASP_RADIUS, MOVE_SCALE,
    ZONE_TOL,
};

/// Close once comfortably inside grasp range, release once comfortably
/// inside the zone, so the corresponding predicates hold with margin.
const GRASP_APPROACH: f64 = GRASP_RADIUS * 0.6;
const RELEASE_MARGIN: f64 = ZONE_TOL * 0.6;

fn move_toward(from: [f64; 2], to: [f64; 2]) -> (f64, f64) {
    (
        ((to[0] - from[0]) / MOVE_SCALE).clamp(-1.0, 1.0),
        ((to[1] - from[1]) / MOVE_SCALE).clamp(-1.0, 1.0),
    )
}

pub fn expert_action(state: &WorldState, task: TaskId) -> [f64; ACTION_DIM] {
    let pending = task.stages().into_iter().find_map(|stage| match stage {
        StagePredicate::Placed { object } if !stage.holds(state) => Some(object),
        _ => None,
    });
    let Some(object) = pending else {
        return [0.0, 0.0, -1.0, 0.0];
    };

    let obj = state.objects[object];
    if held_object(state) == Some(object) {
        if dist(obj, task.zone(object)) <= RELEASE_MARGIN {
            return [0.0, 0.0, -1.0, 0.0];
        }
        let (dx, dy) = move_toward(state.gripper, task.zone(object));
        return [dx, dy, 1.0, 0.0];
    }
    if state.closed {
        // Closed on the wrong object or on nothing; open and re-approach.
        return [0.0, 0.0, -1.0, 0.0];
    }
    let nearest_if_closed = held_object(&WorldState {
        closed: true,
        ..state.clone()
    });
    if dist(state.gripper, obj) <= GRASP_APPROACH && nearest_if_closed == Some(object) {
        return [0.0, 0.0, 1.0, 0.0];
    }
    let (dx, dy) = move_toward(state.gripper, obj);
    [dx, dy, -1.0, 0.0]
}

/// Roll the expert until success or `max_steps`. Returns the step
/// count at success, or `None` on timeout.
pub fn run_expert(task: TaskId, seed: u64, max_steps: u32) -> Option<u32> {
    let mut state = super::world::reset(task, seed);
    let mut tracker = super::world::StageTracker::new(task);
    for _ in 0..max_steps {
        let action = expert_action(&state, task);
        state = super::world::step(&state, &action);
        tracker.update(&state);
        if tracker.success() {
            return Some(state.step);
        }
    }
    None
}
