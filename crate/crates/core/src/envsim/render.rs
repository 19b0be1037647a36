//! Multi-view rasterizer.
//!
//! Each view is a square window on the unit table sampled at pixel
//! centres, so frames are a pure function of state with no antialias
//! ambiguity. The full view covers the whole table; the two crop views
//! stay centred on the gripper at 2x and 4x zoom. Goal zones are not
//! drawn: the task token tells the policy which fixed zones apply.
//!
//! Pixels are a palette of `k/255` grays and primaries, stored `u8`
//! row-major HWC, with an exact `u8 -> f32` conversion for model input.

use super::world::WorldState;
use crate::error::{OwmError, Result};

pub const FRAME_PX: usize = 32;
pub const FRAME_CHANNELS: usize = 3;
pub const FRAME_LEN: usize = FRAME_PX * FRAME_PX * FRAME_CHANNELS;

const BACKGROUND: [u8; 3] = [40, 40, 40];
const OBJECT_COLORS: [[u8; 3]; 3] = [[200, 60, 60], [60, 180, 75], [65, 105, 225]];
const GRIPPER_OPEN: [u8; 3] = [230, 230, 230];
const GRIPPER_CLOSED: [u8; 3] = [255, 200, 60];

const OBJECT_HALF: f64 = 0.04;
const GRIPPER_HALF: f64 = 0.035;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    /// Full table.
    R,
    /// Gripper-centred crop, 2x zoom.
    W1,
    /// Gripper-centred crop, 4x zoom.
    W2,
}

pub const VIEWS: [View; 3] = [View::R, View::W1, View::W2];

impl View {
    pub fn name(&self) -> &'static str {
        match self {
            View::R => "r",
            View::W1 => "w1",
            View::W2 => "w2",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "r" => Ok(View::R),
            "w1" => Ok(View::W1),
            "w2" => Ok(View::W2),
            other => Err(OwmError::Config(format!("unknown view '{other}'"))),
        }
    }

    pub fn index(&self) -> usize {
        match self {
            View::R => 0,
            View::W1 => 1,
            View::W2 => 2,
        }
    }

    fn window(&self, state: &WorldState) -> ([f64; 2], f64) {
        match self {
            View::R => ([0.5, 0.5], 0.5),
            View::W1 => (state.gripper, 0.25),
            View::W2 => (state.gripper, 0.125),
        }
    }
}

/// Axis-aligned square with a solid colour; later shapes draw on top.
#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub center: [f64; 2],
    pub half: f64,
    pub color: [u8; 3],
}

impl Shape {
    fn contains(&self, p: [f64; 2]) -> bool {
        (p[0] - self.center[0]).abs() <= self.half && (p[1] - self.center[1]).abs() <= self.half
    }
}

/// Sample a window at pixel centres. An empty shape list yields a
/// background-only frame. Row 0 is the top of the window (largest y).
pub fn rasterize(shapes: &[Shape], center: [f64; 2], half: f64) -> Vec<u8> {
    let mut frame = vec![0u8; FRAME_LEN];
    let pitch = 2.0 * half / FRAME_PX as f64;
    for row in 0..FRAME_PX {
        let y = center[1] + half - (row as f64 + 0.5) * pitch;
        for col in 0..FRAME_PX {
            let x = center[0] - half + (col as f64 + 0.5) * pitch;
            let color = shapes
                .iter()
                .rev()
                .find(|s| s.contains([x, y]))
                .map_or(BACKGROUND, |s| s.color);
            let at = (row * FRAME_PX + col) * FRAME_CHANNELS;
            frame[at..at + 3].copy_from_slice(&color);
        }
    }
    frame
}

fn scene_shapes(state: &WorldState) -> Vec<Shape> {
    let mut shapes: Vec<Shape> = state
        .objects
        .iter()
        .enumerate()
        .map(|(i, p)| Shape {
            center: *p,
            half: OBJECT_HALF,
            color: OBJECT_COLORS[i % OBJECT_COLORS.len()],
        })
        .collect();
    shapes.push(Shape {
        center: state.gripper,
        half: GRIPPER_HALF,
        color: if state.closed {
            GRIPPER_CLOSED
        } else {
            GRIPPER_OPEN
        },
    });
    shapes
}

/// Render one view of the state as `FRAME_PX x FRAME_PX x 3` bytes.
pub fn render(state: &WorldState, view: View) -> Vec<u8> {
    let (center, half) = view.window(state);
    rasterize(&scene_shapes(state), center, half)
}

/// Exact palette conversion for model input: byte `k` becomes `k/255`.
pub fn frame_to_f32(frame: &[u8]) -> Vec<f32> {
    frame.iter().map(|&k| k as f32 / 255.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::world::{reset, TaskId};

    fn color_count(frame: &[u8], color: [u8; 3]) -> usize {
        frame.chunks_exact(3).filter(|px| **px == color).count()
    }

    #[test]
    fn empty_scene_is_background_only() {
        let frame = rasterize(&[], [0.5, 0.5], 0.5);
        assert_eq!(frame.len(), FRAME_LEN);
        assert!(frame.chunks_exact(3).all(|px| px == BACKGROUND));
    }

    #[test]
    fn full_view_shows_every_object_and_the_gripper() {
        let state = reset(TaskId::Rearrange, 3);
        let frame = render(&state, View::R);
        for color in OBJECT_COLORS {
            assert!(color_count(&frame, color) > 0, "{color:?} missing");
        }
        assert!(color_count(&frame, GRIPPER_OPEN) > 0);
    }

    #[test]
    fn crops_are_gripper_centred() {
        let mut state = reset(TaskId::Push, 5);
        state.gripper = [0.3, 0.7];
        for view in [View::W1, View::W2] {
            let frame = render(&state, view);
            let mid = (FRAME_PX / 2 * FRAME_PX + FRAME_PX / 2) * 3;
            assert_eq!(&frame[mid..mid + 3], &GRIPPER_OPEN, "{view:?}");
        }
    }

    #[test]
    fn zoom_scales_apparent_object_size() {
        let mut state = reset(TaskId::Push, 6);
        // Put the object right next to the gripper so every view sees it.
        state.gripper = [0.5, 0.5];
        state.objects[0] = [0.55, 0.5];
        let sizes: Vec<usize> = VIEWS
            .iter()
            .map(|v| color_count(&render(&state, *v), OBJECT_COLORS[0]))
            .collect();
        assert!(sizes[0] > 0 && sizes[1] > sizes[0] && sizes[2] > sizes[1], "{sizes:?}");
    }

    #[test]
    fn tight_crop_excludes_distant_objects() {
        let mut state = reset(TaskId::Push, 7);
        state.gripper = [0.2, 0.2];
        state.objects[0] = [0.8, 0.8];
        let frame = render(&state, View::W2);
        assert_eq!(color_count(&frame, OBJECT_COLORS[0]), 0);
    }

    #[test]
    fn grip_state_changes_gripper_colour() {
        let mut state = reset(TaskId::Push, 8);
        let open = render(&state, View::W1);
        state.closed = true;
        let closed = render(&state, View::W1);
        assert!(color_count(&open, GRIPPER_OPEN) > 0);
        assert_eq!(color_count(&open, GRIPPER_CLOSED), 0);
        assert!(color_count(&closed, GRIPPER_CLOSED) > 0);
        assert_eq!(color_count(&closed, GRIPPER_OPEN), 0);
    }

    #[test]
    fn rendering_is_deterministic() {
        let state = reset(TaskId::Rearrange, 9);
        for view in VIEWS {
            assert_eq!(render(&state, view), render(&state, view));
        }
    }

    #[test]
    fn f32_conversion_is_exact_palette_division() {
        let state = reset(TaskId::Push, 10);
        let frame = render(&state, View::R);
        let floats = frame_to_f32(&frame);
        for (k, f) in frame.iter().zip(&floats) {
            assert_eq!(*f, *k as f32 / 255.0);
        }
    }
}
