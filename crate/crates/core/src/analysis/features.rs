//! Feature extraction for the separability probes: one frame per
//! successful episode at a shared relative timestep, featurized at two
//! locations. "Before pooling" is the encoder token grid summarized by
//! the per-sample token mean; "after pooling" is the world-token output,
//! mean over the k slots when k > 1. Both concatenate the three views, so
//! the regimes are compared at equal dimensionality.

use super::fisher::LabeledFeatures;
use crate::encoder::patchify;
use crate::envsim::render::VIEWS;
use crate::envsim::Dataset;
use crate::error::{OwmError, Result};
use crate::model::Policy;
use crate::numerics::{Array, Tape};

#[derive(Debug)]
pub struct ProbeFeatures {
    pub before: LabeledFeatures,
    pub after: LabeledFeatures,
    /// Task name per distinct label value, aligned with label order.
    pub class_names: Vec<String>,
}

pub fn probe_features(policy: &Policy<f32>, data: &Dataset, rel_t: f64) -> Result<ProbeFeatures> {
    if !(0.0..=1.0).contains(&rel_t) {
        return Err(OwmError::Config(format!("relative timestep {rel_t} outside [0, 1]")));
    }
    let cfg = &policy.cfg;
    let picks: Vec<(usize, usize)> = data
        .episodes
        .iter()
        .enumerate()
        .filter(|(_, ep)| ep.success)
        .map(|(i, ep)| (i, (rel_t * (ep.len - 1) as f64).round() as usize))
        .collect();
    if picks.is_empty() {
        return Err(OwmError::Input("no successful episodes to probe".to_string()));
    }
    let e = picks.len();
    let labels: Vec<usize> = picks.iter().map(|&(i, _)| data.episodes[i].task.index()).collect();

    let mut tape = Tape::<f32>::new();
    let tids = policy.bind(&mut tape, false);
    let mut patch_ids = Vec::with_capacity(3);
    for view in VIEWS {
        let mut flat = Vec::with_capacity(e * cfg.frame_px * cfg.frame_px * 3);
        for &(i, t) in &picks {
            flat.extend(data.episodes[i].frame_f32(view, t));
        }
        let frames = Array::from_vec(&[e, cfg.frame_px, cfg.frame_px, 3], flat)?;
        patch_ids.push(tape.constant(patchify(&frames, cfg.patch)?));
    }
    let patch_ids: [_; 3] = [patch_ids[0], patch_ids[1], patch_ids[2]];

    // Before pooling: encoder grid (E, N, D), mean over the N tokens.
    let n_tokens = cfg.tokens_per_frame();
    let mut before_cols = Vec::with_capacity(3);
    for (v, &pid) in patch_ids.iter().enumerate() {
        let toks = crate::encoder::encode(&mut tape, &tids.enc, v, pid, cfg.enc_heads)?;
        let summed = tape.sum_axis(toks, 1)?;
        before_cols.push(tape.affine(summed, 1.0 / n_tokens as f64, 0.0)?);
    }

    // After pooling: world tokens (E, 1, k, D), mean over the k slots.
    let world = policy.world_tokens(&mut tape, &tids, &patch_ids, 1)?;
    let mut after_cols = Vec::with_capacity(3);
    for w in &world {
        let flat = tape.reshape(w.tokens, &[e, cfg.tokens_per_view, cfg.d_model])?;
        let summed = tape.sum_axis(flat, 1)?;
        after_cols.push(tape.affine(summed, 1.0 / cfg.tokens_per_view as f64, 0.0)?);
    }

    let gather = |tape: &Tape<f32>, cols: &[crate::numerics::TensorId]| -> Result<Array<f64>> {
        let views: Vec<&Array<f32>> = cols.iter().map(|&c| tape.value(c)).collect();
        let d = cfg.d_model;
        let mut out = Vec::with_capacity(e * 3 * d);
        for i in 0..e {
            for view in &views {
                out.extend(view.data()[i * d..(i + 1) * d].iter().map(|&x| x as f64));
            }
        }
        Array::from_vec(&[e, 3 * d], out)
    };
    let before = gather(&tape, &before_cols)?;
    let after = gather(&tape, &after_cols)?;

    let mut class_names: Vec<(usize, String)> = Vec::new();
    for &(i, _) in &picks {
        let task = data.episodes[i].task;
        if !class_names.iter().any(|(l, _)| *l == task.index()) {
            class_names.push((task.index(), task.name().to_string()));
        }
    }
    class_names.sort_unstable_by_key(|(l, _)| *l);

    Ok(ProbeFeatures {
        before: LabeledFeatures::new(before, labels.clone())?,
        after: LabeledFeatures::new(after, labels)?,
        class_names: class_names.into_iter().map(|(_, n)| n).collect(),
    })
}
