//! Multi-token bottleneck for the token-budget sweep.
//!
//! Pooling proper emits one token per view. Intermediate widths keep the
//! k tokens with the largest fused attention weight instead of taking
//! the convex reduction: each kept token is scaled by its weight
//! renormalized over the kept set, so the bottleneck degrades gracefully
//! to the hard version of the k=1 operator and to the full weighted
//! token set at k=N. Selection indices are read from current values and
//! enter the graph as constants, like an argmax; gradients flow through
//! the kept tokens and their weights.

use crate::error::{OwmError, Result};
use crate::numerics::{Scalar, Tape, TensorId};
use crate::pooling::WorldToken;

/// Token indices ranked by weight descending, ties to the lower index.
fn ranked_indices<S: Scalar>(weights: &[S]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&i, &j| {
        weights[j]
            .to_f64()
            .partial_cmp(&weights[i].to_f64())
            .unwrap()
            .then(i.cmp(&j))
    });
    idx
}

/// Reduce a (B, T, N, D) token grid to its top-k tokens under per-token
/// weights (B, T, N), renormalized over the kept set, output (B, T, k, D)
/// in rank order.
pub fn top_k_world_tokens<S: Scalar>(
    tape: &mut Tape<S>,
    grid: TensorId,
    weights: TensorId,
    k: usize,
    view: usize,
) -> Result<WorldToken> {
    let gshape = tape.shape(grid).to_vec();
    let [b, t, n, _d] = match gshape[..] {
        [b, t, n, d] => [b, t, n, d],
        _ => {
            return Err(OwmError::shape(
                "top_k_world_tokens",
                format!("grid must be (B, T, N, D), got {gshape:?}"),
            ));
        }
    };
    let wshape = tape.shape(weights).to_vec();
    if wshape != [b, t, n] {
        return Err(OwmError::shape(
            "top_k_world_tokens",
            format!("weights {wshape:?} do not match grid ({b}, {t}, {n}, _)"),
        ));
    }
    if k == 0 || k > n {
        return Err(OwmError::Config(format!(
            "top_k_world_tokens: k = {k} outside 1..={n}"
        )));
    }

    // Selection is per sample and per frame; read it off the values.
    let wvals = tape.value(weights).data().to_vec();
    let mut rows = Vec::with_capacity(b);
    for bi in 0..b {
        let mut frames = Vec::with_capacity(t);
        for ti in 0..t {
            let at = (bi * t + ti) * n;
            let idx: Vec<usize> = ranked_indices(&wvals[at..at + n])[..k].to_vec();

            let g_b = tape.slice(grid, 0, bi, 1)?;
            let g_bt = tape.slice(g_b, 1, ti, 1)?;
            let w_b = tape.slice(weights, 0, bi, 1)?;
            let w_bt = tape.slice(w_b, 1, ti, 1)?;
            let kept = tape.gather(g_bt, 2, k, &idx)?;
            let w_kept = tape.gather(w_bt, 2, k, &idx)?;
            let total = tape.sum_axis(w_kept, 2)?;
            let renorm = tape.div(w_kept, total)?;
            let renorm = tape.reshape(renorm, &[1, 1, k, 1])?;
            frames.push(tape.mul(kept, renorm)?);
        }
        rows.push(if frames.len() == 1 {
            frames[0]
        } else {
            tape.concat(&frames, 1)?
        });
    }
    let tokens = if rows.len() == 1 {
        rows[0]
    } else {
        tape.concat(&rows, 0)?
    };
    Ok(WorldToken { tokens, view })
}
