//! Adaptive attention pooling: compresses the N visual tokens of a view into
//! a single world token per frame.
//!
//! Stage one scores every token under three branches (max over channels, sum
//! over channels, a small learned MLP per view) and turns each branch's
//! scores into a temperature softmax over tokens. Stage two pools the tokens
//! per branch and fuses the branch pools with a learnable convex combination
//! `beta = softmax(alpha / fusion_tau)`.
//!
//! Output is always one token per frame. Wider bottlenecks for sweep
//! purposes are built downstream by selecting top-k weighted tokens; see the
//! analysis module.

use rand::Rng;

use crate::config::PoolingBranch;
use crate::encoder::init_normal;
use crate::error::{OwmError, Result};
use crate::numerics::{Array, Scalar, Tape, TensorId};

/// Token-ranking rule of one pooling branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoringStrategy {
    /// Largest channel value per token.
    Max,
    /// Channel sum per token.
    Sum,
    /// Learned per-view scorer MLP.
    Learn,
}

/// Per-view scorer MLP: D -> D/2 -> GELU -> 1. The output layer starts at
/// zero so the learned branch begins as uniform attention over tokens.
#[derive(Debug, Clone)]
pub struct ScorerParams<S> {
    pub w1: Array<S>,
    pub b1: Array<S>,
    pub w2: Array<S>,
    pub b2: Array<S>,
}

pub struct ScorerTids {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

impl<S: Scalar> ScorerParams<S> {
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        let hidden = (d / 2).max(1);
        ScorerParams {
            w1: init_normal(&[d, hidden], 1.0 / (d as f64).sqrt(), rng),
            b1: Array::zeros(&[hidden]),
            w2: Array::zeros(&[hidden, 1]),
            b2: Array::zeros(&[1]),
        }
    }

    pub fn arrays(&self, prefix: &str) -> Vec<(String, &Array<S>)> {
        vec![
            (format!("{prefix}/w1"), &self.w1),
            (format!("{prefix}/b1"), &self.b1),
            (format!("{prefix}/w2"), &self.w2),
            (format!("{prefix}/b2"), &self.b2),
        ]
    }

    pub fn arrays_mut(&mut self, prefix: &str) -> Vec<(String, &mut Array<S>)> {
        vec![
            (format!("{prefix}/w1"), &mut self.w1),
            (format!("{prefix}/b1"), &mut self.b1),
            (format!("{prefix}/w2"), &mut self.w2),
            (format!("{prefix}/b2"), &mut self.b2),
        ]
    }

    /// Field order must match `arrays`.
    pub fn wire(ids: &mut impl Iterator<Item = TensorId>) -> ScorerTids {
        ScorerTids {
            w1: ids.next().expect("w1 id"),
            b1: ids.next().expect("b1 id"),
            w2: ids.next().expect("w2 id"),
            b2: ids.next().expect("b2 id"),
        }
    }
}

/// Trainable pooling state: one scorer per view plus the fusion logits
/// `alpha`, indexed in branch order (max, sum, learn). Alpha starts at zero,
/// which makes the initial fusion uniform over branches.
#[derive(Debug, Clone)]
pub struct PoolingParams<S> {
    pub scorers: Vec<ScorerParams<S>>,
    pub alpha: Array<S>,
}

pub struct PoolingTids {
    pub scorers: Vec<ScorerTids>,
    pub alpha: TensorId,
}

impl<S: Scalar> PoolingParams<S> {
    pub fn init(d: usize, views: usize, rng: &mut impl Rng) -> Self {
        PoolingParams {
            scorers: (0..views).map(|_| ScorerParams::init(d, rng)).collect(),
            alpha: Array::zeros(&[3]),
        }
    }

    pub fn arrays(&self) -> Vec<(String, &Array<S>)> {
        let mut out = Vec::new();
        for (v, s) in self.scorers.iter().enumerate() {
            out.extend(s.arrays(&format!("pool/v{v}")));
        }
        out.push(("pool/alpha".to_string(), &self.alpha));
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<(String, &mut Array<S>)> {
        let mut out = Vec::new();
        for (v, s) in self.scorers.iter_mut().enumerate() {
            out.extend(s.arrays_mut(&format!("pool/v{v}")));
        }
        out.push(("pool/alpha".to_string(), &mut self.alpha));
        out
    }

    pub fn wire(views: usize, ids: &mut impl Iterator<Item = TensorId>) -> PoolingTids {
        let scorers = (0..views).map(|_| ScorerParams::<S>::wire(ids)).collect();
        PoolingTids { scorers, alpha: ids.next().expect("alpha id") }
    }

    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> PoolingTids {
        let mut ids = self
            .arrays()
            .into_iter()
            .map(|(_, a)| if trainable { tape.input(a.clone()) } else { tape.constant(a.clone()) })
            .collect::<Vec<_>>()
            .into_iter();
        Self::wire(self.scorers.len(), &mut ids)
    }
}

/// Per-branch pooled tokens of one view, each (B, T, D).
pub struct BranchPools {
    pub p_max: TensorId,
    pub p_sum: TensorId,
    pub p_learn: TensorId,
}

/// The pooled representation of one view: tokens (B, T, 1, D).
pub struct WorldToken {
    pub tokens: TensorId,
    pub view: usize,
}

fn grid_dims<S: Scalar>(op: &'static str, tape: &Tape<S>, grid: TensorId) -> Result<[usize; 4]> {
    let shape = tape.shape(grid);
    if let [b, t, n, d] = *shape {
        Ok([b, t, n, d])
    } else {
        Err(OwmError::shape(op, format!("token grid must be (B, T, N, D), got {shape:?}")))
    }
}

fn check_temperature(op: &'static str, tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(OwmError::Config(format!("{op}: temperature must be positive and finite, got {tau}")))
    }
}

/// Scores every token of a grid (B, T, N, D) under one branch, returning
/// (B, T, N). The learned branch requires its scorer.
pub fn score_tokens<S: Scalar>(
    tape: &mut Tape<S>,
    grid: TensorId,
    strategy: ScoringStrategy,
    scorer: Option<&ScorerTids>,
) -> Result<TensorId> {
    let [b, t, n, _] = grid_dims("score_tokens", tape, grid)?;
    match strategy {
        ScoringStrategy::Max => tape.max_axis(grid, 3),
        ScoringStrategy::Sum => tape.sum_axis(grid, 3),
        ScoringStrategy::Learn => {
            let q = scorer.ok_or_else(|| {
                OwmError::Config("score_tokens: learned branch needs a scorer".to_string())
            })?;
            let h = tape.matmul(grid, q.w1)?;
            let h = tape.add(h, q.b1)?;
            let h = tape.gelu(h)?;
            let s = tape.matmul(h, q.w2)?;
            let s = tape.add(s, q.b2)?;
            tape.reshape(s, &[b, t, n])
        }
    }
}

/// Temperature softmax over the token axis: scores (B, T, N) -> weights
/// (B, T, N) whose rows lie on the simplex.
pub fn token_weights<S: Scalar>(tape: &mut Tape<S>, scores: TensorId, tau: f64) -> Result<TensorId> {
    check_temperature("token_weights", tau)?;
    let shape = tape.shape(scores);
    if shape.len() != 3 {
        return Err(OwmError::shape("token_weights", format!("scores must be (B, T, N), got {shape:?}")));
    }
    let scaled = tape.affine(scores, 1.0 / tau, 0.0)?;
    tape.softmax(scaled, 2)
}

/// Pools a grid (B, T, N, D) under weights (B, T, N) into (B, T, D). Sum and
/// learn branches take the weighted sum over tokens; the max branch takes the
/// elementwise max of the weighted tokens.
pub fn pool_branch<S: Scalar>(
    tape: &mut Tape<S>,
    grid: TensorId,
    weights: TensorId,
    strategy: ScoringStrategy,
) -> Result<TensorId> {
    let [b, t, n, _] = grid_dims("pool_branch", tape, grid)?;
    let wshape = tape.shape(weights);
    if wshape != [b, t, n] {
        return Err(OwmError::shape(
            "pool_branch",
            format!("weights {wshape:?} do not match grid ({b}, {t}, {n}, _)"),
        ));
    }
    let w = tape.reshape(weights, &[b, t, n, 1])?;
    let weighted = tape.mul(grid, w)?;
    match strategy {
        ScoringStrategy::Max => tape.max_axis(weighted, 2),
        ScoringStrategy::Sum | ScoringStrategy::Learn => tape.sum_axis(weighted, 2),
    }
}

/// Fusion coefficients beta = softmax(alpha / fusion_tau), shape (3,).
pub fn fusion_weights<S: Scalar>(
    tape: &mut Tape<S>,
    alpha: TensorId,
    fusion_tau: f64,
) -> Result<TensorId> {
    check_temperature("fusion_weights", fusion_tau)?;
    let shape = tape.shape(alpha);
    if shape != [3] {
        return Err(OwmError::shape("fusion_weights", format!("alpha must be (3,), got {shape:?}")));
    }
    let logits = tape.affine(alpha, 1.0 / fusion_tau, 0.0)?;
    tape.softmax(logits, 0)
}

/// Convex fusion of the three branch pools into a single world token
/// (B, T, 1, D).
pub fn fuse_views<S: Scalar>(
    tape: &mut Tape<S>,
    pools: &BranchPools,
    alpha: TensorId,
    fusion_tau: f64,
    view: usize,
) -> Result<WorldToken> {
    let beta = fusion_weights(tape, alpha, fusion_tau)?;
    let mut fused = None;
    for (m, p) in [pools.p_max, pools.p_sum, pools.p_learn].into_iter().enumerate() {
        let bm = tape.slice(beta, 0, m, 1)?;
        let term = tape.mul(p, bm)?;
        fused = Some(match fused {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let z = fused.expect("three branches");
    let shape = tape.shape(z).to_vec();
    if let [b, t, d] = shape[..] {
        let tokens = tape.reshape(z, &[b, t, 1, d])?;
        Ok(WorldToken { tokens, view })
    } else {
        Err(OwmError::shape("fuse_views", format!("branch pools must be (B, T, D), got {shape:?}")))
    }
}

/// Full pooling pass for one view: scores, weights, branch pools, and fusion
/// under the configured branch mode. Single-branch modes skip fusion; the
/// static mean mode skips scoring entirely and averages the tokens.
pub fn pool_view<S: Scalar>(
    tape: &mut Tape<S>,
    grid: TensorId,
    pool: &PoolingTids,
    view: usize,
    branch: PoolingBranch,
    tau: f64,
    fusion_tau: f64,
) -> Result<WorldToken> {
    let [b, t, n, d] = grid_dims("pool_view", tape, grid)?;
    if view >= pool.scorers.len() {
        return Err(OwmError::shape("pool_view", format!("view {view} of {}", pool.scorers.len())));
    }
    let single = |tape: &mut Tape<S>, strategy: ScoringStrategy| -> Result<TensorId> {
        let scores = score_tokens(tape, grid, strategy, Some(&pool.scorers[view]))?;
        let weights = token_weights(tape, scores, tau)?;
        pool_branch(tape, grid, weights, strategy)
    };
    let flat = match branch {
        PoolingBranch::Adaptive => {
            let pools = BranchPools {
                p_max: single(tape, ScoringStrategy::Max)?,
                p_sum: single(tape, ScoringStrategy::Sum)?,
                p_learn: single(tape, ScoringStrategy::Learn)?,
            };
            return fuse_views(tape, &pools, pool.alpha, fusion_tau, view);
        }
        PoolingBranch::Max => single(tape, ScoringStrategy::Max)?,
        PoolingBranch::Sum => single(tape, ScoringStrategy::Sum)?,
        PoolingBranch::Learn => single(tape, ScoringStrategy::Learn)?,
        PoolingBranch::StaticMean => {
            let summed = tape.sum_axis(grid, 2)?;
            tape.affine(summed, 1.0 / n as f64, 0.0)?
        }
    };
    let tokens = tape.reshape(flat, &[b, t, 1, d])?;
    Ok(WorldToken { tokens, view })
}

/// One scalar weight per token (B, T, N): the branch's softmax weights,
/// or their beta-weighted mixture under the adaptive mode. This is the
/// ranking the k>1 bottleneck selects under; the static mean is uniform.
pub fn fused_token_weights<S: Scalar>(
    tape: &mut Tape<S>,
    grid: TensorId,
    pool: &PoolingTids,
    view: usize,
    branch: PoolingBranch,
    tau: f64,
    fusion_tau: f64,
) -> Result<TensorId> {
    let [b, t, n, _] = grid_dims("fused_token_weights", tape, grid)?;
    if view >= pool.scorers.len() {
        return Err(OwmError::shape(
            "fused_token_weights",
            format!("view {view} of {}", pool.scorers.len()),
        ));
    }
    let weights = |tape: &mut Tape<S>, strategy: ScoringStrategy| -> Result<TensorId> {
        let scores = score_tokens(tape, grid, strategy, Some(&pool.scorers[view]))?;
        token_weights(tape, scores, tau)
    };
    match branch {
        PoolingBranch::Adaptive => {
            let beta = fusion_weights(tape, pool.alpha, fusion_tau)?;
            let mut fused = None;
            for (m, strategy) in
                [ScoringStrategy::Max, ScoringStrategy::Sum, ScoringStrategy::Learn]
                    .into_iter()
                    .enumerate()
            {
                let w = weights(tape, strategy)?;
                let bm = tape.slice(beta, 0, m, 1)?;
                let term = tape.mul(w, bm)?;
                fused = Some(match fused {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
            Ok(fused.expect("three branches"))
        }
        PoolingBranch::Max => weights(tape, ScoringStrategy::Max),
        PoolingBranch::Sum => weights(tape, ScoringStrategy::Sum),
        PoolingBranch::Learn => weights(tape, ScoringStrategy::Learn),
        PoolingBranch::StaticMean => {
            let uniform = Array::full(&[b, t, n], S::from_f64(1.0 / n as f64))?;
            Ok(tape.constant(uniform))
        }
    }
}
