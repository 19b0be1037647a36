//! The joint velocity model: a transformer over the fused sequence of
//! current context (per-view world tokens, language, state) and h future
//! noisy query blocks, emitting one action velocity and one latent velocity
//! per view for every future step.

use rand::Rng;

use crate::config::{AttentionPattern, RunConfig, TASK_NAMES};
use crate::encoder::{attn_block, init_normal, AttnBlockParams, AttnBlockTids};
use crate::error::{OwmError, Result};
use crate::numerics::{Array, Scalar, Tape, TensorId};
use crate::pooling::WorldToken;

/// Width of the sinusoidal flow-time embedding before projection.
pub const FLOW_TIME_DIM: usize = 64;

/// Token type ids in sequence order: context z per view, language, state,
/// then query z per view and the action query.
const TYPE_COUNT: usize = 9;
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy)]
pub struct GeneratorConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub h: usize,
    pub d_a: usize,
    pub d_s: usize,
    pub num_tasks: usize,
    /// World tokens per view (k); 1 outside the token-budget sweep.
    pub tokens_per_view: usize,
    pub pattern: AttentionPattern,
    /// With the branch off, future blocks carry only the action query;
    /// context world tokens stay, otherwise the policy would be blind.
    pub latent_branch: bool,
}

impl GeneratorConfig {
    pub fn from_run(cfg: &RunConfig, d_a: usize, d_s: usize) -> Self {
        GeneratorConfig {
            d: cfg.d_model,
            layers: cfg.gen_layers,
            heads: cfg.gen_heads,
            h: cfg.horizon,
            d_a,
            d_s,
            num_tasks: TASK_NAMES.len(),
            tokens_per_view: cfg.tokens_per_view,
            pattern: cfg.attention_pattern,
            latent_branch: cfg.latent_branch,
        }
    }
}

/// Position bookkeeping of the fused sequence. Lengths depend only on the
/// tokens-per-view k and the horizon h, never on the encoder grid size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqLayout {
    pub k: usize,
    pub h: usize,
    pub latent: bool,
    pub context_len: usize,
    pub block_len: usize,
    pub len: usize,
}

impl SeqLayout {
    pub fn new(k: usize, h: usize, latent: bool) -> Self {
        let context_len = 3 * k + 2;
        let block_len = if latent { 3 * k + 1 } else { 1 };
        SeqLayout { k, h, latent, context_len, block_len, len: context_len + h * block_len }
    }

    /// Env-time block index: 0 for context, j for the j-th future block.
    pub fn block_of(&self, pos: usize) -> usize {
        if pos < self.context_len {
            0
        } else {
            1 + (pos - self.context_len) / self.block_len
        }
    }

    /// Type id per position (see TYPE_COUNT order).
    fn type_ids(&self) -> Vec<usize> {
        let mut ids = Vec::with_capacity(self.len);
        for v in 0..3 {
            ids.extend(std::iter::repeat(v).take(self.k));
        }
        ids.push(3);
        ids.push(4);
        for _ in 0..self.h {
            if self.latent {
                for v in 0..3 {
                    ids.extend(std::iter::repeat(5 + v).take(self.k));
                }
            }
            ids.push(8);
        }
        ids
    }
}

/// Allowed attention pairs (row attends to column), row-major (len, len).
/// Full is all-true; block-causal lets block j see context and blocks <= j.
pub fn allowed_matrix(pattern: AttentionPattern, layout: &SeqLayout) -> Vec<bool> {
    let l = layout.len;
    let mut out = vec![true; l * l];
    if pattern == AttentionPattern::BlockCausal {
        for i in 0..l {
            for j in 0..l {
                out[i * l + j] = layout.block_of(j) <= layout.block_of(i);
            }
        }
    }
    out
}

fn attention_mask<S: Scalar>(
    tape: &mut Tape<S>,
    pattern: AttentionPattern,
    layout: &SeqLayout,
) -> Result<Option<TensorId>> {
    if pattern == AttentionPattern::Full {
        return Ok(None);
    }
    let l = layout.len;
    let data = allowed_matrix(pattern, layout)
        .into_iter()
        .map(|ok| if ok { S::zero() } else { S::from_f64(MASKED) })
        .collect();
    let mask = tape.constant(Array::from_vec_unchecked(vec![l, l], data));
    Ok(Some(mask))
}

/// Interleaved sin/cos embedding of an integer position, transformer style.
fn env_time_row(pos: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let i = (j / 2) as f64;
            let w = (-2.0 * i * (10_000f64).ln() / dim as f64).exp();
            if j % 2 == 0 {
                (pos * w).sin()
            } else {
                (pos * w).cos()
            }
        })
        .collect()
}

/// Sinusoidal embedding of the flow time t in [0, 1]; frequencies ascend so
/// nearby times stay distinguishable at fine resolution.
pub fn flow_time_embedding(t: f64) -> Vec<f64> {
    let half = (FLOW_TIME_DIM / 2) as f64;
    (0..FLOW_TIME_DIM)
        .map(|j| {
            let i = (j / 2) as f64;
            let f = ((10_000f64).ln() * i / (half - 1.0)).exp();
            if j % 2 == 0 {
                (t * f).sin()
            } else {
                (t * f).cos()
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct GeneratorParams<S> {
    pub type_embed: Array<S>,
    pub lang_embed: Array<S>,
    pub state_w: Array<S>,
    pub state_b: Array<S>,
    pub act_in_w: Array<S>,
    pub act_in_b: Array<S>,
    pub view_in_w: Vec<Array<S>>,
    pub view_in_b: Vec<Array<S>>,
    pub time_w: Array<S>,
    pub time_b: Array<S>,
    pub blocks: Vec<AttnBlockParams<S>>,
    pub head_a_w: Array<S>,
    pub head_a_b: Array<S>,
    pub head_z_w: Vec<Array<S>>,
    pub head_z_b: Vec<Array<S>>,
}

pub struct GeneratorTids {
    pub type_embed: TensorId,
    pub lang_embed: TensorId,
    pub state_w: TensorId,
    pub state_b: TensorId,
    pub act_in_w: TensorId,
    pub act_in_b: TensorId,
    pub view_in_w: Vec<TensorId>,
    pub view_in_b: Vec<TensorId>,
    pub time_w: TensorId,
    pub time_b: TensorId,
    pub blocks: Vec<AttnBlockTids>,
    pub head_a_w: TensorId,
    pub head_a_b: TensorId,
    pub head_z_w: Vec<TensorId>,
    pub head_z_b: Vec<TensorId>,
}

impl<S: Scalar> GeneratorParams<S> {
    /// Output heads start at zero so the initial velocity field is zero;
    /// everything else uses fan-in scaled noise.
    pub fn init(cfg: &GeneratorConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d;
        let depth_scale = 1.0 / (2.0 * cfg.layers as f64).sqrt();
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        GeneratorParams {
            type_embed: init_normal(&[TYPE_COUNT, d], 0.02, rng),
            lang_embed: init_normal(&[cfg.num_tasks, d], 0.02, rng),
            state_w: init_normal(&[cfg.d_s, d], fan(cfg.d_s), rng),
            state_b: Array::zeros(&[d]),
            act_in_w: init_normal(&[cfg.d_a, d], fan(cfg.d_a), rng),
            act_in_b: Array::zeros(&[d]),
            view_in_w: (0..3).map(|_| init_normal(&[d, d], fan(d), rng)).collect(),
            view_in_b: (0..3).map(|_| Array::zeros(&[d])).collect(),
            time_w: init_normal(&[FLOW_TIME_DIM, d], fan(FLOW_TIME_DIM), rng),
            time_b: Array::zeros(&[d]),
            blocks: (0..cfg.layers).map(|_| AttnBlockParams::init(d, depth_scale, rng)).collect(),
            head_a_w: Array::zeros(&[d, cfg.d_a]),
            head_a_b: Array::zeros(&[cfg.d_a]),
            head_z_w: (0..3).map(|_| Array::zeros(&[d, d])).collect(),
            head_z_b: (0..3).map(|_| Array::zeros(&[d])).collect(),
        }
    }

    pub fn arrays(&self) -> Vec<(String, &Array<S>)> {
        let mut out = vec![
            ("gen/type_embed".to_string(), &self.type_embed),
            ("gen/lang_embed".to_string(), &self.lang_embed),
            ("gen/state_w".to_string(), &self.state_w),
            ("gen/state_b".to_string(), &self.state_b),
            ("gen/act_in_w".to_string(), &self.act_in_w),
            ("gen/act_in_b".to_string(), &self.act_in_b),
        ];
        for v in 0..3 {
            out.push((format!("gen/view_in{v}_w"), &self.view_in_w[v]));
            out.push((format!("gen/view_in{v}_b"), &self.view_in_b[v]));
        }
        out.push(("gen/time_w".to_string(), &self.time_w));
        out.push(("gen/time_b".to_string(), &self.time_b));
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.arrays(&format!("gen/block{i}")));
        }
        out.push(("gen/head_a_w".to_string(), &self.head_a_w));
        out.push(("gen/head_a_b".to_string(), &self.head_a_b));
        for v in 0..3 {
            out.push((format!("gen/head_z{v}_w"), &self.head_z_w[v]));
            out.push((format!("gen/head_z{v}_b"), &self.head_z_b[v]));
        }
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<(String, &mut Array<S>)> {
        let mut out = vec![
            ("gen/type_embed".to_string(), &mut self.type_embed),
            ("gen/lang_embed".to_string(), &mut self.lang_embed),
            ("gen/state_w".to_string(), &mut self.state_w),
            ("gen/state_b".to_string(), &mut self.state_b),
            ("gen/act_in_w".to_string(), &mut self.act_in_w),
            ("gen/act_in_b".to_string(), &mut self.act_in_b),
        ];
        let views = self.view_in_w.iter_mut().zip(self.view_in_b.iter_mut()).enumerate();
        for (v, (w, b)) in views {
            out.push((format!("gen/view_in{v}_w"), w));
            out.push((format!("gen/view_in{v}_b"), b));
        }
        out.push(("gen/time_w".to_string(), &mut self.time_w));
        out.push(("gen/time_b".to_string(), &mut self.time_b));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.arrays_mut(&format!("gen/block{i}")));
        }
        out.push(("gen/head_a_w".to_string(), &mut self.head_a_w));
        out.push(("gen/head_a_b".to_string(), &mut self.head_a_b));
        let heads = self.head_z_w.iter_mut().zip(self.head_z_b.iter_mut()).enumerate();
        for (v, (w, b)) in heads {
            out.push((format!("gen/head_z{v}_w"), w));
            out.push((format!("gen/head_z{v}_b"), b));
        }
        out
    }

    /// Field order must match `arrays`.
    pub fn wire(layers: usize, ids: &mut impl Iterator<Item = TensorId>) -> GeneratorTids {
        let mut next = |what: &str| ids.next().unwrap_or_else(|| panic!("{what} id"));
        let type_embed = next("type_embed");
        let lang_embed = next("lang_embed");
        let state_w = next("state_w");
        let state_b = next("state_b");
        let act_in_w = next("act_in_w");
        let act_in_b = next("act_in_b");
        let mut view_in_w = Vec::new();
        let mut view_in_b = Vec::new();
        for _ in 0..3 {
            view_in_w.push(next("view_in_w"));
            view_in_b.push(next("view_in_b"));
        }
        let time_w = next("time_w");
        let time_b = next("time_b");
        let blocks = (0..layers).map(|_| AttnBlockParams::<S>::wire(ids)).collect();
        let mut next = |what: &str| ids.next().unwrap_or_else(|| panic!("{what} id"));
        let head_a_w = next("head_a_w");
        let head_a_b = next("head_a_b");
        let mut head_z_w = Vec::new();
        let mut head_z_b = Vec::new();
        for _ in 0..3 {
            head_z_w.push(next("head_z_w"));
            head_z_b.push(next("head_z_b"));
        }
        GeneratorTids {
            type_embed,
            lang_embed,
            state_w,
            state_b,
            act_in_w,
            act_in_b,
            view_in_w,
            view_in_b,
            time_w,
            time_b,
            blocks,
            head_a_w,
            head_a_b,
            head_z_w,
            head_z_b,
        }
    }

    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> GeneratorTids {
        let mut ids = self
            .arrays()
            .into_iter()
            .map(|(_, a)| if trainable { tape.input(a.clone()) } else { tape.constant(a.clone()) })
            .collect::<Vec<_>>()
            .into_iter();
        Self::wire(self.blocks.len(), &mut ids)
    }
}

/// The embedded fused sequence (B, len, D) plus its layout.
#[derive(Debug)]
pub struct FusedSequence {
    pub x: TensorId,
    pub layout: SeqLayout,
}

/// Per-future-step velocities: action (B, h, D_a) and one (B, h, k, D)
/// stream per view.
#[derive(Debug)]
pub struct JointVelocities {
    pub v_a: TensorId,
    pub v_z: Vec<TensorId>,
}

fn project_view<S: Scalar>(
    tape: &mut Tape<S>,
    gen: &GeneratorTids,
    view: usize,
    x: TensorId,
) -> Result<TensorId> {
    let p = tape.matmul(x, gen.view_in_w[view])?;
    tape.add(p, gen.view_in_b[view])
}

/// Assembles the fused sequence: clean context (world tokens per view,
/// language, state) followed by h blocks of noisy latent queries per view
/// plus one noisy action query. Adds type embeddings, an env-time sinusoid
/// per block, and the projected flow-time embedding on query tokens only.
///
/// World tokens arrive as (B, 1, k, D) (one context frame); noisy latent
/// queries as (B, h, k, D) per view; noisy actions as (B, h, D_a). With h=0
/// the future streams are ignored and the sequence is context only.
pub fn build_sequence<S: Scalar>(
    tape: &mut Tape<S>,
    gen: &GeneratorTids,
    cfg: &GeneratorConfig,
    world: &[WorldToken],
    lang_ids: &[usize],
    state: TensorId,
    noisy_z: &[TensorId],
    noisy_a: Option<TensorId>,
    t: f64,
) -> Result<FusedSequence> {
    let (k, h, d) = (cfg.tokens_per_view, cfg.h, cfg.d);
    let layout = SeqLayout::new(k, h, cfg.latent_branch);
    if world.len() != 3 {
        return Err(OwmError::shape("build_sequence", format!("{} views, want 3", world.len())));
    }
    let b = tape.shape(world[0].tokens)[0];
    if lang_ids.len() != b || lang_ids.iter().any(|&id| id >= cfg.num_tasks) {
        return Err(OwmError::Config(format!(
            "build_sequence: {} language ids for batch {b}, table of {}",
            lang_ids.len(),
            cfg.num_tasks
        )));
    }

    // Context: per-view world tokens through the view projections.
    let mut parts = Vec::with_capacity(5 + h);
    for (v, w) in world.iter().enumerate() {
        if w.view != v {
            return Err(OwmError::Config(format!(
                "build_sequence: world token {v} labeled view {}",
                w.view
            )));
        }
        let shape = tape.shape(w.tokens).to_vec();
        if shape != [b, 1, k, d] {
            return Err(OwmError::shape(
                "build_sequence",
                format!("world token {v} is {shape:?}, want ({b}, 1, {k}, {d})"),
            ));
        }
        let flat = tape.reshape(w.tokens, &[b, k, d])?;
        parts.push(project_view(tape, gen, v, flat)?);
    }
    let lang = tape.gather(gen.lang_embed, 0, b, lang_ids)?;
    parts.push(tape.reshape(lang, &[b, 1, d])?);
    let st = tape.matmul(state, gen.state_w)?;
    let st = tape.add(st, gen.state_b)?;
    parts.push(tape.reshape(st, &[b, 1, d])?);

    // Future query blocks, interleaved per step.
    if h > 0 {
        let want_z = if cfg.latent_branch { 3 } else { 0 };
        if noisy_z.len() != want_z {
            return Err(OwmError::shape(
                "build_sequence",
                format!("{} latent query streams, want {want_z}", noisy_z.len()),
            ));
        }
        let a = noisy_a
            .ok_or_else(|| OwmError::Config("build_sequence: missing action queries".into()))?;
        let mut block_parts = Vec::with_capacity(4);
        for (v, &zq) in noisy_z.iter().enumerate() {
            let shape = tape.shape(zq).to_vec();
            if shape != [b, h, k, d] {
                return Err(OwmError::shape(
                    "build_sequence",
                    format!("latent queries {v} are {shape:?}, want ({b}, {h}, {k}, {d})"),
                ));
            }
            block_parts.push(project_view(tape, gen, v, zq)?);
        }
        let ashape = tape.shape(a).to_vec();
        if ashape != [b, h, cfg.d_a] {
            return Err(OwmError::shape(
                "build_sequence",
                format!("action queries are {ashape:?}, want ({b}, {h}, {})", cfg.d_a),
            ));
        }
        let ap = tape.matmul(a, gen.act_in_w)?;
        let ap = tape.add(ap, gen.act_in_b)?;
        block_parts.push(tape.reshape(ap, &[b, h, 1, d])?);
        let future = tape.concat(&block_parts, 2)?;
        parts.push(tape.reshape(future, &[b, h * layout.block_len, d])?);
    }
    let mut x = tape.concat(&parts, 1)?;

    // Type embedding per position.
    let types = tape.gather(gen.type_embed, 0, layout.len, &layout.type_ids())?;
    x = tape.add(x, types)?;

    // Env-time sinusoid per block index, a fixed table.
    let mut env = Vec::with_capacity(layout.len * d);
    for pos in 0..layout.len {
        env.extend(env_time_row(layout.block_of(pos) as f64, d).into_iter().map(S::from_f64));
    }
    let env = tape.constant(Array::from_vec_unchecked(vec![layout.len, d], env));
    x = tape.add(x, env)?;

    // Flow-time embedding, projected and placed on noisy query rows.
    if h > 0 {
        let emb = flow_time_embedding(t).into_iter().map(S::from_f64).collect();
        let emb = tape.constant(Array::from_vec_unchecked(vec![1, FLOW_TIME_DIM], emb));
        let tp = tape.matmul(emb, gen.time_w)?;
        let tp = tape.add(tp, gen.time_b)?;
        let qmask: Vec<S> = (0..layout.len)
            .map(|p| if p < layout.context_len { S::zero() } else { S::one() })
            .collect();
        let qmask = tape.constant(Array::from_vec_unchecked(vec![layout.len, 1], qmask));
        let placed = tape.matmul(qmask, tp)?;
        x = tape.add(x, placed)?;
    }
    Ok(FusedSequence { x, layout })
}

/// Runs the transformer and reads velocities off the query tokens through
/// the zero-initialized branch heads.
pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    gen: &GeneratorTids,
    cfg: &GeneratorConfig,
    seq: &FusedSequence,
) -> Result<JointVelocities> {
    let lay = seq.layout;
    if lay.h == 0 {
        return Err(OwmError::Config("forward: horizon must be >= 1".to_string()));
    }
    let mask = attention_mask(tape, cfg.pattern, &lay)?;
    let mut x = seq.x;
    for blk in &gen.blocks {
        x = attn_block(tape, blk, x, cfg.heads, mask)?;
    }
    let b = tape.shape(x)[0];
    let future = tape.slice(x, 1, lay.context_len, lay.h * lay.block_len)?;
    let future = tape.reshape(future, &[b, lay.h, lay.block_len, cfg.d])?;
    let mut v_z = Vec::with_capacity(3);
    if lay.latent {
        for v in 0..3 {
            let toks = tape.slice(future, 2, v * lay.k, lay.k)?;
            let vel = tape.matmul(toks, gen.head_z_w[v])?;
            v_z.push(tape.add(vel, gen.head_z_b[v])?);
        }
    }
    let atok = tape.slice(future, 2, if lay.latent { 3 * lay.k } else { 0 }, 1)?;
    let atok = tape.reshape(atok, &[b, lay.h, cfg.d])?;
    let va = tape.matmul(atok, gen.head_a_w)?;
    let v_a = tape.add(va, gen.head_a_b)?;
    Ok(JointVelocities { v_a, v_z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradients, GradCheckSettings};
    use rand_distr::{Distribution, StandardNormal};

    fn small_cfg() -> GeneratorConfig {
        GeneratorConfig {
            d: 16,
            layers: 2,
            heads: 2,
            h: 2,
            d_a: 4,
            d_s: 5,
            num_tasks: 3,
            tokens_per_view: 1,
            pattern: AttentionPattern::Full,
            latent_branch: true,
        }
    }

    fn normal(shape: &[usize], seed: u64) -> Array<f64> {
        let mut r = crate::rng::stream(seed, "gen-test");
        let n: usize = shape.iter().product();
        Array::from_vec(shape, (0..n).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap()
    }

    fn build_inputs(
        tape: &mut Tape<f64>,
        cfg: &GeneratorConfig,
        b: usize,
        seed: u64,
    ) -> (Vec<WorldToken>, Vec<usize>, TensorId, Vec<TensorId>, TensorId) {
        let (k, h) = (cfg.tokens_per_view, cfg.h);
        let world = (0..3)
            .map(|v| WorldToken {
                tokens: tape.input(normal(&[b, 1, k, cfg.d], seed + v as u64)),
                view: v,
            })
            .collect();
        let lang_ids = (0..b).map(|i| i % cfg.num_tasks).collect();
        let state = tape.input(normal(&[b, cfg.d_s], seed + 10));
        let noisy_z =
            (0..3).map(|v| tape.input(normal(&[b, h, k, cfg.d], seed + 20 + v as u64))).collect();
        let noisy_a = tape.input(normal(&[b, h, cfg.d_a], seed + 30));
        (world, lang_ids, state, noisy_z, noisy_a)
    }

    #[test]
    fn layout_lengths_are_affine_in_h_and_k() {
        assert_eq!(SeqLayout::new(1, 5, true).len, 25);
        assert_eq!(SeqLayout::new(1, 0, true).len, 5);
        assert_eq!(SeqLayout::new(3, 8, true).len, 11 + 8 * 10);
        for k in [1usize, 3, 6, 12] {
            let base = SeqLayout::new(k, 0, true).len;
            let per = SeqLayout::new(k, 1, true).len - base;
            for h in 2..6 {
                assert_eq!(SeqLayout::new(k, h, true).len, base + h * per);
            }
        }
    }

    #[test]
    fn full_pattern_attends_everywhere() {
        let lay = SeqLayout::new(1, 3, true);
        assert!(allowed_matrix(AttentionPattern::Full, &lay).iter().all(|&ok| ok));
    }

    #[test]
    fn block_causal_sees_context_and_past_blocks() {
        let lay = SeqLayout::new(1, 3, true);
        let m = allowed_matrix(AttentionPattern::BlockCausal, &lay);
        let at = |i: usize, j: usize| m[i * lay.len + j];
        // Every future query still attends to every context token.
        for i in lay.context_len..lay.len {
            for j in 0..lay.context_len {
                assert!(at(i, j));
            }
        }
        // Context cannot see the future; later blocks see earlier ones.
        assert!(!at(0, lay.context_len));
        let b1 = lay.context_len;
        let b2 = lay.context_len + lay.block_len;
        assert!(at(b2, b1));
        assert!(!at(b1, b2));
    }

    #[test]
    fn sequence_shape_and_determinism() {
        let cfg = small_cfg();
        let run = |seed: u64| -> (Vec<f64>, Vec<usize>) {
            let mut tape = Tape::<f64>::new();
            let params = GeneratorParams::<f64>::init(&cfg, &mut crate::rng::stream(0, "gen-init"));
            let gen = params.bind(&mut tape, false);
            let (world, lang, state, nz, na) = build_inputs(&mut tape, &cfg, 2, seed);
            let seq =
                build_sequence(&mut tape, &gen, &cfg, &world, &lang, state, &nz, Some(na), 0.3)
                    .unwrap();
            (tape.value(seq.x).data().to_vec(), tape.shape(seq.x).to_vec())
        };
        let (a, shape) = run(5);
        let (b, _) = run(5);
        assert_eq!(shape, vec![2, SeqLayout::new(1, 2, true).len, 16]);
        assert_eq!(a, b);
    }

    #[test]
    fn context_only_sequence_when_h_zero() {
        let mut cfg = small_cfg();
        cfg.h = 0;
        let mut tape = Tape::<f64>::new();
        let params = GeneratorParams::<f64>::init(&cfg, &mut crate::rng::stream(1, "gen-init"));
        let gen = params.bind(&mut tape, false);
        let world: Vec<WorldToken> = (0..3)
            .map(|v| WorldToken { tokens: tape.input(normal(&[1, 1, 1, 16], 9 + v as u64)), view: v })
            .collect();
        let state = tape.input(normal(&[1, cfg.d_s], 19));
        let seq =
            build_sequence(&mut tape, &gen, &cfg, &world, &[0], state, &[], None, 0.5).unwrap();
        assert_eq!(tape.shape(seq.x), &[1, 5, 16]);
        let err = forward(&mut tape, &gen, &cfg, &seq).unwrap_err();
        assert!(matches!(err, OwmError::Config(_)));
    }

    #[test]
    fn fresh_heads_emit_zero_velocities() {
        let cfg = small_cfg();
        let mut tape = Tape::<f64>::new();
        let params = GeneratorParams::<f64>::init(&cfg, &mut crate::rng::stream(2, "gen-init"));
        let gen = params.bind(&mut tape, false);
        let (world, lang, state, nz, na) = build_inputs(&mut tape, &cfg, 2, 11);
        let seq =
            build_sequence(&mut tape, &gen, &cfg, &world, &lang, state, &nz, Some(na), 0.7).unwrap();
        let out = forward(&mut tape, &gen, &cfg, &seq).unwrap();
        assert_eq!(tape.shape(out.v_a), &[2, 2, 4]);
        assert!(tape.value(out.v_a).data().iter().all(|&v| v == 0.0));
        for vz in &out.v_z {
            assert_eq!(tape.shape(*vz), &[2, 2, 1, 16]);
            assert!(tape.value(*vz).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identical_language_rows_give_identical_outputs() {
        let cfg = small_cfg();
        let mut params = GeneratorParams::<f64>::init(&cfg, &mut crate::rng::stream(3, "gen-init"));
        // Give the heads weight so outputs depend on the input sequence.
        params.head_a_w = normal(&[cfg.d, cfg.d_a], 41);
        for v in 0..3 {
            params.head_z_w[v] = normal(&[cfg.d, cfg.d], 42 + v as u64);
        }
        let row: Vec<f64> = params.lang_embed.data()[..cfg.d].to_vec();
        let mut table = params.lang_embed.data().to_vec();
        table[cfg.d..2 * cfg.d].copy_from_slice(&row);
        params.lang_embed = Array::from_vec(&[cfg.num_tasks, cfg.d], table).unwrap();
        let run = |lang_id: usize| -> Vec<f64> {
            let mut tape = Tape::<f64>::new();
            let gen = params.bind(&mut tape, false);
            let (world, _, state, nz, na) = build_inputs(&mut tape, &cfg, 1, 13);
            let seq = build_sequence(
                &mut tape,
                &gen,
                &cfg,
                &world,
                &[lang_id],
                state,
                &nz,
                Some(na),
                0.2,
            )
            .unwrap();
            let out = forward(&mut tape, &gen, &cfg, &seq).unwrap();
            tape.value(out.v_a).data().to_vec()
        };
        assert_eq!(run(0), run(1));
    }

    #[test]
    fn sequence_length_ignores_world_token_width_source() {
        // The layout never sees N; only k and h enter.
        for (k, h) in [(1usize, 8usize), (12, 8)] {
            let lay = SeqLayout::new(k, h, true);
            assert_eq!(lay.len, 3 * k + 2 + h * (3 * k + 1));
        }
    }

    #[test]
    fn latent_branch_off_keeps_context_but_drops_latent_queries() {
        let mut cfg = small_cfg();
        cfg.latent_branch = false;
        let lay = SeqLayout::new(1, 2, false);
        assert_eq!(lay.block_len, 1);
        assert_eq!(lay.len, 5 + 2);
        let mut tape = Tape::<f64>::new();
        let params = GeneratorParams::<f64>::init(&cfg, &mut crate::rng::stream(6, "gen-init"));
        let gen = params.bind(&mut tape, false);
        let world: Vec<WorldToken> = (0..3)
            .map(|v| WorldToken { tokens: tape.input(normal(&[2, 1, 1, 16], 61 + v as u64)), view: v })
            .collect();
        let state = tape.input(normal(&[2, cfg.d_s], 65));
        let na = tape.input(normal(&[2, 2, cfg.d_a], 66));
        let seq = build_sequence(
            &mut tape,
            &gen,
            &cfg,
            &world,
            &[0, 1],
            state,
            &[],
            Some(na),
            0.3,
        )
        .unwrap();
        assert_eq!(tape.shape(seq.x), &[2, 7, 16]);
        let out = forward(&mut tape, &gen, &cfg, &seq).unwrap();
        assert_eq!(tape.shape(out.v_a), &[2, 2, 4]);
        assert!(out.v_z.is_empty());

        // Passing latent query streams anyway is a shape error.
        let mut tape = Tape::<f64>::new();
        let gen = params.bind(&mut tape, false);
        let world: Vec<WorldToken> = (0..3)
            .map(|v| WorldToken { tokens: tape.input(normal(&[2, 1, 1, 16], 71 + v as u64)), view: v })
            .collect();
        let state = tape.input(normal(&[2, cfg.d_s], 75));
        let nz: Vec<TensorId> =
            (0..3).map(|v| tape.input(normal(&[2, 2, 1, 16], 76 + v as u64))).collect();
        let na = tape.input(normal(&[2, 2, cfg.d_a], 79));
        let err = build_sequence(&mut tape, &gen, &cfg, &world, &[0, 1], state, &nz, Some(na), 0.3)
            .unwrap_err();
        assert!(matches!(err, OwmError::Shape { .. }));
    }

    #[test]
    fn generator_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let template = GeneratorParams::<f64>::init(&cfg, &mut crate::rng::stream(4, "gen-init"));
        let shapes: Vec<Vec<usize>> =
            template.arrays().iter().map(|(_, a)| a.shape().to_vec()).collect();
        let layers = cfg.layers;
        let report = check_gradients(
            "generator_forward",
            &shapes,
            &GradCheckSettings { coord_cap: 40, probes: 8, ..GradCheckSettings::default() },
            23,
            move |tape, ids| {
                let mut it = ids.iter().copied();
                let gen = GeneratorParams::<f64>::wire(layers, &mut it);
                let (world, lang, state, nz, na) = build_inputs(tape, &cfg, 1, 29);
                let seq =
                    build_sequence(tape, &gen, &cfg, &world, &lang, state, &nz, Some(na), 0.4)?;
                let out = forward(tape, &gen, &cfg, &seq)?;
                let target_a = tape.constant(normal(&[1, cfg.h, cfg.d_a], 51));
                let targets_z: Vec<TensorId> = (0..3)
                    .map(|v| tape.constant(normal(&[1, cfg.h, 1, cfg.d], 52 + v as u64)))
                    .collect();
                let weights = crate::flowmatch::LossWeights {
                    lambda_a: 1.0,
                    lambda_r: 0.1,
                    lambda_w1: 0.1,
                    lambda_w2: 0.1,
                    metric_a: crate::config::Metric::L1,
                    metric_z: crate::config::Metric::L1,
                };
                let parts = crate::flowmatch::cfm_loss_graph(
                    tape, out.v_a, target_a, &out.v_z, &targets_z, &weights,
                )?;
                Ok(parts.total)
            },
        )
        .unwrap();
        assert!(report.pass(), "{report}");
    }
}
