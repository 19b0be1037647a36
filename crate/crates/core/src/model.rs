//! Full policy assembly: the patch encoder per view, pooling into world
//! tokens, and the joint velocity generator, plus the sampling-based
//! action chunk query used by closed-loop evaluation.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::analysis::top_k_world_tokens;
use crate::config::RunConfig;
use crate::encoder::{encode, patchify, EncoderParams, EncoderTids};
use crate::envsim::evaluate::EvalObs;
use crate::envsim::world::{ACTION_DIM, STATE_DIM};
use crate::error::{OwmError, Result};
use crate::flowmatch::{euler_sample, JointState};
use crate::generator::{
    build_sequence, forward, GeneratorConfig, GeneratorParams, GeneratorTids, JointVelocities,
};
use crate::numerics::{Array, Scalar, Tape, TensorId};
use crate::pooling::{fused_token_weights, pool_view, PoolingParams, PoolingTids, WorldToken};
use crate::rng;

#[derive(Debug, Clone)]
pub struct Policy<S> {
    pub cfg: RunConfig,
    pub gen_cfg: GeneratorConfig,
    pub enc: EncoderParams<S>,
    pub pool: PoolingParams<S>,
    pub gen: GeneratorParams<S>,
}

pub struct PolicyTids {
    pub enc: EncoderTids,
    pub pool: PoolingTids,
    pub gen: GeneratorTids,
    /// Every registered id in `Policy::arrays` order; the optimizer maps
    /// gradients back to parameters by position in this list.
    pub flat: Vec<TensorId>,
}

impl<S: Scalar> Policy<S> {
    pub fn init(cfg: &RunConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.tokens_per_frame();
        let patch_dim = cfg.patch * cfg.patch * 3;
        let gen_cfg = GeneratorConfig::from_run(cfg, ACTION_DIM, STATE_DIM);
        Ok(Policy {
            cfg: cfg.clone(),
            gen_cfg,
            enc: EncoderParams::init(patch_dim, cfg.d_model, n, 3, cfg.enc_blocks, rng),
            pool: PoolingParams::init(cfg.d_model, 3, rng),
            gen: GeneratorParams::init(&gen_cfg, rng),
        })
    }

    /// All weights in one stable name order: encoder, pooling, generator.
    pub fn arrays(&self) -> Vec<(String, &Array<S>)> {
        let mut out = self.enc.arrays();
        out.extend(self.pool.arrays());
        out.extend(self.gen.arrays());
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<(String, &mut Array<S>)> {
        let mut out = self.enc.arrays_mut();
        out.extend(self.pool.arrays_mut());
        out.extend(self.gen.arrays_mut());
        out
    }

    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> PolicyTids {
        let on = |name: &str| {
            if name.starts_with("enc/patch") {
                self.enc.trainable.patch
            } else if name.starts_with("enc/pos") {
                self.enc.trainable.pos
            } else if name.starts_with("enc/block") {
                self.enc.trainable.blocks
            } else {
                true
            }
        };
        let flat: Vec<TensorId> = self
            .arrays()
            .into_iter()
            .map(|(name, a)| {
                if trainable && on(&name) {
                    tape.input(a.clone())
                } else {
                    tape.constant(a.clone())
                }
            })
            .collect();
        let mut ids = flat.iter().copied();
        let enc = EncoderParams::<S>::wire(3, self.cfg.enc_blocks, &mut ids);
        let pool = PoolingParams::<S>::wire(3, &mut ids);
        let gen = GeneratorParams::<S>::wire(self.cfg.gen_layers, &mut ids);
        debug_assert!(ids.next().is_none(), "bind consumed too few ids");
        PolicyTids { enc, pool, gen, flat }
    }

    /// Encode and pool one bundle of frames per view into world tokens
    /// (B, frames, k, D). `patches` are pre-patchified (B*frames, N, PPC)
    /// stacks; `frames` is 1 for context and h for latent-target windows.
    pub fn world_tokens(
        &self,
        tape: &mut Tape<S>,
        tids: &PolicyTids,
        patches: &[TensorId; 3],
        frames: usize,
    ) -> Result<Vec<WorldToken>> {
        let k = self.cfg.tokens_per_view;
        (0..3)
            .map(|v| {
                let toks = encode(tape, &tids.enc, v, patches[v], self.cfg.enc_heads)?;
                let shape = tape.shape(toks).to_vec();
                let [bt, n, d] = match shape[..] {
                    [bt, n, d] => [bt, n, d],
                    _ => unreachable!("encode output is rank 3"),
                };
                if frames == 0 || bt % frames != 0 {
                    return Err(OwmError::shape(
                        "world_tokens",
                        format!("{bt} encoded frames do not stack into groups of {frames}"),
                    ));
                }
                let grid = tape.reshape(toks, &[bt / frames, frames, n, d])?;
                if k == 1 {
                    pool_view(
                        tape,
                        grid,
                        &tids.pool,
                        v,
                        self.cfg.pooling_branch,
                        self.cfg.tau,
                        self.cfg.fusion_tau,
                    )
                } else {
                    let w = fused_token_weights(
                        tape,
                        grid,
                        &tids.pool,
                        v,
                        self.cfg.pooling_branch,
                        self.cfg.tau,
                        self.cfg.fusion_tau,
                    )?;
                    top_k_world_tokens(tape, grid, w, k, v)
                }
            })
            .collect()
    }

    /// Full velocity graph for one noisy flow state: context frames in,
    /// joint velocities out. `state` is (B, STATE_DIM); latent queries
    /// must be empty when the latent branch is off.
    #[allow(clippy::too_many_arguments)]
    pub fn velocities(
        &self,
        tape: &mut Tape<S>,
        tids: &PolicyTids,
        context_patches: &[TensorId; 3],
        lang_ids: &[usize],
        state: TensorId,
        noisy_z: &[TensorId],
        noisy_a: TensorId,
        t: f64,
    ) -> Result<JointVelocities> {
        let world = self.world_tokens(tape, tids, context_patches, 1)?;
        let seq = build_sequence(
            tape,
            &tids.gen,
            &self.gen_cfg,
            &world,
            lang_ids,
            state,
            noisy_z,
            Some(noisy_a),
            t,
        )?;
        forward(tape, &tids.gen, &self.gen_cfg, &seq)
    }
}

/// Raw per-view frames (`frame_px^2 * 3` floats in [0, 1]) patchified
/// into (1, N, PPC) arrays ready for the encoder.
pub fn frames_to_patches<S: Scalar>(
    frames: &[Vec<f32>; 3],
    frame_px: usize,
    patch: usize,
) -> Result<[Array<S>; 3]> {
    let want = frame_px * frame_px * 3;
    let mut out = Vec::with_capacity(3);
    for (v, f) in frames.iter().enumerate() {
        if f.len() != want {
            return Err(OwmError::shape(
                "frames_to_patches",
                format!("view {v} has {} values, want {want}", f.len()),
            ));
        }
        let arr = Array::from_vec(
            &[1, frame_px, frame_px, 3],
            f.iter().map(|&x| S::from_f64(x as f64)).collect(),
        )?;
        out.push(patchify(&arr, patch)?);
    }
    Ok([out.remove(0), out.remove(0), out.remove(0)])
}

impl<S: Scalar> Policy<S> {
    /// Query one action chunk by integrating the velocity field from
    /// Gaussian noise to t = 0. World tokens are computed once; each
    /// integration step rebuilds only the generator graph. Returns the
    /// first `infer_ah` rows of the (h, ACTION_DIM) action stream; a
    /// fixed rng state yields an identical chunk.
    pub fn act(
        &self,
        frames: &[Vec<f32>; 3],
        state: &[f64],
        task_index: usize,
        infer_ah: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<[f64; ACTION_DIM]>> {
        let cfg = &self.cfg;
        let (h, k, d) = (cfg.horizon, cfg.tokens_per_view, cfg.d_model);
        if infer_ah == 0 || infer_ah > h {
            return Err(OwmError::Config(format!(
                "infer_ah {infer_ah} outside 1..={h}"
            )));
        }
        if state.len() != STATE_DIM {
            return Err(OwmError::shape(
                "act",
                format!("state has {} entries, want {STATE_DIM}", state.len()),
            ));
        }

        // Context pass: encode and pool once, keep the values.
        let patches = frames_to_patches::<S>(frames, cfg.frame_px, cfg.patch)?;
        let mut ctx_tape = Tape::<S>::new();
        let tids = self.bind(&mut ctx_tape, false);
        let patch_ids = [
            ctx_tape.constant(patches[0].clone()),
            ctx_tape.constant(patches[1].clone()),
            ctx_tape.constant(patches[2].clone()),
        ];
        let world = self.world_tokens(&mut ctx_tape, &tids, &patch_ids, 1)?;
        let world_vals: Vec<Array<S>> =
            world.iter().map(|w| ctx_tape.value(w.tokens).clone()).collect();
        let state_arr =
            Array::from_vec(&[1, STATE_DIM], state.iter().map(|&v| S::from_f64(v)).collect())?;

        let mut draw = |shape: &[usize]| -> Result<Array<S>> {
            let count: usize = shape.iter().product();
            Array::from_vec(
                shape,
                (0..count)
                    .map(|_| S::from_f64(StandardNormal.sample(rng)))
                    .collect(),
            )
        };
        let z_streams = if cfg.latent_branch { 3 } else { 0 };
        let init = JointState {
            a: draw(&[1, h, ACTION_DIM])?,
            z: (0..z_streams)
                .map(|_| draw(&[1, h, k, d]))
                .collect::<Result<Vec<_>>>()?,
        };

        let out = euler_sample(init, cfg.flow_steps, |joint, t| {
            let mut tape = Tape::<S>::new();
            let tids = self.bind(&mut tape, false);
            let world: Vec<WorldToken> = world_vals
                .iter()
                .enumerate()
                .map(|(v, w)| WorldToken { tokens: tape.constant(w.clone()), view: v })
                .collect();
            let st = tape.constant(state_arr.clone());
            let nz: Vec<TensorId> = joint.z.iter().map(|z| tape.constant(z.clone())).collect();
            let na = tape.constant(joint.a.clone());
            let seq = build_sequence(
                &mut tape,
                &tids.gen,
                &self.gen_cfg,
                &world,
                &[task_index],
                st,
                &nz,
                Some(na),
                t,
            )?;
            let vel = forward(&mut tape, &tids.gen, &self.gen_cfg, &seq)?;
            Ok(JointState {
                a: tape.value(vel.v_a).clone(),
                z: vel.v_z.iter().map(|&z| tape.value(z).clone()).collect(),
            })
        })?;

        let chunk = out.a.data();
        Ok((0..infer_ah)
            .map(|i| {
                let row = &chunk[i * ACTION_DIM..(i + 1) * ACTION_DIM];
                [
                    row[0].to_f64(),
                    row[1].to_f64(),
                    row[2].to_f64(),
                    row[3].to_f64(),
                ]
            })
            .collect())
    }
}

/// Wrap a policy as the rollout callback `evaluate` expects. The noise
/// stream for each query is derived from the observation content (state
/// bits and task), not from call order, so parallel episodes produce the
/// same report regardless of how the scheduler interleaves them.
pub fn obs_policy(
    policy: &Policy<f32>,
    infer_ah: usize,
    seed: u64,
) -> impl Fn(&EvalObs) -> Result<Vec<[f64; ACTION_DIM]>> + Sync + '_ {
    move |obs: &EvalObs| {
        let mut bytes = Vec::with_capacity(8 * (obs.state.len() + 1));
        bytes.extend((obs.task.index() as u64).to_le_bytes());
        for v in &obs.state {
            bytes.extend(v.to_bits().to_le_bytes());
        }
        let mut rng = rng::stream_indexed(seed, "rollout/obs", rng::fnv1a(&bytes));
        policy.act(&obs.frames, &obs.state, obs.task.index(), infer_ah, &mut rng)
    }
}
