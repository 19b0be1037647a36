//! Training loop: minibatch windows over recorded episodes, the joint
//! flow-matching objective, Adam with decoupled weight decay and global
//! gradient clipping, online stop-gradient latent targets, atomic
//! checkpoints, and bit-deterministic resume.
//!
//! Determinism comes from indexing: step i draws everything it needs from
//! the substream ("train/step", i), so a resumed run at step i sees the
//! same bytes as an uninterrupted one.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;

use crate::config::{LatentTarget, RunConfig};
use crate::container::{ContainerFile, RecordData};
use crate::envsim::render::{View, VIEWS};
use crate::envsim::world::{ACTION_DIM, STATE_DIM};
use crate::envsim::Dataset;
use crate::error::{OwmError, Result};
use crate::flowmatch::{cfm_loss_graph, FlowTimeSampler, JointPathSample, LossWeights};
use crate::model::Policy;
use crate::numerics::{Array, Tape, TensorId};
use crate::rng;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const COLLAPSE_VAR: f64 = 1e-9;

/// One metrics row per optimization step. Latent columns hold the raw
/// (unweighted) per-view branch means; zero when the branch is off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub total: f64,
    pub action: f64,
    pub latent: [f64; 3],
    pub grad_norm: f64,
}

impl MetricsRow {
    fn to_csv(self) -> String {
        format!(
            "{},{},{},{},{},{},{}\n",
            self.step,
            self.total,
            self.action,
            self.latent[0],
            self.latent[1],
            self.latent[2],
            self.grad_norm
        )
    }
}

pub const METRICS_HEADER: &str =
    "step,total_loss,action_loss,latent_loss_r,latent_loss_w1,latent_loss_w2,grad_norm\n";

#[derive(Debug)]
pub struct TrainOutcome {
    pub policy: Policy<f32>,
    /// Rows for the steps this call ran (empty if the checkpoint was
    /// already at or past the configured step count).
    pub metrics: Vec<MetricsRow>,
    pub steps_run: usize,
}

/// Clean targets for one batch of windows: actions (B, h, D_a) and, when
/// the latent branch is on, per-view world tokens (B, h, k, D). Plain
/// arrays: whatever graph consumes them sees constants.
#[derive(Debug, Clone)]
pub struct TargetBatch {
    pub a: Array<f32>,
    pub z: Vec<Array<f32>>,
}

/// (episode index, start step). The window covers actions start..start+h
/// and the h frames after start.
pub type Window = (usize, usize);

fn check_window(data: &Dataset, (e, s): Window, h: usize) -> Result<()> {
    let ep = data
        .episodes
        .get(e)
        .ok_or_else(|| OwmError::Input(format!("window names episode {e} of {}", data.episodes.len())))?;
    if s + h > ep.len.saturating_sub(1) {
        return Err(OwmError::Input(format!(
            "window ({e}, {s}) needs {h} future steps, episode has {}",
            ep.len
        )));
    }
    Ok(())
}

/// Patchified frame stacks for a batch of windows: for each view, `per_win`
/// consecutive frames starting at `offset` from every window start, stacked
/// as (B * per_win, N, patch_dim).
fn patch_stack(
    data: &Dataset,
    windows: &[Window],
    view: View,
    offset: usize,
    per_win: usize,
    frame_px: usize,
    patch: usize,
) -> Result<Array<f32>> {
    let mut flat = Vec::with_capacity(windows.len() * per_win * frame_px * frame_px * 3);
    for &(e, s) in windows {
        let ep = &data.episodes[e];
        for f in 0..per_win {
            flat.extend(ep.frame_f32(view, s + offset + f));
        }
    }
    let frames =
        Array::from_vec(&[windows.len() * per_win, frame_px, frame_px, 3], flat)?;
    crate::encoder::patchify(&frames, patch)
}

/// Expert actions and latent targets for the h steps after each window
/// start. Pooled targets run the current encoder and pooling parameters on
/// the future frames (no gradient: separate tape, values extracted);
/// `pixel_proj` replaces them with a fixed projection of per-frame mean
/// patch vectors.
pub fn make_targets(
    policy: &Policy<f32>,
    pixel_proj: Option<&Array<f32>>,
    data: &Dataset,
    windows: &[Window],
) -> Result<TargetBatch> {
    let cfg = &policy.cfg;
    let (h, k, d) = (cfg.horizon, cfg.tokens_per_view, cfg.d_model);
    let b = windows.len();
    for &w in windows {
        check_window(data, w, h)?;
    }

    let mut a = Vec::with_capacity(b * h * ACTION_DIM);
    for &(e, s) in windows {
        for f in 0..h {
            a.extend_from_slice(data.episodes[e].action_row(s + f));
        }
    }
    let a = Array::from_vec(&[b, h, ACTION_DIM], a)?;

    if !cfg.latent_branch {
        return Ok(TargetBatch { a, z: Vec::new() });
    }

    let mut tape = Tape::<f32>::new();
    let tids = policy.bind(&mut tape, false);
    let mut patch_ids = Vec::with_capacity(3);
    for view in VIEWS {
        let p = patch_stack(data, windows, view, 1, h, cfg.frame_px, cfg.patch)?;
        patch_ids.push(tape.constant(p));
    }
    let patch_ids = [patch_ids[0], patch_ids[1], patch_ids[2]];

    let z = match pixel_proj {
        None => policy
            .world_tokens(&mut tape, &tids, &patch_ids, h)?
            .iter()
            .map(|w| tape.value(w.tokens).clone())
            .collect::<Vec<_>>(),
        Some(proj) => {
            let n = cfg.tokens_per_frame() as f64;
            let pid = tape.constant(proj.clone());
            patch_ids
                .iter()
                .map(|&p| -> Result<Array<f32>> {
                    // Mean patch vector per frame, one fixed projection,
                    // the same token duplicated across the k slots.
                    let summed = tape.sum_axis(p, 1)?;
                    let mean = tape.affine(summed, 1.0 / n, 0.0)?;
                    let tok = tape.matmul(mean, pid)?;
                    let tok = tape.reshape(tok, &[b, h, 1, d])?;
                    let copies = vec![tok; k];
                    let wide = tape.concat(&copies, 2)?;
                    Ok(tape.value(wide).clone())
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(TargetBatch { a, z })
}

/// Scales every gradient so the global L2 norm is at most `bound`.
/// Returns the pre-clip norm.
fn clip_global_norm(grads: &mut [Array<f32>], bound: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| {
            let v = v as f64;
            v * v
        })
        .sum();
    let norm = sq.sqrt();
    if norm > bound {
        let scale = (bound / norm) as f32;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Adam moments, one pair per parameter in `Policy::arrays` order.
#[derive(Debug, Clone)]
struct Adam {
    m: Vec<Array<f32>>,
    v: Vec<Array<f32>>,
}

impl Adam {
    fn zeros(policy: &Policy<f32>) -> Self {
        let shapes: Vec<Vec<usize>> =
            policy.arrays().iter().map(|(_, a)| a.shape().to_vec()).collect();
        Adam {
            m: shapes.iter().map(|s| Array::zeros(s)).collect(),
            v: shapes.iter().map(|s| Array::zeros(s)).collect(),
        }
    }

    /// One update at (1-based) step `t`. Weight decay is decoupled and
    /// applies only to rank >= 2 parameters; biases, gains, and the fusion
    /// logits decay-free.
    fn update(&mut self, policy: &mut Policy<f32>, grads: &[Array<f32>], cfg: &RunConfig, t: u64) {
        let bc1 = 1.0 - BETA1.powi(t as i32);
        let bc2 = 1.0 - BETA2.powi(t as i32);
        for (i, (_, p)) in policy.arrays_mut().into_iter().enumerate() {
            let decay = if p.shape().len() >= 2 { cfg.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = grads[i].data();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] as f64;
                let mj = BETA1 * m[j] as f64 + (1.0 - BETA1) * gj;
                let vj = BETA2 * v[j] as f64 + (1.0 - BETA2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let step = (mj / bc1) / ((vj / bc2).sqrt() + ADAM_EPS);
                *w = (*w as f64 - cfg.lr * (step + decay * *w as f64)) as f32;
            }
        }
    }
}

/// Everything a resumed run must restore exactly.
#[derive(Debug)]
pub struct Checkpoint {
    pub params: Vec<(String, Array<f32>)>,
    pub adam_m: Vec<(String, Array<f32>)>,
    pub adam_v: Vec<(String, Array<f32>)>,
    pub step: u64,
    pub seed: u64,
    pub digest: String,
}

impl Checkpoint {
    fn gather(policy: &Policy<f32>, adam: &Adam, step: u64, seed: u64) -> Self {
        let params: Vec<(String, Array<f32>)> =
            policy.arrays().into_iter().map(|(n, a)| (n, a.clone())).collect();
        let adam_m =
            params.iter().zip(&adam.m).map(|((n, _), m)| (n.clone(), m.clone())).collect();
        let adam_v =
            params.iter().zip(&adam.v).map(|((n, _), v)| (n.clone(), v.clone())).collect();
        Checkpoint { params, adam_m, adam_v, step, seed, digest: policy.cfg.digest() }
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut c = ContainerFile::new();
        c.push("meta/step", &[1], RecordData::I64(vec![self.step as i64]))?;
        c.push("meta/seed", &[1], RecordData::I64(vec![self.seed as i64]))?;
        c.push(
            "meta/digest",
            &[self.digest.len()],
            RecordData::U8(self.digest.as_bytes().to_vec()),
        )?;
        for (group, arrays) in
            [("param", &self.params), ("adam_m", &self.adam_m), ("adam_v", &self.adam_v)]
        {
            for (name, a) in arrays {
                c.push(&format!("{group}/{name}"), a.shape(), RecordData::F32(a.data().to_vec()))?;
            }
        }
        c.write_to(path)
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let c = ContainerFile::read_from(path)?;
        let step = c.require_i64_scalar("meta/step")? as u64;
        let seed = c.require_i64_scalar("meta/seed")? as u64;
        let (_, dbytes) = c.require_u8("meta/digest")?;
        let digest = String::from_utf8(dbytes.to_vec())
            .map_err(|_| OwmError::Format("checkpoint digest is not UTF-8".to_string()))?;
        let mut params = Vec::new();
        let mut adam_m = Vec::new();
        let mut adam_v = Vec::new();
        for r in c.records() {
            let (group, name) = match r.name.split_once('/') {
                Some(p) => p,
                None => continue,
            };
            let bucket = match group {
                "param" => &mut params,
                "adam_m" => &mut adam_m,
                "adam_v" => &mut adam_v,
                _ => continue,
            };
            let (shape, data) = c.require_f32(&r.name)?;
            bucket.push((name.to_string(), Array::from_vec(shape, data.to_vec())?));
        }
        Ok(Checkpoint { params, adam_m, adam_v, step, seed, digest })
    }

    /// Overwrites the policy and moments with the stored arrays. Name sets
    /// and shapes must match exactly.
    fn restore(&self, policy: &mut Policy<f32>, adam: &mut Adam) -> Result<()> {
        if self.digest != policy.cfg.digest() {
            return Err(OwmError::Config(format!(
                "checkpoint was trained under config digest {}, current is {}",
                self.digest,
                policy.cfg.digest()
            )));
        }
        let restore_set = |stored: &[(String, Array<f32>)],
                           live: Vec<(String, &mut Array<f32>)>|
         -> Result<()> {
            if stored.len() != live.len() {
                return Err(OwmError::Input(format!(
                    "checkpoint holds {} arrays, model has {}",
                    stored.len(),
                    live.len()
                )));
            }
            for ((sn, sa), (ln, la)) in stored.iter().zip(live) {
                if *sn != ln {
                    return Err(OwmError::Input(format!(
                        "checkpoint array {sn} does not line up with model array {ln}"
                    )));
                }
                if sa.shape() != la.shape() {
                    return Err(OwmError::Input(format!(
                        "checkpoint array {sn} has shape {:?}, model wants {:?}",
                        sa.shape(),
                        la.shape()
                    )));
                }
                *la = sa.clone();
            }
            Ok(())
        };
        restore_set(&self.params, policy.arrays_mut())?;
        let names: Vec<String> = policy.arrays().into_iter().map(|(n, _)| n).collect();
        restore_set(&self.adam_m, names.iter().cloned().zip(adam.m.iter_mut()).collect())?;
        restore_set(&self.adam_v, names.iter().cloned().zip(adam.v.iter_mut()).collect())
    }
}

/// Cumulative window counts for sampling (episode, start) pairs uniformly
/// over all windows rather than over episodes.
struct WindowIndex {
    cumulative: Vec<usize>,
}

impl WindowIndex {
    fn build(data: &Dataset, h: usize) -> Result<Self> {
        let mut cumulative = Vec::with_capacity(data.episodes.len());
        let mut total = 0usize;
        for ep in &data.episodes {
            total += ep.len.saturating_sub(h);
            cumulative.push(total);
        }
        if total == 0 {
            return Err(OwmError::Input(format!(
                "no episode is long enough for horizon {h} (need len >= {})",
                h + 1
            )));
        }
        Ok(WindowIndex { cumulative })
    }

    fn total(&self) -> usize {
        *self.cumulative.last().unwrap()
    }

    fn window(&self, flat: usize) -> Window {
        let e = self.cumulative.partition_point(|&c| c <= flat);
        let before = if e == 0 { 0 } else { self.cumulative[e - 1] };
        (e, flat - before)
    }

    fn sample(&self, rng: &mut impl Rng, batch: usize) -> Vec<Window> {
        (0..batch).map(|_| self.window(rng.random_range(0..self.total()))).collect()
    }
}

fn batch_variance(z: &Array<f32>) -> f64 {
    let data = z.data();
    let n = data.len() as f64;
    let mean: f64 = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n
}

struct MetricsLog {
    file: std::fs::File,
}

impl MetricsLog {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let exists = path.exists();
        let mut opts = OpenOptions::new();
        if append {
            opts.create(true).append(true);
        } else {
            opts.create(true).write(true).truncate(true);
        }
        let mut file = opts.open(path).map_err(|e| OwmError::Input(format!("{path:?}: {e}")))?;
        if !append || !exists {
            file.write_all(METRICS_HEADER.as_bytes())
                .map_err(|e| OwmError::Input(format!("{path:?}: {e}")))?;
        }
        Ok(MetricsLog { file })
    }

    fn row(&mut self, r: MetricsRow) -> Result<()> {
        self.file
            .write_all(r.to_csv().as_bytes())
            .map_err(|e| OwmError::Input(format!("metrics csv: {e}")))
    }
}

/// One training step's graph and bookkeeping. Returns the metrics row; the
/// policy and moments are updated in place.
fn train_step(
    policy: &mut Policy<f32>,
    adam: &mut Adam,
    data: &Dataset,
    index: &WindowIndex,
    pixel_proj: Option<&Array<f32>>,
    sampler: &FlowTimeSampler,
    weights: &LossWeights,
    seed: u64,
    step: u64,
) -> Result<MetricsRow> {
    let cfg = policy.cfg.clone();
    let mut r = rng::stream_indexed(seed, "train/step", step);
    let windows = index.sample(&mut r, cfg.batch);
    let t = sampler.sample_time(&mut r);

    let targets = make_targets(policy, pixel_proj, data, &windows)?;
    for (v, z) in targets.z.iter().enumerate() {
        let var = batch_variance(z);
        if var < COLLAPSE_VAR {
            eprintln!(
                "warning: latent target variance collapsed (view {v}, step {step}, var {var:.3e})"
            );
        }
    }
    let path = JointPathSample::draw(targets.a, targets.z, t, &mut r)?;

    let mut tape = Tape::<f32>::new();
    let tids = policy.bind(&mut tape, true);
    let mut patch_ids = Vec::with_capacity(3);
    for view in VIEWS {
        let p = patch_stack(data, &windows, view, 0, 1, cfg.frame_px, cfg.patch)?;
        patch_ids.push(tape.constant(p));
    }
    let patch_ids = [patch_ids[0], patch_ids[1], patch_ids[2]];
    let mut state = Vec::with_capacity(windows.len() * STATE_DIM);
    let mut lang = Vec::with_capacity(windows.len());
    for &(e, s) in &windows {
        state.extend_from_slice(data.episodes[e].state_row(s));
        lang.push(data.episodes[e].task.index());
    }
    let state = tape.constant(Array::from_vec(&[windows.len(), STATE_DIM], state)?);

    let noisy_z: Vec<TensorId> =
        path.x_z_t.iter().map(|x| tape.constant(x.clone())).collect();
    let noisy_a = tape.constant(path.x_a_t.clone());
    let out = policy.velocities(&mut tape, &tids, &patch_ids, &lang, state, &noisy_z, noisy_a, t)?;

    let u_a = tape.constant(path.u_a.clone());
    let u_z: Vec<TensorId> = path.u_z.iter().map(|u| tape.constant(u.clone())).collect();
    let parts = cfm_loss_graph(&mut tape, out.v_a, u_a, &out.v_z, &u_z, weights)?;

    let total = tape.value(parts.total).item() as f64;
    let action = tape.value(parts.action).item() as f64;
    let mut latent = [0.0f64; 3];
    for (i, &l) in parts.latents.iter().enumerate() {
        latent[i] = tape.value(l).item() as f64;
    }
    if !total.is_finite() {
        return Err(OwmError::Numeric {
            op: "train_step",
            detail: format!("loss {total} at step {step}"),
        });
    }

    let grads = tape.backward(parts.total)?;
    let mut flat: Vec<Array<f32>> = Vec::with_capacity(tids.flat.len());
    for (&id, (_, p)) in tids.flat.iter().zip(policy.arrays()) {
        flat.push(match grads.wrt(id) {
            Some(g) => g.clone(),
            None => Array::zeros(p.shape()),
        });
    }
    let grad_norm = clip_global_norm(&mut flat, cfg.clip_norm);
    if !grad_norm.is_finite() {
        return Err(OwmError::Numeric {
            op: "train_step",
            detail: format!("gradient norm {grad_norm} at step {step}"),
        });
    }

    // Everything up to here left the parameters untouched; keep that state
    // so a bad update can be rolled back before the abort.
    let before = policy.clone();
    adam.update(policy, &flat, &cfg, step + 1);
    for &a in policy.pool.alpha.data() {
        if !a.is_finite() {
            *policy = before;
            return Err(OwmError::Numeric {
                op: "train_step",
                detail: format!("fusion logits left the simplex domain at step {step}"),
            });
        }
    }

    Ok(MetricsRow { step: step + 1, total, action, latent, grad_norm })
}

/// Runs (or resumes) training and leaves a checkpoint at `ckpt_path` plus a
/// metrics CSV at `metrics_path`. On a non-finite loss or gradient the last
/// good state is checkpointed and the error is returned.
pub fn train(
    data: &Dataset,
    cfg: &RunConfig,
    seed: u64,
    ckpt_path: &Path,
    metrics_path: &Path,
    resume_from: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let index = WindowIndex::build(data, cfg.horizon)?;

    let mut policy = Policy::<f32>::init(cfg, &mut rng::stream(seed, "train/init"))?;
    let mut adam = Adam::zeros(&policy);
    let mut start: u64 = 0;
    let mut run_seed = seed;
    if let Some(path) = resume_from {
        let ckpt = Checkpoint::read_from(path)?;
        ckpt.restore(&mut policy, &mut adam)?;
        start = ckpt.step;
        run_seed = ckpt.seed;
    }

    let pixel_proj = match cfg.latent_target {
        LatentTarget::Pooled => None,
        LatentTarget::Pixel => {
            let pd = cfg.patch * cfg.patch * 3;
            let scale = 1.0 / (pd as f64).sqrt();
            let mut r = rng::stream(run_seed, "train/pixel-target");
            let data = (0..pd * cfg.d_model)
                .map(|_| {
                    let g: f64 = rand_distr::Distribution::sample(
                        &rand_distr::StandardNormal,
                        &mut r,
                    );
                    (g * scale) as f32
                })
                .collect();
            Some(Array::from_vec(&[pd, cfg.d_model], data)?)
        }
    };

    let mut weights = LossWeights::from_config(cfg);
    if !cfg.latent_loss || !cfg.latent_branch {
        weights.lambda_r = 0.0;
        weights.lambda_w1 = 0.0;
        weights.lambda_w2 = 0.0;
    }
    let sampler = FlowTimeSampler::new(cfg.time_schedule);

    let mut log = MetricsLog::open(metrics_path, resume_from.is_some())?;
    let mut metrics = Vec::new();
    for step in start..cfg.steps as u64 {
        let row = match train_step(
            &mut policy,
            &mut adam,
            data,
            &index,
            pixel_proj.as_ref(),
            &sampler,
            &weights,
            run_seed,
            step,
        ) {
            Ok(row) => row,
            Err(e) => {
                // Keep the last state that produced a finite loss.
                Checkpoint::gather(&policy, &adam, step, run_seed).write_to(ckpt_path)?;
                return Err(e);
            }
        };
        log.row(row)?;
        metrics.push(row);
        if cfg.ckpt_every > 0 && row.step % cfg.ckpt_every as u64 == 0 {
            Checkpoint::gather(&policy, &adam, row.step, run_seed).write_to(ckpt_path)?;
        }
    }

    let end = cfg.steps.max(start as usize) as u64;
    Checkpoint::gather(&policy, &adam, end, run_seed).write_to(ckpt_path)?;
    let steps_run = metrics.len();
    Ok(TrainOutcome { policy, metrics, steps_run })
}

/// Rebuilds the policy stored in a checkpoint. The config must be the one
/// the checkpoint was trained under (digest-checked).
pub fn load_policy(path: &Path, cfg: &RunConfig) -> Result<Policy<f32>> {
    let ckpt = Checkpoint::read_from(path)?;
    let mut policy = Policy::<f32>::init(cfg, &mut rng::stream(ckpt.seed, "train/init"))?;
    let mut adam = Adam::zeros(&policy);
    ckpt.restore(&mut policy, &mut adam)?;
    Ok(policy)
}
