//! Flat `key = value` run configuration.
//!
//! One file (or string) configures every subsystem. Parsing starts from the
//! documented defaults and applies overrides; unknown keys, duplicate keys,
//! and malformed values are hard errors so a typo cannot silently fall back
//! to a default. [`RunConfig::canonical`] serializes every key in a fixed
//! order, which is what checkpoints embed and resume compares against.

use crate::error::{OwmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolingBranch {
    /// All three scoring branches fused by learned weights.
    Adaptive,
    Max,
    Sum,
    Learn,
    /// Unweighted token mean; no scoring at all.
    StaticMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeSchedule {
    /// Beta(1.5, 1) draw remapped as t = 1 - b: mass concentrates near t = 0.
    LowBias,
    /// Raw Beta(1.5, 1) draw used as t directly.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionPattern {
    Full,
    BlockCausal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentTarget {
    /// Encoder + pooling output, recomputed online, gradients stopped.
    Pooled,
    /// Fixed random projection of raw patch means; no learned encoder in the
    /// target path.
    Pixel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Observation and encoder.
    pub frame_px: usize,
    pub patch: usize,
    pub d_model: usize,
    pub enc_blocks: usize,
    pub enc_heads: usize,
    // Pooling.
    pub tau: f64,
    pub fusion_tau: f64,
    pub pooling_branch: PoolingBranch,
    pub tokens_per_view: usize,
    // Flow matching.
    pub time_schedule: TimeSchedule,
    pub flow_steps: usize,
    // Loss.
    pub lambda_a: f64,
    pub lambda_r: f64,
    pub lambda_w1: f64,
    pub lambda_w2: f64,
    pub metric_a: Metric,
    pub metric_z: Metric,
    // Generator.
    pub gen_layers: usize,
    pub gen_heads: usize,
    pub horizon: usize,
    pub attention_pattern: AttentionPattern,
    pub latent_branch: bool,
    pub latent_loss: bool,
    pub latent_target: LatentTarget,
    // Environment and data.
    pub tasks: Vec<String>,
    pub episodes: usize,
    pub max_steps: usize,
    // Training.
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub ckpt_every: usize,
    // Closed-loop evaluation.
    pub infer_ah: usize,
    pub replan: usize,
    pub eval_episodes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            frame_px: 32,
            patch: 8,
            d_model: 64,
            enc_blocks: 2,
            enc_heads: 4,
            tau: 0.1,
            fusion_tau: 0.1,
            pooling_branch: PoolingBranch::Adaptive,
            tokens_per_view: 1,
            time_schedule: TimeSchedule::LowBias,
            flow_steps: 10,
            lambda_a: 1.0,
            lambda_r: 0.1,
            lambda_w1: 0.1,
            lambda_w2: 0.1,
            metric_a: Metric::L1,
            metric_z: Metric::L1,
            gen_layers: 4,
            gen_heads: 4,
            horizon: 8,
            attention_pattern: AttentionPattern::Full,
            latent_branch: true,
            latent_loss: true,
            latent_target: LatentTarget::Pooled,
            tasks: vec!["push".to_string()],
            episodes: 200,
            max_steps: 120,
            steps: 3000,
            batch: 16,
            lr: 3e-4,
            weight_decay: 0.01,
            clip_norm: 1.0,
            ckpt_every: 0,
            infer_ah: 8,
            replan: 4,
            eval_episodes: 50,
        }
    }
}

pub const TASK_NAMES: [&str; 3] = ["push", "pick_place", "rearrange"];

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown and
    /// duplicate keys are errors. Returns a validated config.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(OwmError::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1)));
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(OwmError::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            cfg.set(key, value).map_err(|e| OwmError::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    /// Applies one override; does not re-validate.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| OwmError::Config(format!("key {key}: cannot parse {v:?}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(OwmError::Config(format!("key {key}: expected true/false, got {v:?}"))),
            }
        }
        match key {
            "frame_px" => self.frame_px = num(key, value)?,
            "patch" => self.patch = num(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "enc_blocks" => self.enc_blocks = num(key, value)?,
            "enc_heads" => self.enc_heads = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "fusion_tau" => self.fusion_tau = num(key, value)?,
            "pooling_branch" => {
                self.pooling_branch = match value {
                    "adaptive" => PoolingBranch::Adaptive,
                    "max" => PoolingBranch::Max,
                    "sum" => PoolingBranch::Sum,
                    "learn" => PoolingBranch::Learn,
                    "static_mean" => PoolingBranch::StaticMean,
                    _ => return Err(OwmError::Config(format!("key {key}: unknown branch {value:?}"))),
                }
            }
            "tokens_per_view" => self.tokens_per_view = num(key, value)?,
            "time_schedule" => {
                self.time_schedule = match value {
                    "low_bias" => TimeSchedule::LowBias,
                    "literal" => TimeSchedule::Literal,
                    _ => return Err(OwmError::Config(format!("key {key}: unknown schedule {value:?}"))),
                }
            }
            "flow_steps" => self.flow_steps = num(key, value)?,
            "lambda_a" => self.lambda_a = num(key, value)?,
            "lambda_r" => self.lambda_r = num(key, value)?,
            "lambda_w1" => self.lambda_w1 = num(key, value)?,
            "lambda_w2" => self.lambda_w2 = num(key, value)?,
            "metric_a" => self.metric_a = parse_metric(key, value)?,
            "metric_z" => self.metric_z = parse_metric(key, value)?,
            "gen_layers" => self.gen_layers = num(key, value)?,
            "gen_heads" => self.gen_heads = num(key, value)?,
            "horizon" => self.horizon = num(key, value)?,
            "attention_pattern" => {
                self.attention_pattern = match value {
                    "full" => AttentionPattern::Full,
                    "block_causal" => AttentionPattern::BlockCausal,
                    _ => return Err(OwmError::Config(format!("key {key}: unknown pattern {value:?}"))),
                }
            }
            "latent_branch" => self.latent_branch = flag(key, value)?,
            "latent_loss" => self.latent_loss = flag(key, value)?,
            "latent_target" => {
                self.latent_target = match value {
                    "pooled" => LatentTarget::Pooled,
                    "pixel" => LatentTarget::Pixel,
                    _ => return Err(OwmError::Config(format!("key {key}: unknown target {value:?}"))),
                }
            }
            "tasks" => {
                self.tasks = value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
            }
            "episodes" => self.episodes = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "ckpt_every" => self.ckpt_every = num(key, value)?,
            "infer_ah" => self.infer_ah = num(key, value)?,
            "replan" => self.replan = num(key, value)?,
            "eval_episodes" => self.eval_episodes = num(key, value)?,
            _ => return Err(OwmError::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(OwmError::Config(msg));
        if self.patch == 0 || self.frame_px == 0 || self.frame_px % self.patch != 0 {
            return fail(format!("frame_px {} must be a positive multiple of patch {}", self.frame_px, self.patch));
        }
        if self.d_model == 0 || self.enc_heads == 0 || self.d_model % self.enc_heads != 0 {
            return fail(format!("d_model {} must divide by enc_heads {}", self.d_model, self.enc_heads));
        }
        if self.gen_heads == 0 || self.d_model % self.gen_heads != 0 {
            return fail(format!("d_model {} must divide by gen_heads {}", self.d_model, self.gen_heads));
        }
        if self.enc_blocks == 0 || self.gen_layers == 0 {
            return fail("enc_blocks and gen_layers must be positive".to_string());
        }
        if self.tau <= 0.0 || self.fusion_tau <= 0.0 {
            return fail(format!("temperatures must be positive (tau {}, fusion_tau {})", self.tau, self.fusion_tau));
        }
        let n = self.tokens_per_frame();
        if self.tokens_per_view == 0 || self.tokens_per_view > n {
            return fail(format!("tokens_per_view {} outside 1..={n}", self.tokens_per_view));
        }
        if self.flow_steps == 0 {
            return fail("flow_steps must be positive".to_string());
        }
        if [self.lambda_a, self.lambda_r, self.lambda_w1, self.lambda_w2].iter().any(|l| !l.is_finite() || *l < 0.0) {
            return fail("loss weights must be finite and non-negative".to_string());
        }
        if self.horizon == 0 {
            return fail("horizon must be positive".to_string());
        }
        if self.infer_ah == 0 || self.infer_ah > self.horizon {
            return fail(format!("infer_ah {} outside 1..=horizon {}", self.infer_ah, self.horizon));
        }
        if self.replan == 0 || self.replan > self.infer_ah {
            return fail(format!("replan {} outside 1..=infer_ah {}", self.replan, self.infer_ah));
        }
        if self.tasks.is_empty() {
            return fail("tasks must name at least one task".to_string());
        }
        for t in &self.tasks {
            if !TASK_NAMES.contains(&t.as_str()) {
                return fail(format!("unknown task {t:?} (expected one of {TASK_NAMES:?})"));
            }
        }
        if self.batch == 0 || self.steps == 0 {
            return fail("steps and batch must be positive".to_string());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return fail("lr and clip_norm must be positive".to_string());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail("weight_decay must be non-negative".to_string());
        }
        Ok(())
    }

    /// Patch tokens per frame at the configured resolution.
    pub fn tokens_per_frame(&self) -> usize {
        let side = self.frame_px / self.patch;
        side * side
    }

    /// Every key in fixed order with current values; parsing this text
    /// reproduces the config exactly.
    pub fn canonical(&self) -> String {
        let branch = match self.pooling_branch {
            PoolingBranch::Adaptive => "adaptive",
            PoolingBranch::Max => "max",
            PoolingBranch::Sum => "sum",
            PoolingBranch::Learn => "learn",
            PoolingBranch::StaticMean => "static_mean",
        };
        let schedule = match self.time_schedule {
            TimeSchedule::LowBias => "low_bias",
            TimeSchedule::Literal => "literal",
        };
        let pattern = match self.attention_pattern {
            AttentionPattern::Full => "full",
            AttentionPattern::BlockCausal => "block_causal",
        };
        let target = match self.latent_target {
            LatentTarget::Pooled => "pooled",
            LatentTarget::Pixel => "pixel",
        };
        format!(
            "frame_px = {}\npatch = {}\nd_model = {}\nenc_blocks = {}\nenc_heads = {}\n\
             tau = {}\nfusion_tau = {}\npooling_branch = {branch}\ntokens_per_view = {}\n\
             time_schedule = {schedule}\nflow_steps = {}\n\
             lambda_a = {}\nlambda_r = {}\nlambda_w1 = {}\nlambda_w2 = {}\nmetric_a = {}\nmetric_z = {}\n\
             gen_layers = {}\ngen_heads = {}\nhorizon = {}\nattention_pattern = {pattern}\n\
             latent_branch = {}\nlatent_loss = {}\nlatent_target = {target}\n\
             tasks = {}\nepisodes = {}\nmax_steps = {}\n\
             steps = {}\nbatch = {}\nlr = {}\nweight_decay = {}\nclip_norm = {}\nckpt_every = {}\n\
             infer_ah = {}\nreplan = {}\neval_episodes = {}\n",
            self.frame_px,
            self.patch,
            self.d_model,
            self.enc_blocks,
            self.enc_heads,
            self.tau,
            self.fusion_tau,
            self.tokens_per_view,
            self.flow_steps,
            self.lambda_a,
            self.lambda_r,
            self.lambda_w1,
            self.lambda_w2,
            metric_name(self.metric_a),
            metric_name(self.metric_z),
            self.gen_layers,
            self.gen_heads,
            self.horizon,
            self.latent_branch,
            self.latent_loss,
            self.tasks.join(","),
            self.episodes,
            self.max_steps,
            self.steps,
            self.batch,
            self.lr,
            self.weight_decay,
            self.clip_norm,
            self.ckpt_every,
            self.infer_ah,
            self.replan,
            self.eval_episodes,
        )
    }

    /// FNV-1a hash over the trajectory-defining keys of the canonical
    /// text, as 16 hex digits. Checkpoints embed it; resume refuses a
    /// config whose digest differs. Schedule-only keys (steps, ckpt_every,
    /// infer_ah, replan, eval_episodes) are excluded so a run can be
    /// extended or re-evaluated without invalidating its checkpoints.
    pub fn digest(&self) -> String {
        let schedule_only = ["steps = ", "ckpt_every = ", "infer_ah = ", "replan = ", "eval_episodes = "];
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for line in self.canonical().lines() {
            if schedule_only.iter().any(|k| line.starts_with(k)) {
                continue;
            }
            for b in line.bytes().chain(std::iter::once(b'\n')) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        format!("{h:016x}")
    }
}

fn parse_metric(key: &str, value: &str) -> Result<Metric> {
    match value {
        "L1" => Ok(Metric::L1),
        "L2" => Ok(Metric::L2),
        _ => Err(OwmError::Config(format!("key {key}: expected L1 or L2, got {value:?}"))),
    }
}

pub fn metric_name(m: Metric) -> &'static str {
    match m {
        Metric::L1 => "L1",
        Metric::L2 => "L2",
    }
}
