//! Ablation sweep driver: train-from-scratch plus closed-loop evaluation
//! for every (grid value, seed) cell along one config axis. Cells are
//! independent and run on parallel workers; rows come back in grid-major,
//! seed-minor order and a single writer emits the CSV at the end.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use super::budget::{inference_token_count, BudgetConfig};
use crate::config::RunConfig;
use crate::envsim::{evaluate, Dataset, TaskId};
use crate::error::{OwmError, Result};
use crate::model::obs_policy;
use crate::train::train;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    TokensPerView,
    PoolingBranch,
    FusionTemperature,
    LossMetric,
    LatentBranch,
    LatentLoss,
    Horizon,
    LatentTargetSpace,
}

pub const AXES: [SweepAxis; 8] = [
    SweepAxis::TokensPerView,
    SweepAxis::PoolingBranch,
    SweepAxis::FusionTemperature,
    SweepAxis::LossMetric,
    SweepAxis::LatentBranch,
    SweepAxis::LatentLoss,
    SweepAxis::Horizon,
    SweepAxis::LatentTargetSpace,
];

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::TokensPerView => "tokens_per_view",
            SweepAxis::PoolingBranch => "pooling_branch",
            SweepAxis::FusionTemperature => "fusion_temperature",
            SweepAxis::LossMetric => "loss_metric",
            SweepAxis::LatentBranch => "latent_branch",
            SweepAxis::LatentLoss => "latent_loss",
            SweepAxis::Horizon => "horizon",
            SweepAxis::LatentTargetSpace => "latent_target_space",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        AXES.iter().copied().find(|a| a.name() == name).ok_or_else(|| {
            let known: Vec<&str> = AXES.iter().map(|a| a.name()).collect();
            OwmError::Config(format!("unknown sweep axis {name:?}; expected one of {known:?}"))
        })
    }

    /// Rewrite `cfg` for one grid value. Returns a validated config; a
    /// value the axis cannot parse is an error before any training runs.
    pub fn apply(&self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut cfg = base.clone();
        match self {
            SweepAxis::TokensPerView => {
                cfg.set("tokens_per_view", value)?;
            }
            SweepAxis::PoolingBranch => {
                cfg.set("pooling_branch", value)?;
            }
            SweepAxis::FusionTemperature => {
                // The temperature grid moves both softmaxes together: the
                // token-level and view-level temperatures share one symbol
                // in the sweep.
                cfg.set("tau", value)?;
                cfg.set("fusion_tau", value)?;
            }
            SweepAxis::LossMetric => {
                // Action branch first, latent branch second; "L1/L2" and
                // the slashless "L1L2" both appear in grid notation.
                let (a, z) = value
                    .split_once('/')
                    .or_else(|| (value.len() == 4).then(|| value.split_at(2)))
                    .ok_or_else(|| {
                        OwmError::Config(format!(
                            "loss_metric value {value:?}; expected e.g. L1/L2 or L1L2"
                        ))
                    })?;
                cfg.set("metric_a", a)?;
                cfg.set("metric_z", z)?;
            }
            SweepAxis::LatentBranch => {
                cfg.set("latent_branch", value)?;
                // No branch means no latent loss to weight.
                if !cfg.latent_branch {
                    cfg.latent_loss = false;
                }
            }
            SweepAxis::LatentLoss => {
                // Off keeps the latent queries in the sequence and zeroes
                // every latent loss weight.
                cfg.set("latent_loss", value)?;
            }
            SweepAxis::Horizon => {
                cfg.set("horizon", value)?;
                cfg.infer_ah = cfg.infer_ah.min(cfg.horizon);
                cfg.replan = cfg.replan.min(cfg.infer_ah);
            }
            SweepAxis::LatentTargetSpace => {
                cfg.set("latent_target", value)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub axis: &'static str,
    pub value: String,
    pub seed: u64,
    pub success_overall: f64,
    /// One rate per configured task, in config order.
    pub success_by_task: Vec<f64>,
    pub final_loss: f64,
    pub inference_tokens: usize,
    pub wall_secs: f64,
    /// "ok", or "diverged" when training hit a non-finite loss; diverged
    /// rows carry nan in the float columns.
    pub status: &'static str,
}

fn csv_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "nan".to_string()
    }
}

pub fn rows_to_csv(rows: &[SweepRow], tasks: &[String]) -> String {
    let mut out = String::from("axis,value,seed");
    for t in tasks {
        out.push_str(&format!(",success_{t}"));
    }
    out.push_str(",success_overall,final_loss,inference_tokens,wall_secs,status\n");
    for r in rows {
        out.push_str(&format!("{},{},{}", r.axis, r.value, r.seed));
        for s in &r.success_by_task {
            out.push_str(&format!(",{}", csv_num(*s)));
        }
        out.push_str(&format!(
            ",{},{},{},{:.3},{}\n",
            csv_num(r.success_overall),
            csv_num(r.final_loss),
            r.inference_tokens,
            r.wall_secs,
            r.status
        ));
    }
    out
}

/// Deployment-budget token count for a cell: the published (V = 3,
/// h_z = 20, h_a = 30) layout at the cell's bottleneck width, with the
/// latent window dropped when the branch is off.
fn cell_tokens(cfg: &RunConfig) -> Result<usize> {
    let mut b = BudgetConfig::paper_default(cfg.tokens_per_view);
    if !cfg.latent_branch {
        b.latent_steps = 0;
    }
    inference_token_count(&b)
}

fn run_cell(cfg: &RunConfig, seed: u64, data: &Dataset, work: &Path) -> Result<(f64, Vec<f64>, f64, &'static str)> {
    let ckpt = work.join(format!("cell-{seed}.owm"));
    let metrics = work.join(format!("cell-{seed}.csv"));
    let outcome = match train(data, cfg, seed, &ckpt, &metrics, None) {
        Ok(o) => o,
        Err(OwmError::Numeric { .. }) => {
            return Ok((f64::NAN, vec![f64::NAN; cfg.tasks.len()], f64::NAN, "diverged"));
        }
        Err(e) => return Err(e),
    };
    let final_loss = outcome.metrics.last().map_or(f64::NAN, |m| m.total);
    let tasks: Vec<TaskId> = cfg
        .tasks
        .iter()
        .map(|t| TaskId::from_name(t))
        .collect::<Result<_>>()?;
    let report = evaluate(
        obs_policy(&outcome.policy, cfg.infer_ah, seed),
        &tasks,
        cfg.eval_episodes,
        cfg.infer_ah,
        cfg.replan,
        cfg.max_steps as u32,
        seed,
    )?;
    let by_task = tasks.iter().map(|&t| report.success_rate(Some(t))).collect();
    Ok((report.success_rate(None), by_task, final_loss, "ok"))
}

/// Train and evaluate every (grid value, seed) cell and write one CSV to
/// `out_csv`. Training divergence flags the row and the sweep continues;
/// any other failure aborts. Returns the rows in deterministic order
/// (grid-major, seed-minor) independent of worker scheduling.
pub fn sweep(
    axis: SweepAxis,
    grid: &[String],
    base: &RunConfig,
    seeds: &[u64],
    data: &Dataset,
    out_csv: &Path,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(OwmError::Config("sweep needs a non-empty grid and seed list".to_string()));
    }
    // Every grid value must produce a valid config before any cell runs.
    let configs: Vec<(String, RunConfig)> = grid
        .iter()
        .map(|v| Ok((v.clone(), axis.apply(base, v)?)))
        .collect::<Result<_>>()?;

    let work = tempfile::tempdir()?;
    let cells: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|g| seeds.iter().map(move |&s| (g, s)))
        .collect();
    let rows: Vec<SweepRow> = cells
        .par_iter()
        .map(|&(g, seed)| -> Result<SweepRow> {
            let (value, cfg) = &configs[g];
            let cell_dir = work.path().join(format!("g{g}-s{seed}"));
            std::fs::create_dir_all(&cell_dir)?;
            let started = Instant::now();
            let (overall, by_task, final_loss, status) = run_cell(cfg, seed, data, &cell_dir)?;
            Ok(SweepRow {
                axis: axis.name(),
                value: value.clone(),
                seed,
                success_overall: overall,
                success_by_task: by_task,
                final_loss,
                inference_tokens: cell_tokens(cfg)?,
                wall_secs: started.elapsed().as_secs_f64(),
                status,
            })
        })
        .collect::<Result<_>>()?;

    let csv = rows_to_csv(&rows, &base.tasks);
    if let Some(parent) = out_csv.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out_csv, csv)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{LatentTarget, Metric, PoolingBranch};
    use crate::envsim::generate_dataset;

    #[test]
    fn axis_names_roundtrip_and_unknown_axis_lists_the_choices() {
        for axis in AXES {
            assert_eq!(SweepAxis::from_name(axis.name()).unwrap(), axis);
        }
        let err = SweepAxis::from_name("temperature").unwrap_err().to_string();
        assert!(err.contains("fusion_temperature"), "{err}");
        assert!(err.contains("latent_target_space"), "{err}");
    }

    #[test]
    fn apply_rewrites_exactly_the_swept_knobs() {
        let base = RunConfig::default();

        let cfg = SweepAxis::TokensPerView.apply(&base, "3").unwrap();
        assert_eq!(cfg.tokens_per_view, 3);

        let cfg = SweepAxis::PoolingBranch.apply(&base, "sum").unwrap();
        assert_eq!(cfg.pooling_branch, PoolingBranch::Sum);

        let cfg = SweepAxis::FusionTemperature.apply(&base, "0.5").unwrap();
        assert_eq!((cfg.tau, cfg.fusion_tau), (0.5, 0.5));

        let cfg = SweepAxis::LossMetric.apply(&base, "L1/L2").unwrap();
        assert_eq!((cfg.metric_a, cfg.metric_z), (Metric::L1, Metric::L2));
        let cfg = SweepAxis::LossMetric.apply(&base, "L2L1").unwrap();
        assert_eq!((cfg.metric_a, cfg.metric_z), (Metric::L2, Metric::L1));
        assert!(SweepAxis::LossMetric.apply(&base, "L3/L2").is_err());
        assert!(SweepAxis::LossMetric.apply(&base, "L1").is_err());

        let cfg = SweepAxis::LatentBranch.apply(&base, "false").unwrap();
        assert!(!cfg.latent_branch && !cfg.latent_loss);

        let cfg = SweepAxis::LatentLoss.apply(&base, "false").unwrap();
        assert!(cfg.latent_branch && !cfg.latent_loss);

        let cfg = SweepAxis::Horizon.apply(&base, "2").unwrap();
        assert_eq!((cfg.horizon, cfg.infer_ah, cfg.replan), (2, 2, 2));

        let cfg = SweepAxis::LatentTargetSpace.apply(&base, "pixel").unwrap();
        assert_eq!(cfg.latent_target, LatentTarget::Pixel);

        // Bad values fail before any training would run.
        assert!(SweepAxis::TokensPerView.apply(&base, "0").is_err());
        assert!(SweepAxis::PoolingBranch.apply(&base, "fused").is_err());
    }

    #[test]
    fn token_column_reproduces_the_published_ladder() {
        let base = RunConfig::default();
        for (k, want) in [("1", 90), ("3", 210), ("6", 390), ("12", 750)] {
            let cfg = SweepAxis::TokensPerView.apply(&base, k).unwrap();
            assert_eq!(cell_tokens(&cfg).unwrap(), want);
        }
        let off = SweepAxis::LatentBranch.apply(&base, "false").unwrap();
        assert_eq!(cell_tokens(&off).unwrap(), 30);
    }

    fn tiny_base() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.d_model = 16;
        cfg.enc_blocks = 1;
        cfg.enc_heads = 2;
        cfg.gen_layers = 1;
        cfg.gen_heads = 2;
        cfg.horizon = 2;
        cfg.infer_ah = 2;
        cfg.replan = 2;
        cfg.batch = 2;
        cfg.steps = 3;
        cfg.eval_episodes = 1;
        cfg.max_steps = 30;
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn sweep_emits_one_well_formed_row_per_cell() {
        let dir = tempfile::tempdir().unwrap();
        let data_path = dir.path().join("episodes.owm");
        let data = generate_dataset(&[TaskId::Push], 3, 40, 11, &data_path).unwrap();

        let base = tiny_base();
        let out = dir.path().join("report.csv");
        let grid = ["0.5".to_string(), "0.1".to_string()];
        let rows = sweep(SweepAxis::FusionTemperature, &grid, &base, &[0, 1], &data, &out).unwrap();

        assert_eq!(rows.len(), 4);
        let csv = std::fs::read_to_string(&out).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "axis,value,seed,success_push,success_overall,final_loss,inference_tokens,wall_secs,status");
        assert_eq!(lines.len(), 5);
        // Deterministic cell order: grid-major, seed-minor.
        assert!(lines[1].starts_with("fusion_temperature,0.5,0,"));
        assert!(lines[2].starts_with("fusion_temperature,0.5,1,"));
        assert!(lines[3].starts_with("fusion_temperature,0.1,0,"));
        for row in &rows {
            assert_eq!(row.status, "ok");
            assert!(row.final_loss.is_finite());
            assert_eq!(row.inference_tokens, 90);
            assert!(row.wall_secs > 0.0);
            assert!((0.0..=1.0).contains(&row.success_overall));
        }
    }

    #[test]
    fn divergence_flags_the_row_and_the_sweep_continues() {
        let dir = tempfile::tempdir().unwrap();
        let data_path = dir.path().join("episodes.owm");
        let data = generate_dataset(&[TaskId::Push], 3, 40, 13, &data_path).unwrap();

        // A huge learning rate explodes the parameters after the first
        // update; the next step's loss is non-finite and training aborts
        // with a numeric error, which must flag the row, not the sweep.
        let mut base = tiny_base();
        base.lr = 1e18;
        base.clip_norm = 1e18;
        let out = dir.path().join("report.csv");
        let grid = ["2".to_string()];
        let rows = sweep(SweepAxis::Horizon, &grid, &base, &[0], &data, &out).unwrap();

        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].status, "diverged");
        assert!(rows[0].success_overall.is_nan());
        assert!(rows[0].final_loss.is_nan());
        let csv = std::fs::read_to_string(&out).unwrap();
        assert!(csv.lines().nth(1).unwrap().contains("nan,nan"), "{csv}");
        assert!(csv.lines().nth(1).unwrap().ends_with(",diverged"), "{csv}");
    }

    #[test]
    fn invalid_grid_values_abort_before_any_training() {
        let dir = tempfile::tempdir().unwrap();
        let data = Dataset { episodes: vec![] };
        let out = dir.path().join("report.csv");
        let grid = ["3".to_string(), "not_a_number".to_string()];
        let err = sweep(SweepAxis::TokensPerView, &grid, &tiny_base(), &[0], &data, &out);
        assert!(err.is_err());
        assert!(!out.exists());
    }
}
