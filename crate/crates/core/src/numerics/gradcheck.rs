//! Gradient verification: reverse-mode vs. central finite differences.
//!
//! The checker draws random probe inputs, redraws any probe that lands
//! within the near-tie margin of a non-differentiable point (max ties, |x|
//! near 0 under abs), and compares tape gradients coordinate-wise against
//! second-order central differences computed in f64.

use super::{Array, Tape, TensorId};
use crate::error::{OwmError, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Scalar-valued differentiable function under test: builds a graph on the
/// tape from pre-registered inputs and returns the loss node.
pub trait LossFn: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId> {}
impl<F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>> LossFn for F {}

#[derive(Debug, Clone)]
pub struct GradCheckSettings {
    /// Random input configurations to test.
    pub probes: usize,
    /// Max relative error accepted, |g_tape - g_fd| / max(1, |g_tape|, |g_fd|).
    pub tolerance: f64,
    /// Coordinates checked per probe; sampled without replacement when the
    /// input has more.
    pub coord_cap: usize,
    /// Probes landing this close to a non-differentiable point are redrawn.
    pub tie_margin: f64,
    /// Central-difference step, scaled by max(1, |x|) per coordinate.
    pub fd_step: f64,
    pub max_redraws: usize,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            probes: 16,
            tolerance: 1e-5,
            coord_cap: 150,
            tie_margin: 1e-3,
            fd_step: 1e-6,
            max_redraws: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub probes_run: usize,
    pub redraws: usize,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    /// (input index, flat coordinate) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max_rel_err={:.3e} (tol {:.0e}) probes={} coords={} redraws={} -> {}",
            self.name,
            self.max_rel_err,
            self.tolerance,
            self.probes_run,
            self.coords_checked,
            self.redraws,
            if self.pass() { "PASS" } else { "FAIL" },
        )
    }
}

fn run(f: &impl LossFn, inputs: &[Array<f64>], margin: Option<f64>) -> Result<(f64, Vec<Array<f64>>, bool)> {
    let mut tape = Tape::new();
    tape.set_tie_margin(margin);
    let ids: Vec<TensorId> = inputs.iter().map(|a| tape.input(a.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let out = ids
        .iter()
        .zip(inputs)
        .map(|(id, a)| grads.wrt(*id).cloned().unwrap_or_else(|| Array::zeros(a.shape())))
        .collect();
    Ok((value, out, tape.near_tie_seen()))
}

fn eval_only(f: &impl LossFn, inputs: &[Array<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|a| tape.input(a.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    Ok(tape.value(loss).item())
}

/// One forward and backward pass; returns (loss value, gradients aligned
/// with `inputs`, zero-filled for inputs the graph never uses).
pub fn forward_backward(f: impl LossFn, inputs: &[Array<f64>]) -> Result<(f64, Vec<Array<f64>>)> {
    let (v, g, _) = run(&f, inputs, None)?;
    Ok((v, g))
}

/// Full central-difference gradient; two forward passes per coordinate.
pub fn finite_difference_gradient(
    f: impl LossFn,
    inputs: &[Array<f64>],
    step: f64,
) -> Result<Vec<Array<f64>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Array::zeros(inputs[i].shape());
        for c in 0..inputs[i].len() {
            g.data_mut()[c] = fd_coord(&f, inputs, i, c, step)?;
        }
        out.push(g);
    }
    Ok(out)
}

fn fd_coord(f: &impl LossFn, inputs: &[Array<f64>], i: usize, c: usize, step: f64) -> Result<f64> {
    let x = inputs[i].data()[c];
    let h = step * x.abs().max(1.0);
    let mut work = inputs.to_vec();
    work[i].data_mut()[c] = x + h;
    let fp = eval_only(f, &work)?;
    work[i].data_mut()[c] = x - h;
    let fm = eval_only(f, &work)?;
    Ok((fp - fm) / (2.0 * h))
}

/// Checks reverse-mode gradients of `f` against central differences at
/// random N(0,1) probe inputs with the given shapes.
pub fn check_gradients(
    name: &str,
    shapes: &[Vec<usize>],
    settings: &GradCheckSettings,
    seed: u64,
    f: impl LossFn,
) -> Result<GradReport> {
    let mut rng = crate::rng::stream(seed, "gradcheck");
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if total == 0 {
        return Err(OwmError::Config(format!("gradcheck {name}: no input coordinates")));
    }
    let mut report = GradReport {
        name: name.to_string(),
        probes_run: 0,
        redraws: 0,
        coords_checked: 0,
        max_rel_err: 0.0,
        worst: None,
        tolerance: settings.tolerance,
    };
    for _ in 0..settings.probes {
        let (inputs, grads) = loop {
            let inputs: Vec<Array<f64>> = shapes
                .iter()
                .map(|s| Array::from_fn(s, |_| rng.sample(StandardNormal)))
                .collect::<Result<_>>()?;
            let (_, grads, tie) = run(&f, &inputs, Some(settings.tie_margin))?;
            if !tie {
                break (inputs, grads);
            }
            report.redraws += 1;
            if report.redraws > settings.max_redraws {
                return Err(OwmError::numeric(
                    "check_gradients",
                    format!("{name}: persistent near-ties after {} redraws", report.redraws),
                ));
            }
        };
        let picks: Vec<usize> = if total <= settings.coord_cap {
            (0..total).collect()
        } else {
            rand::seq::index::sample(&mut rng, total, settings.coord_cap).into_vec()
        };
        for flat in picks {
            let (i, c) = locate(shapes, flat);
            let fd = fd_coord(&f, &inputs, i, c, settings.fd_step)?;
            let gt = grads[i].data()[c];
            let rel = (gt - fd).abs() / gt.abs().max(fd.abs()).max(1.0);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((i, c));
            }
            report.coords_checked += 1;
        }
        report.probes_run += 1;
    }
    Ok(report)
}

fn locate(shapes: &[Vec<usize>], mut flat: usize) -> (usize, usize) {
    for (i, s) in shapes.iter().enumerate() {
        let n: usize = s.iter().product();
        if flat < n {
            return (i, flat);
        }
        flat -= n;
    }
    unreachable!("coordinate out of range");
}
