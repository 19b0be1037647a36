//! Gradient probes over the assembled operators. Each probe registers
//! every parameter of a small composite (the pooling pass, the joint
//! flow-matching loss, a two-layer generator through that loss) as a
//! differentiable input and checks reverse-mode gradients against central
//! differences in double precision.
//!
//! `fault` inserts a gradient-only scaling into the graph, which leaves
//! values untouched but corrupts the backward pass; it exists so the
//! checker itself can be exercised end to end.

use crate::config::{AttentionPattern, RunConfig};
use crate::error::Result;
use crate::flowmatch::{cfm_loss_graph, LossWeights};
use crate::generator::{build_sequence, forward, GeneratorConfig, GeneratorParams};
use crate::numerics::{check_gradients, GradCheckSettings, GradReport, Tape, TensorId};
use crate::pooling::{pool_view, PoolingParams, WorldToken};
use crate::rng;

fn maybe_fault(tape: &mut Tape<f64>, x: TensorId, fault: bool) -> Result<TensorId> {
    if fault {
        tape.grad_scale(x, 2.0)
    } else {
        Ok(x)
    }
}

/// Adaptive pooling pass for one view: scorer MLP, temperature softmaxes,
/// three branch pools, learned fusion.
pub fn pooling_probe(settings: &GradCheckSettings, seed: u64, fault: bool) -> Result<GradReport> {
    let d = 8;
    let cfg = RunConfig::default();
    let params = PoolingParams::<f64>::init(d, 1, &mut rng::stream(seed, "probe/pool"));
    let mut shapes = vec![vec![2, 2, 6, d]];
    shapes.extend(params.arrays().iter().map(|(_, a)| a.shape().to_vec()));
    let name = if fault { "pool_view[faulted]" } else { "pool_view" };
    check_gradients(name, &shapes, settings, seed, move |tape, ids| {
        let mut rest = ids[1..].iter().copied();
        let pool = PoolingParams::<f64>::wire(1, &mut rest);
        let grid = maybe_fault(tape, ids[0], fault)?;
        let token = pool_view(tape, grid, &pool, 0, cfg.pooling_branch, 0.7, 0.9)?;
        tape.mean_all(token.tokens)
    })
}

/// Joint flow-matching loss over both streams at the default weights and
/// metrics: action plus three weighted latent branch means.
pub fn flow_loss_probe(settings: &GradCheckSettings, seed: u64, fault: bool) -> Result<GradReport> {
    let weights = LossWeights::from_config(&RunConfig::default());
    let a = vec![2, 3, 4];
    let z = vec![2, 3, 1, 5];
    let shapes = vec![a.clone(), a, z.clone(), z.clone(), z.clone(), z.clone(), z.clone(), z];
    let name = if fault { "joint_cfm_loss[faulted]" } else { "joint_cfm_loss" };
    check_gradients(name, &shapes, settings, seed, move |tape, ids| {
        let pred_a = maybe_fault(tape, ids[0], fault)?;
        let parts = cfm_loss_graph(
            tape,
            pred_a,
            ids[1],
            &[ids[2], ids[3], ids[4]],
            &[ids[5], ids[6], ids[7]],
            &weights,
        )?;
        Ok(parts.total)
    })
}

/// Two-layer generator: fused sequence assembly, attention stack, velocity
/// heads, composed with the joint loss.
pub fn generator_probe(settings: &GradCheckSettings, seed: u64, fault: bool) -> Result<GradReport> {
    let cfg = GeneratorConfig {
        d: 8,
        layers: 2,
        heads: 2,
        h: 2,
        d_a: 4,
        d_s: 5,
        num_tasks: 3,
        tokens_per_view: 1,
        pattern: AttentionPattern::Full,
        latent_branch: true,
    };
    let weights = LossWeights::from_config(&RunConfig::default());
    let params = GeneratorParams::<f64>::init(&cfg, &mut rng::stream(seed, "probe/gen"));
    let mut shapes: Vec<Vec<usize>> =
        params.arrays().iter().map(|(_, a)| a.shape().to_vec()).collect();
    let n_params = shapes.len();
    let (b, h, k, d, d_a) = (2, cfg.h, cfg.tokens_per_view, cfg.d, cfg.d_a);
    // world tokens x3, state, noisy_z x3, noisy_a, target_a, target_z x3.
    shapes.extend([vec![b, 1, k, d], vec![b, 1, k, d], vec![b, 1, k, d]]);
    shapes.push(vec![b, cfg.d_s]);
    shapes.extend([vec![b, h, k, d], vec![b, h, k, d], vec![b, h, k, d]]);
    shapes.push(vec![b, h, d_a]);
    shapes.push(vec![b, h, d_a]);
    shapes.extend([vec![b, h, k, d], vec![b, h, k, d], vec![b, h, k, d]]);
    let layers = cfg.layers;
    let name = if fault { "generator_cfm[faulted]" } else { "generator_cfm" };
    check_gradients(name, &shapes, settings, seed, move |tape, ids| {
        let mut rest = ids[..n_params].iter().copied();
        let gen = GeneratorParams::<f64>::wire(layers, &mut rest);
        let data = &ids[n_params..];
        let world: Vec<WorldToken> = (0..3)
            .map(|v| WorldToken { tokens: data[v], view: v })
            .collect();
        let noisy_z = &data[4..7];
        let seq = build_sequence(
            tape,
            &gen,
            &cfg,
            &world,
            &[0, 1],
            data[3],
            noisy_z,
            Some(data[7]),
            0.35,
        )?;
        let vel = forward(tape, &gen, &cfg, &seq)?;
        let v_a = maybe_fault(tape, vel.v_a, fault)?;
        let parts = cfm_loss_graph(tape, v_a, data[8], &vel.v_z, &data[9..12], &weights)?;
        Ok(parts.total)
    })
}
