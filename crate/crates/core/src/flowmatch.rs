//! Conditional flow matching over actions and per-view latents: straight
//! interpolation paths, the low-time-biased Beta schedule, the weighted
//! multi-branch objective, and explicit Euler sampling from t=1 to t=0.

use rand::Rng;

use crate::config::{Metric, RunConfig, TimeSchedule};
use crate::error::{OwmError, Result};
use crate::numerics::{Array, Scalar, Tape, TensorId};

/// Flow-time distribution. The Beta(1.5, 1) draw is remapped t = 1 - b by
/// default, putting the extra mass near t=0 (the data end of the path); the
/// literal un-remapped reading is kept selectable.
#[derive(Debug, Clone, Copy)]
pub struct FlowTimeSampler {
    pub schedule: TimeSchedule,
}

impl FlowTimeSampler {
    pub fn new(schedule: TimeSchedule) -> Self {
        FlowTimeSampler { schedule }
    }

    /// Draws a flow time strictly inside (0, 1). Beta(1.5, 1) has CDF b^1.5,
    /// so inverse-transform sampling is exact: b = u^(2/3).
    pub fn sample_time(&self, rng: &mut impl Rng) -> f64 {
        let u = loop {
            let u: f64 = rng.random();
            if u > 0.0 {
                break u;
            }
        };
        let b = u.powf(2.0 / 3.0);
        match self.schedule {
            TimeSchedule::LowBias => 1.0 - b,
            TimeSchedule::Literal => b,
        }
    }
}

fn zip_shapes<S: Scalar>(op: &'static str, a: &Array<S>, b: &Array<S>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(OwmError::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

/// Straight-path interpolant t*noise + (1-t)*data. Endpoints are exact.
pub fn interpolate<S: Scalar>(data: &Array<S>, noise: &Array<S>, t: f64) -> Result<Array<S>> {
    zip_shapes("interpolate", data, noise)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(OwmError::Config(format!("interpolate: t must lie in [0, 1], got {t}")));
    }
    let (tc, dc) = (S::from_f64(t), S::from_f64(1.0 - t));
    let out = data
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&d, &e)| tc * e + dc * d)
        .collect();
    Ok(Array::from_vec_unchecked(data.shape().to_vec(), out))
}

/// Constant target velocity of the straight path: noise - data.
pub fn target_velocity<S: Scalar>(data: &Array<S>, noise: &Array<S>) -> Result<Array<S>> {
    zip_shapes("target_velocity", data, noise)?;
    let out = data.data().iter().zip(noise.data()).map(|(&d, &e)| e - d).collect();
    Ok(Array::from_vec_unchecked(data.shape().to_vec(), out))
}

/// One training path sample: clean targets, matched noise, the shared flow
/// time, interpolants, and the constant target velocities for every branch.
#[derive(Debug, Clone)]
pub struct JointPathSample<S> {
    pub a: Array<S>,
    pub z: Vec<Array<S>>,
    pub eps_a: Array<S>,
    pub eps_z: Vec<Array<S>>,
    pub t: f64,
    pub x_a_t: Array<S>,
    pub x_z_t: Vec<Array<S>>,
    pub u_a: Array<S>,
    pub u_z: Vec<Array<S>>,
}

impl<S: Scalar> JointPathSample<S> {
    /// Draws standard-normal noise for every branch and builds the
    /// interpolants at one shared flow time.
    pub fn draw(a: Array<S>, z: Vec<Array<S>>, t: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut gauss = |shape: &[usize]| -> Array<S> {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    let g: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                    S::from_f64(g)
                })
                .collect();
            Array::from_vec_unchecked(shape.to_vec(), data)
        };
        let eps_a = gauss(a.shape());
        let eps_z: Vec<Array<S>> = z.iter().map(|zi| gauss(zi.shape())).collect();
        let x_a_t = interpolate(&a, &eps_a, t)?;
        let u_a = target_velocity(&a, &eps_a)?;
        let mut x_z_t = Vec::with_capacity(z.len());
        let mut u_z = Vec::with_capacity(z.len());
        for (zi, ei) in z.iter().zip(&eps_z) {
            x_z_t.push(interpolate(zi, ei, t)?);
            u_z.push(target_velocity(zi, ei)?);
        }
        Ok(JointPathSample { a, z, eps_a, eps_z, t, x_a_t, x_z_t, u_a, u_z })
    }
}

/// Branch weights and metrics of the joint objective. The latent weights are
/// ordered (r, w1, w2); setting them all to zero gives the action-only arm.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda_a: f64,
    pub lambda_r: f64,
    pub lambda_w1: f64,
    pub lambda_w2: f64,
    pub metric_a: Metric,
    pub metric_z: Metric,
}

impl LossWeights {
    pub fn from_config(cfg: &RunConfig) -> Self {
        LossWeights {
            lambda_a: cfg.lambda_a,
            lambda_r: cfg.lambda_r,
            lambda_w1: cfg.lambda_w1,
            lambda_w2: cfg.lambda_w2,
            metric_a: cfg.metric_a,
            metric_z: cfg.metric_z,
        }
    }

    pub fn lambda_z(&self) -> [f64; 3] {
        [self.lambda_r, self.lambda_w1, self.lambda_w2]
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_a, self.lambda_r, self.lambda_w1, self.lambda_w2];
        if all.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(OwmError::Config(format!("loss weights must be nonnegative, got {all:?}")));
        }
        if self.lambda_a <= 0.0 {
            return Err(OwmError::Config("lambda_a must be positive".to_string()));
        }
        Ok(())
    }
}

/// The loss graph's pieces: per-branch unweighted means plus the weighted
/// total that training differentiates.
pub struct CfmLossParts {
    pub total: TensorId,
    pub action: TensorId,
    pub latents: Vec<TensorId>,
}

fn branch_term<S: Scalar>(
    tape: &mut Tape<S>,
    pred: TensorId,
    target: TensorId,
    metric: Metric,
) -> Result<TensorId> {
    let d = tape.sub(pred, target)?;
    let e = match metric {
        Metric::L1 => tape.abs(d)?,
        Metric::L2 => tape.mul(d, d)?,
    };
    tape.mean_all(e)
}

/// Builds the joint objective on the tape: lambda_a * mean(action error) plus
/// the weighted per-view latent means. Prediction/target pairs must already
/// share shapes; latent views beyond the configured three are rejected.
pub fn cfm_loss_graph<S: Scalar>(
    tape: &mut Tape<S>,
    pred_a: TensorId,
    target_a: TensorId,
    pred_z: &[TensorId],
    target_z: &[TensorId],
    weights: &LossWeights,
) -> Result<CfmLossParts> {
    weights.validate()?;
    if pred_z.len() != target_z.len() || pred_z.len() > 3 {
        return Err(OwmError::shape(
            "cfm_loss_graph",
            format!("{} latent predictions vs {} targets", pred_z.len(), target_z.len()),
        ));
    }
    let action = branch_term(tape, pred_a, target_a, weights.metric_a)?;
    let mut total = tape.affine(action, weights.lambda_a, 0.0)?;
    let mut latents = Vec::with_capacity(pred_z.len());
    for ((&p, &t), lambda) in pred_z.iter().zip(target_z).zip(weights.lambda_z()) {
        let term = branch_term(tape, p, t, weights.metric_z)?;
        latents.push(term);
        let weighted = tape.affine(term, lambda, 0.0)?;
        total = tape.add(total, weighted)?;
    }
    Ok(CfmLossParts { total, action, latents })
}

/// Scalar value of the joint objective for plain arrays, measured against the
/// sample's target velocities.
pub fn joint_cfm_loss<S: Scalar>(
    pred_a: &Array<S>,
    pred_z: &[Array<S>],
    sample: &JointPathSample<S>,
    weights: &LossWeights,
) -> Result<f64> {
    let mut tape = Tape::<S>::new();
    let pa = tape.constant(pred_a.clone());
    let ta = tape.constant(sample.u_a.clone());
    let pz: Vec<TensorId> = pred_z.iter().map(|p| tape.constant(p.clone())).collect();
    let tz: Vec<TensorId> = sample.u_z.iter().map(|u| tape.constant(u.clone())).collect();
    let parts = cfm_loss_graph(&mut tape, pa, ta, &pz, &tz, weights)?;
    Ok(tape.value(parts.total).item().to_f64())
}

/// The joint sampling state: one action stream plus one latent stream per
/// view (empty when the latent branch is ablated).
#[derive(Debug, Clone)]
pub struct JointState<S> {
    pub a: Array<S>,
    pub z: Vec<Array<S>>,
}

impl<S: Scalar> JointState<S> {
    fn axpy(&mut self, v: &JointState<S>, c: S) -> Result<()> {
        zip_shapes("euler_sample", &self.a, &v.a)?;
        if self.z.len() != v.z.len() {
            return Err(OwmError::shape(
                "euler_sample",
                format!("{} latent streams vs {}", self.z.len(), v.z.len()),
            ));
        }
        for (x, d) in self.a.data_mut().iter_mut().zip(v.a.data()) {
            *x += c * *d;
        }
        for (zi, vi) in self.z.iter_mut().zip(&v.z) {
            zip_shapes("euler_sample", zi, vi)?;
            for (x, d) in zi.data_mut().iter_mut().zip(vi.data()) {
                *x += c * *d;
            }
        }
        Ok(())
    }

    fn finite_at(&self, step: usize) -> Result<()> {
        let ok = self.a.data().iter().all(|&e| e.to_f64().is_finite())
            && self.z.iter().all(|zi| zi.data().iter().all(|&e| e.to_f64().is_finite()));
        if ok {
            Ok(())
        } else {
            Err(OwmError::numeric("euler_sample", format!("non-finite velocity at step {step}")))
        }
    }
}

/// Explicit Euler integration of the joint ODE from t=1 to t=0 with
/// dt = -1/steps. The caller's velocity function sees the current joint state
/// and flow time; the returned state is the full joint sample at t=0.
pub fn euler_sample<S: Scalar>(
    init_noise: JointState<S>,
    steps: usize,
    mut velocity: impl FnMut(&JointState<S>, f64) -> Result<JointState<S>>,
) -> Result<JointState<S>> {
    if steps == 0 {
        return Err(OwmError::Config("euler_sample: steps must be >= 1".to_string()));
    }
    let mut state = init_noise;
    let dt = S::from_f64(-1.0 / steps as f64);
    for i in 0..steps {
        let t = 1.0 - i as f64 / steps as f64;
        let v = velocity(&state, t)?;
        v.finite_at(i)?;
        state.axpy(&v, dt)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradients, GradCheckSettings};
    use rand_distr::{Distribution, StandardNormal};

    fn rng(seed: u64) -> impl Rng {
        crate::rng::stream(seed, "flow-test")
    }

    fn weights() -> LossWeights {
        LossWeights {
            lambda_a: 1.0,
            lambda_r: 0.1,
            lambda_w1: 0.1,
            lambda_w2: 0.1,
            metric_a: Metric::L1,
            metric_z: Metric::L1,
        }
    }

    fn normal(shape: &[usize], seed: u64) -> Array<f64> {
        let mut r = rng(seed);
        let n: usize = shape.iter().product();
        Array::from_vec(shape, (0..n).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap()
    }

    #[test]
    fn time_schedule_moments() {
        let sampler = FlowTimeSampler::new(TimeSchedule::LowBias);
        let mut r = rng(0);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| sampler.sample_time(&mut r)).collect();
        assert!(draws.iter().all(|&t| t > 0.0 && t < 1.0));
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n as f64;
        let below_half = draws.iter().filter(|&&t| t < 0.5).count() as f64 / n as f64;
        // Beta(1.5,1) under t = 1-b: mean 0.4, var 0.6*0.4/3.5, P(t<0.5) = 1-0.5^1.5.
        assert!((mean - 0.4).abs() < 0.01, "mean {mean}");
        assert!((var - 0.6 * 0.4 / 3.5).abs() < 0.005, "var {var}");
        assert!((below_half - (1.0 - 0.5f64.powf(1.5))).abs() < 0.01, "P {below_half}");
    }

    #[test]
    fn literal_schedule_biases_high() {
        let sampler = FlowTimeSampler::new(TimeSchedule::Literal);
        let mut r = rng(1);
        let n = 100_000;
        let mean = (0..n).map(|_| sampler.sample_time(&mut r)).sum::<f64>() / n as f64;
        assert!((mean - 0.6).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn same_seed_same_draws() {
        let sampler = FlowTimeSampler::new(TimeSchedule::LowBias);
        let a: Vec<f64> = {
            let mut r = rng(7);
            (0..64).map(|_| sampler.sample_time(&mut r)).collect()
        };
        let b: Vec<f64> = {
            let mut r = rng(7);
            (0..64).map(|_| sampler.sample_time(&mut r)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn interpolation_endpoints_exact() {
        let data = normal(&[3, 4], 2);
        let noise = normal(&[3, 4], 3);
        assert_eq!(interpolate(&data, &noise, 0.0).unwrap().data(), data.data());
        assert_eq!(interpolate(&data, &noise, 1.0).unwrap().data(), noise.data());
        let mid = interpolate(
            &Array::from_vec(&[2], vec![1.0f32, 1.0]).unwrap(),
            &Array::from_vec(&[2], vec![0.0f32, 0.0]).unwrap(),
            0.5,
        )
        .unwrap();
        assert_eq!(mid.data(), &[0.5, 0.5]);
        assert!(interpolate(&data, &noise, 1.5).is_err());
        assert!(interpolate(&data, &normal(&[4, 3], 3), 0.5).is_err());
    }

    #[test]
    fn velocity_is_noise_minus_data() {
        let zero = Array::zeros(&[5]);
        let e = normal(&[5], 4);
        assert_eq!(target_velocity(&zero, &e).unwrap().data(), e.data());
        assert!(target_velocity(&e, &e).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn path_derivative_matches_velocity() {
        // d/dt interpolate is constant in t and equals target_velocity.
        let data = normal(&[6], 5);
        let noise = normal(&[6], 6);
        let u = target_velocity(&data, &noise).unwrap();
        let h = 1e-4;
        for t in [0.2, 0.5, 0.9] {
            let hi = interpolate(&data, &noise, t + h).unwrap();
            let lo = interpolate(&data, &noise, t - h).unwrap();
            for i in 0..6 {
                let fd = (hi.data()[i] - lo.data()[i]) / (2.0 * h);
                assert!((fd - u.data()[i]).abs() < 1e-6, "{fd} vs {}", u.data()[i]);
            }
        }
    }

    #[test]
    fn perfect_predictions_give_zero_loss() {
        let mut r = rng(8);
        let sample = JointPathSample::draw(
            normal(&[4, 4], 9),
            vec![normal(&[4, 8], 10), normal(&[4, 8], 11), normal(&[4, 8], 12)],
            0.3,
            &mut r,
        )
        .unwrap();
        for metric in [Metric::L1, Metric::L2] {
            let mut w = weights();
            (w.metric_a, w.metric_z) = (metric, metric);
            let loss = joint_cfm_loss(&sample.u_a, &sample.u_z, &sample, &w).unwrap();
            assert_eq!(loss, 0.0);
        }
    }

    #[test]
    fn unit_errors_give_paper_weighted_total() {
        // Mean action error 1 and mean latent error 1 per view under the
        // default weights: 1.0*1 + 3*0.1*1 = 1.3.
        let mut r = rng(13);
        let sample = JointPathSample::draw(
            Array::zeros(&[2, 3]),
            vec![Array::zeros(&[2, 4]); 3],
            0.5,
            &mut r,
        )
        .unwrap();
        let shift = |a: &Array<f64>| {
            Array::from_vec(a.shape(), a.data().iter().map(|v| v + 1.0).collect()).unwrap()
        };
        let pa = shift(&sample.u_a);
        let pz: Vec<_> = sample.u_z.iter().map(shift).collect();
        let loss = joint_cfm_loss(&pa, &pz, &sample, &weights()).unwrap();
        assert!((loss - 1.3).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn zero_latent_weights_reduce_to_action_objective() {
        let mut r = rng(14);
        let sample = JointPathSample::draw(
            normal(&[2, 3], 15),
            vec![normal(&[2, 4], 16); 3],
            0.5,
            &mut r,
        )
        .unwrap();
        let mut w = weights();
        (w.lambda_r, w.lambda_w1, w.lambda_w2) = (0.0, 0.0, 0.0);
        let bad_z: Vec<_> = (0..3).map(|i| normal(&[2, 4], 40 + i)).collect();
        let with_bad = joint_cfm_loss(&sample.u_a, &bad_z, &sample, &w).unwrap();
        let with_good = joint_cfm_loss(&sample.u_a, &sample.u_z, &sample, &w).unwrap();
        assert_eq!(with_bad, with_good);
        assert_eq!(with_good, 0.0);
    }

    #[test]
    fn negative_weights_rejected() {
        let mut w = weights();
        w.lambda_r = -0.1;
        assert!(matches!(w.validate(), Err(OwmError::Config(_))));
        let mut w2 = weights();
        w2.lambda_a = 0.0;
        assert!(w2.validate().is_err());
    }

    #[test]
    fn euler_recovers_data_under_oracle_field() {
        let data_a = normal(&[4, 4], 20);
        let data_z = vec![normal(&[4, 6], 21), normal(&[4, 6], 22)];
        let eps_a = normal(&[4, 4], 23);
        let eps_z = vec![normal(&[4, 6], 24), normal(&[4, 6], 25)];
        let u = JointState {
            a: target_velocity(&data_a, &eps_a).unwrap(),
            z: data_z
                .iter()
                .zip(&eps_z)
                .map(|(d, e)| target_velocity(d, e).unwrap())
                .collect(),
        };
        for steps in [1usize, 2, 10] {
            let init = JointState { a: eps_a.clone(), z: eps_z.clone() };
            let out = euler_sample(init, steps, |_, _| Ok(u.clone())).unwrap();
            for (got, want) in out.a.data().iter().zip(data_a.data()) {
                assert!((got - want).abs() < 1e-6, "steps {steps}");
            }
            for (zo, zd) in out.z.iter().zip(&data_z) {
                for (got, want) in zo.data().iter().zip(zd.data()) {
                    assert!((got - want).abs() < 1e-6, "steps {steps}");
                }
            }
        }
    }

    #[test]
    fn euler_single_step_closed_form() {
        // From eps=0 with data=[1,1]: u = -data, one step of dt=-1 lands on data.
        let data = Array::from_vec(&[2], vec![1.0f64, 1.0]).unwrap();
        let init = JointState { a: Array::zeros(&[2]), z: vec![] };
        let u = JointState { a: target_velocity(&data, &init.a).unwrap(), z: vec![] };
        let out = euler_sample(init, 1, |_, _| Ok(u.clone())).unwrap();
        assert_eq!(out.a.data(), &[1.0, 1.0]);
    }

    #[test]
    fn zero_velocity_keeps_noise() {
        let eps = normal(&[3, 3], 26);
        let init = JointState { a: eps.clone(), z: vec![] };
        let out =
            euler_sample(init, 5, |_, _| Ok(JointState { a: Array::zeros(&[3, 3]), z: vec![] }))
                .unwrap();
        assert_eq!(out.a.data(), eps.data());
    }

    #[test]
    fn nonfinite_velocity_names_the_step() {
        let init = JointState { a: Array::zeros(&[2]), z: vec![] };
        let mut calls = 0usize;
        let err = euler_sample(init, 4, |_, _| {
            calls += 1;
            let v = if calls == 3 { f64::INFINITY } else { 0.0 };
            Ok(JointState { a: Array::from_vec_unchecked(vec![2], vec![v, v]), z: vec![] })
        })
        .unwrap_err();
        match err {
            OwmError::Numeric { detail, .. } => assert!(detail.contains("step 2"), "{detail}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn visited_times_span_one_to_just_above_zero() {
        let init = JointState::<f64> { a: Array::zeros(&[1]), z: vec![] };
        let mut ts = Vec::new();
        euler_sample(init, 4, |_, t| {
            ts.push(t);
            Ok(JointState::<f64> { a: Array::zeros(&[1]), z: vec![] })
        })
        .unwrap();
        assert_eq!(ts, vec![1.0, 0.75, 0.5, 0.25]);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        // Gradcheck w.r.t. predictions under the default L1/L1 metrics; the
        // abs kink is handled by the probe redraw machinery.
        let shapes: Vec<Vec<usize>> = vec![vec![3, 4], vec![3, 6], vec![3, 6], vec![3, 6]];
        let targets: Vec<Array<f64>> =
            vec![normal(&[3, 4], 30), normal(&[3, 6], 31), normal(&[3, 6], 32), normal(&[3, 6], 33)];
        let report = check_gradients(
            "joint_cfm_loss",
            &shapes,
            &GradCheckSettings::default(),
            17,
            move |tape, ids| {
                let ta = tape.constant(targets[0].clone());
                let tz: Vec<TensorId> =
                    targets[1..].iter().map(|t| tape.constant(t.clone())).collect();
                let parts = cfm_loss_graph(tape, ids[0], ta, &ids[1..], &tz, &weights())?;
                Ok(parts.total)
            },
        )
        .unwrap();
        assert!(report.pass(), "{report}");
    }
}
