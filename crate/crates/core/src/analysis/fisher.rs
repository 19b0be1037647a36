//! Class-separability probe: trace form of the Fisher ratio.
//!
//! F = tr(S_B) / tr(S_W) with the within-class trace normalized to 1, so
//! the reported between-class trace IS the ratio. Traces only: the full
//! scatter matrices never materialize, which keeps the probe exact and
//! cheap at any feature dimension.

use crate::error::{OwmError, Result};
use crate::numerics::Array;

#[derive(Debug, Clone)]
pub struct LabeledFeatures {
    /// (n_samples, dim).
    pub features: Array<f64>,
    /// One class id per sample.
    pub labels: Vec<usize>,
}

impl LabeledFeatures {
    pub fn new(features: Array<f64>, labels: Vec<usize>) -> Result<Self> {
        let shape = features.shape().to_vec();
        let [n, _] = match shape[..] {
            [n, d] => [n, d],
            _ => {
                return Err(OwmError::shape(
                    "fisher_ratio",
                    format!("features must be (n, dim), got {shape:?}"),
                ))
            }
        };
        if labels.len() != n {
            return Err(OwmError::Input(format!(
                "{} labels for {n} samples",
                labels.len()
            )));
        }
        let lf = LabeledFeatures { features, labels };
        lf.class_counts()?;
        Ok(lf)
    }

    fn class_counts(&self) -> Result<Vec<(usize, usize)>> {
        let mut counts: Vec<(usize, usize)> = Vec::new();
        for &l in &self.labels {
            match counts.iter_mut().find(|(c, _)| *c == l) {
                Some((_, n)) => *n += 1,
                None => counts.push((l, 1)),
            }
        }
        if counts.len() < 2 {
            return Err(OwmError::Input(format!(
                "fisher ratio needs >= 2 classes, got {}",
                counts.len()
            )));
        }
        if let Some((c, n)) = counts.iter().find(|(_, n)| *n < 2) {
            return Err(OwmError::Input(format!(
                "class {c} has {n} sample(s), need >= 2"
            )));
        }
        counts.sort_unstable();
        Ok(counts)
    }
}

/// Traces after normalizing tr(S_W) to 1: `trace_between` equals
/// `fisher_ratio` by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterDecomposition {
    pub trace_between: f64,
    pub trace_within: f64,
    pub fisher_ratio: f64,
}

pub fn fisher_ratio(data: &LabeledFeatures) -> Result<ScatterDecomposition> {
    let counts = data.class_counts()?;
    let [n, d] = [data.features.shape()[0], data.features.shape()[1]];
    let x = data.features.data();
    let row = |i: usize| &x[i * d..(i + 1) * d];

    let mut grand = vec![0.0f64; d];
    for i in 0..n {
        for (g, v) in grand.iter_mut().zip(row(i)) {
            *g += v;
        }
    }
    for g in grand.iter_mut() {
        *g /= n as f64;
    }

    let mut tr_w = 0.0f64;
    let mut tr_b = 0.0f64;
    for &(class, count) in &counts {
        let mut mu = vec![0.0f64; d];
        for i in 0..n {
            if data.labels[i] == class {
                for (m, v) in mu.iter_mut().zip(row(i)) {
                    *m += v;
                }
            }
        }
        for m in mu.iter_mut() {
            *m /= count as f64;
        }
        for i in 0..n {
            if data.labels[i] == class {
                tr_w += mu.iter().zip(row(i)).map(|(m, v)| (v - m) * (v - m)).sum::<f64>();
            }
        }
        tr_b += count as f64
            * mu.iter().zip(&grand).map(|(m, g)| (m - g) * (m - g)).sum::<f64>();
    }

    if tr_w <= 0.0 {
        return Err(OwmError::Numeric {
            op: "fisher_ratio",
            detail: "within-class scatter is zero; ratio undefined".to_string(),
        });
    }
    let f = tr_b / tr_w;
    Ok(ScatterDecomposition { trace_between: f, trace_within: 1.0, fisher_ratio: f })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn features(rows: &[&[f64]]) -> Array<f64> {
        let d = rows[0].len();
        Array::from_vec(&[rows.len(), d], rows.iter().flat_map(|r| r.iter().copied()).collect())
            .unwrap()
    }

    #[test]
    fn one_dimensional_hand_case_is_exact() {
        // A = {0, 2}, B = {-2, 0}: tr(S_W) = 4, tr(S_B) = 4, F = 1.
        let data = LabeledFeatures::new(
            features(&[&[0.0], &[2.0], &[-2.0], &[0.0]]),
            vec![0, 0, 1, 1],
        )
        .unwrap();
        let s = fisher_ratio(&data).unwrap();
        assert_eq!(s.fisher_ratio, 1.0);
        assert_eq!(s.trace_between, 1.0);
        assert_eq!(s.trace_within, 1.0);
    }

    #[test]
    fn identical_class_means_give_zero() {
        let data = LabeledFeatures::new(
            features(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 1.0], &[0.0, -1.0]]),
            vec![0, 0, 1, 1],
        )
        .unwrap();
        assert_eq!(fisher_ratio(&data).unwrap().fisher_ratio, 0.0);
    }

    /// Gram-Schmidt on a random square matrix.
    fn random_rotation(d: usize, seed: u64) -> Vec<f64> {
        let mut r = crate::rng::stream(seed, "fisher-rot");
        let mut q = vec![0.0f64; d * d];
        for col in 0..d {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
            for prev in 0..col {
                let dot: f64 = (0..d).map(|i| v[i] * q[i * d + prev]).sum();
                for i in 0..d {
                    v[i] -= dot * q[i * d + prev];
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for i in 0..d {
                q[i * d + col] = v[i] / norm;
            }
        }
        q
    }

    #[test]
    fn invariant_to_rotation_and_scale() {
        let d = 6;
        let n = 40;
        let mut r = crate::rng::stream(7, "fisher-data");
        let mut rows = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 4;
            labels.push(class);
            for j in 0..d {
                let center = if j == class { 2.0 } else { 0.0 };
                let g: f64 = StandardNormal.sample(&mut r);
                rows.push(center + g);
            }
        }
        let base = LabeledFeatures::new(
            Array::from_vec(&[n, d], rows.clone()).unwrap(),
            labels.clone(),
        )
        .unwrap();
        let f0 = fisher_ratio(&base).unwrap().fisher_ratio;

        let q = random_rotation(d, 13);
        let mut rotated = vec![0.0f64; n * d];
        for i in 0..n {
            for j in 0..d {
                rotated[i * d + j] = (0..d).map(|k| rows[i * d + k] * q[k * d + j]).sum();
            }
        }
        let rot = LabeledFeatures::new(
            Array::from_vec(&[n, d], rotated).unwrap(),
            labels.clone(),
        )
        .unwrap();
        let f1 = fisher_ratio(&rot).unwrap().fisher_ratio;
        assert!((f0 - f1).abs() < 1e-5, "rotation changed F: {f0} vs {f1}");

        // Uniform scaling cancels after the tr(S_W) = 1 normalization.
        let c = 3.7;
        let scaled = LabeledFeatures::new(
            Array::from_vec(&[n, d], rows.iter().map(|v| v * c).collect()).unwrap(),
            labels,
        )
        .unwrap();
        let f2 = fisher_ratio(&scaled).unwrap().fisher_ratio;
        assert!((f0 - f2).abs() < 1e-6, "scaling changed F: {f0} vs {f2}");
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        // One class only.
        assert!(LabeledFeatures::new(features(&[&[0.0], &[1.0]]), vec![0, 0]).is_err());
        // A class with a single sample.
        assert!(
            LabeledFeatures::new(features(&[&[0.0], &[1.0], &[2.0]]), vec![0, 0, 1]).is_err()
        );
        // Zero within-class scatter.
        let dup = LabeledFeatures::new(
            features(&[&[0.0], &[0.0], &[1.0], &[1.0]]),
            vec![0, 0, 1, 1],
        )
        .unwrap();
        assert!(fisher_ratio(&dup).is_err());
    }

    #[test]
    fn label_count_mismatch_is_rejected() {
        assert!(LabeledFeatures::new(features(&[&[0.0], &[1.0]]), vec![0]).is_err());
    }

    #[test]
    fn separation_orders_the_ratio() {
        // Moving class means apart raises F monotonically.
        let mut r = crate::rng::stream(23, "fisher-sep");
        let noise: Vec<f64> = (0..40).map(|_| {
            let g: f64 = StandardNormal.sample(&mut r);
            g * 0.1
        }).collect();
        let mut last = 0.0;
        for (i, gap) in [0.5, 1.0, 2.0, 4.0].into_iter().enumerate() {
            let rows: Vec<f64> = noise
                .iter()
                .enumerate()
                .map(|(j, n)| if j % 2 == 0 { n + gap } else { n - gap })
                .collect();
            let labels: Vec<usize> = (0..40).map(|j| j % 2).collect();
            let data = LabeledFeatures::new(
                Array::from_vec(&[40, 1], rows).unwrap(),
                labels,
            )
            .unwrap();
            let f = fisher_ratio(&data).unwrap().fisher_ratio;
            assert!(f > last, "gap {gap} (case {i}): F {f} <= {last}");
            last = f;
        }
    }
}
