//! PCA probe: center, eigendecompose the sample covariance (cyclic Jacobi,
//! exact for symmetric matrices at these sizes), project onto the leading
//! components. Sign convention: the largest-magnitude loading of each
//! component is positive. Null components (eigenvalue at numerical zero)
//! are zeroed rather than returning noise from the degenerate subspace.

use crate::error::{OwmError, Result};
use crate::numerics::Array;

const JACOBI_SWEEPS: usize = 64;
const NULL_EIGENVALUE: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct PcaResult {
    /// (dim, dims): one component per column, orthonormal except for
    /// zeroed null components.
    pub components: Array<f64>,
    /// Descending; one per kept component.
    pub eigenvalues: Vec<f64>,
    /// (n_samples, dims).
    pub projected: Array<f64>,
    /// True where the component was degenerate and zeroed.
    pub degenerate: Vec<bool>,
}

/// Eigendecomposition of a symmetric matrix (row-major, d x d) by cyclic
/// Jacobi rotations. Returns (eigenvalues, eigenvectors as columns),
/// unsorted.
fn jacobi_symmetric(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0f64; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _ in 0..JACOBI_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a[p * d + q] * a[p * d + q];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..d {
                    let aip = a[i * d + p];
                    let aiq = a[i * d + q];
                    a[i * d + p] = c * aip - s * aiq;
                    a[i * d + q] = s * aip + c * aiq;
                }
                for i in 0..d {
                    let api = a[p * d + i];
                    let aqi = a[q * d + i];
                    a[p * d + i] = c * api - s * aqi;
                    a[q * d + i] = s * api + c * aqi;
                }
                for i in 0..d {
                    let vip = v[i * d + p];
                    let viq = v[i * d + q];
                    v[i * d + p] = c * vip - s * viq;
                    v[i * d + q] = s * vip + c * viq;
                }
            }
        }
    }
    let eig = (0..d).map(|i| a[i * d + i]).collect();
    (eig, v)
}

pub fn pca_project(features: &Array<f64>, dims: usize) -> Result<PcaResult> {
    let shape = features.shape().to_vec();
    let [n, d] = match shape[..] {
        [n, d] => [n, d],
        _ => {
            return Err(OwmError::shape(
                "pca_project",
                format!("features must be (n, dim), got {shape:?}"),
            ))
        }
    };
    if dims == 0 || dims > d {
        return Err(OwmError::Config(format!("pca dims {dims} outside 1..={d}")));
    }
    if n < 2 {
        return Err(OwmError::Input(format!("pca needs >= 2 samples, got {n}")));
    }

    let x = features.data();
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(&x[i * d..(i + 1) * d]) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut centered = vec![0.0f64; n * d];
    for i in 0..n {
        for j in 0..d {
            centered[i * d + j] = x[i * d + j] - mean[j];
        }
    }

    // Sample covariance.
    let mut cov = vec![0.0f64; d * d];
    for i in 0..n {
        let row = &centered[i * d..(i + 1) * d];
        for p in 0..d {
            for q in p..d {
                cov[p * d + q] += row[p] * row[q];
            }
        }
    }
    let denom = (n - 1) as f64;
    for p in 0..d {
        for q in p..d {
            cov[p * d + q] /= denom;
            cov[q * d + p] = cov[p * d + q];
        }
    }

    let (eig, vecs) = jacobi_symmetric(cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig[b].partial_cmp(&eig[a]).unwrap());

    let scale = eig.iter().cloned().fold(1.0f64, f64::max);
    let mut components = vec![0.0f64; d * dims];
    let mut eigenvalues = Vec::with_capacity(dims);
    let mut degenerate = Vec::with_capacity(dims);
    for (c, &src) in order.iter().take(dims).enumerate() {
        let lambda = eig[src].max(0.0);
        let null = lambda <= NULL_EIGENVALUE * scale;
        eigenvalues.push(if null { 0.0 } else { lambda });
        degenerate.push(null);
        if null {
            eprintln!("warning: pca component {c} is degenerate (eigenvalue {lambda:.3e}); zeroed");
            continue;
        }
        // Sign: largest-magnitude loading positive.
        let mut peak = 0usize;
        for i in 1..d {
            if vecs[i * d + src].abs() > vecs[peak * d + src].abs() {
                peak = i;
            }
        }
        let sign = if vecs[peak * d + src] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            components[i * dims + c] = sign * vecs[i * d + src];
        }
    }

    let mut projected = vec![0.0f64; n * dims];
    for i in 0..n {
        let row = &centered[i * d..(i + 1) * d];
        for c in 0..dims {
            projected[i * dims + c] =
                (0..d).map(|j| row[j] * components[j * dims + c]).sum();
        }
    }

    Ok(PcaResult {
        components: Array::from_vec(&[d, dims], components)?,
        eigenvalues,
        projected: Array::from_vec(&[n, dims], projected)?,
        degenerate,
    })
}

const SCATTER_COLORS: [&str; 6] =
    ["#d6553f", "#3f7bd6", "#3fae5c", "#b03fd6", "#d6a23f", "#3fc4d6"];

/// Plain-vector scatter of 2-D points colored by class label.
pub fn scatter_svg(points: &Array<f64>, labels: &[usize], title: &str) -> Result<String> {
    let shape = points.shape().to_vec();
    let n = match shape[..] {
        [n, 2] => n,
        _ => {
            return Err(OwmError::shape(
                "scatter_svg",
                format!("points must be (n, 2), got {shape:?}"),
            ))
        }
    };
    if labels.len() != n {
        return Err(OwmError::Input(format!("{} labels for {n} points", labels.len())));
    }
    let p = points.data();
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for i in 0..n {
        xmin = xmin.min(p[i * 2]);
        xmax = xmax.max(p[i * 2]);
        ymin = ymin.min(p[i * 2 + 1]);
        ymax = ymax.max(p[i * 2 + 1]);
    }
    let pad = |lo: &mut f64, hi: &mut f64| {
        let span = (*hi - *lo).max(1e-9);
        *lo -= 0.05 * span;
        *hi += 0.05 * span;
    };
    pad(&mut xmin, &mut xmax);
    pad(&mut ymin, &mut ymax);
    let (w, h) = (480.0, 360.0);
    let sx = |x: f64| (x - xmin) / (xmax - xmin) * (w - 40.0) + 20.0;
    let sy = |y: f64| h - 20.0 - (y - ymin) / (ymax - ymin) * (h - 40.0);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"14\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"12\">{title}</text>\n",
        w / 2.0
    ));
    for i in 0..n {
        let color = SCATTER_COLORS[labels[i] % SCATTER_COLORS.len()];
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\" fill-opacity=\"0.75\"/>\n",
            sx(p[i * 2]),
            sy(p[i * 2 + 1])
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
