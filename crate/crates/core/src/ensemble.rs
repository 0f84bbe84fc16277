//! Logistic-regression combiner over the three per-plane probabilities.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 1e-4;
pub const MAX_NEWTON_ITERATIONS: usize = 100;
pub const GRADIENT_TOLERANCE: f64 = 1e-8;

/// Plane weights ordered (axial, coronal, sagittal).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombinerModel {
    pub weights: [f64; 3],
    pub bias: f64,
    pub lambda: f64,
}

impl CombinerModel {
    pub fn zero(lambda: f64) -> Self {
        CombinerModel {
            weights: [0.0; 3],
            bias: 0.0,
            lambda,
        }
    }

    pub fn logit(&self, features: &[f64; 3]) -> f64 {
        self.bias
            + self
                .weights
                .iter()
                .zip(features)
                .map(|(w, x)| w * x)
                .sum::<f64>()
    }

    pub fn predict(&self, features: &[f64; 3]) -> f64 {
        sigmoid(self.logit(features))
    }
}

pub fn predict_logreg(model: &CombinerModel, features: &[f64; 3]) -> f64 {
    model.predict(features)
}

/// Outcome of a Newton fit; `converged` is false when the iteration budget
/// ran out first, in which case `model` holds the last iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogregFit {
    pub model: CombinerModel,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub objective: f64,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

// log(1 + e^z) without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + libm::log1p(libm::exp(-z))
    } else {
        libm::log1p(libm::exp(z))
    }
}

// Parameter vector layout: [w_axial, w_coronal, w_sagittal, bias].
fn objective(theta: &[f64; 4], x: &[[f64; 3]], y: &[u8], lambda: f64) -> f64 {
    let n = x.len() as f64;
    let nll: f64 = x
        .iter()
        .zip(y)
        .map(|(xi, &yi)| {
            let z = theta[3] + theta[0] * xi[0] + theta[1] * xi[1] + theta[2] * xi[2];
            softplus(z) - yi as f64 * z
        })
        .sum();
    nll / n + 0.5 * lambda * (theta[0] * theta[0] + theta[1] * theta[1] + theta[2] * theta[2])
}

fn gradient_hessian(
    theta: &[f64; 4],
    x: &[[f64; 3]],
    y: &[u8],
    lambda: f64,
) -> ([f64; 4], [[f64; 4]; 4]) {
    let n = x.len() as f64;
    let mut g = [0.0; 4];
    let mut h = [[0.0; 4]; 4];
    for (xi, &yi) in x.iter().zip(y) {
        let row = [xi[0], xi[1], xi[2], 1.0];
        let z = theta[3] + theta[0] * xi[0] + theta[1] * xi[1] + theta[2] * xi[2];
        let p = sigmoid(z);
        let r = p - yi as f64;
        let s = p * (1.0 - p);
        for a in 0..4 {
            g[a] += r * row[a];
            for b in 0..4 {
                h[a][b] += s * row[a] * row[b];
            }
        }
    }
    for (ga, ha) in g.iter_mut().zip(h.iter_mut()) {
        *ga /= n;
        ha.iter_mut().for_each(|v| *v /= n);
    }
    for a in 0..3 {
        g[a] += lambda * theta[a];
        h[a][a] += lambda;
    }
    (g, h)
}

// Solves h * d = g by Gaussian elimination with partial pivoting.
fn solve4(mut h: [[f64; 4]; 4], mut g: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let pivot = (col..4).max_by(|&a, &b| h[a][col].abs().total_cmp(&h[b][col].abs()))?;
        if h[pivot][col].abs() < 1e-300 {
            return None;
        }
        h.swap(col, pivot);
        g.swap(col, pivot);
        for row in col + 1..4 {
            let f = h[row][col] / h[col][col];
            let pivot_row = h[col];
            for (v, p) in h[row][col..].iter_mut().zip(&pivot_row[col..]) {
                *v -= f * p;
            }
            g[row] -= f * g[col];
        }
    }
    let mut d = [0.0; 4];
    for row in (0..4).rev() {
        let tail: f64 = (row + 1..4).map(|k| h[row][k] * d[k]).sum();
        d[row] = (g[row] - tail) / h[row][row];
    }
    Some(d)
}

fn norm(v: &[f64; 4]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

/// Fits an L2-regularized (weights only) logistic regression by damped
/// Newton iterations from the zero model.
pub fn fit_logreg(features: &[[f64; 3]], labels: &[u8], lambda: f64) -> Result<LogregFit> {
    if features.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} labels",
            features.len(),
            labels.len()
        )));
    }
    if features.len() < 4 {
        return Err(Error::Domain(format!(
            "need at least 4 examples, got {}",
            features.len()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Label(bad));
    }
    if positives == 0 || positives == labels.len() {
        return Err(Error::DegenerateWeights);
    }

    let mut theta = [0.0; 4];
    let mut f = objective(&theta, features, labels, lambda);
    let mut iterations = 0;
    let (mut g, mut h) = gradient_hessian(&theta, features, labels, lambda);
    while norm(&g) >= GRADIENT_TOLERANCE && iterations < MAX_NEWTON_ITERATIONS {
        iterations += 1;
        let step = match solve4(h, g) {
            Some(step) => step,
            None => g,
        };
        // Backtracking on the convex objective.
        let slope: f64 = step.iter().zip(&g).map(|(s, gi)| s * gi).sum();
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-12 {
            let cand: [f64; 4] = core::array::from_fn(|k| theta[k] - t * step[k]);
            let fc = objective(&cand, features, labels, lambda);
            if fc <= f - 1e-4 * t * slope || (fc <= f && t < 1e-6) {
                theta = cand;
                f = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        let (g2, h2) = gradient_hessian(&theta, features, labels, lambda);
        g = g2;
        h = h2;
        if !accepted {
            break;
        }
    }
    let gradient_norm = norm(&g);
    Ok(LogregFit {
        model: CombinerModel {
            weights: [theta[0], theta[1], theta[2]],
            bias: theta[3],
            lambda,
        },
        converged: gradient_norm < GRADIENT_TOLERANCE,
        iterations,
        gradient_norm,
        objective: f,
    })
}

/// Regularized mean negative log-likelihood of `model` on a dataset.
pub fn logreg_objective(model: &CombinerModel, features: &[[f64; 3]], labels: &[u8]) -> f64 {
    let theta = [model.weights[0], model.weights[1], model.weights[2], model.bias];
    objective(&theta, features, labels, model.lambda)
}
