use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{ClassBalancedSampler, SamplingMode};
use crate::linalg::{cholesky_psd, symmetrize, trace};
use crate::{seed, Error, Result};

/// Per-class Gaussian moments of encoder features.
///
/// `sigma` is the (symmetric) estimate itself; `chol[k]` factors
/// `sigma[k] + ridge_abs(k)·I` with `ridge_abs(k) = ridge · trace(sigma[k]) / C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMoments {
    pub num_classes: usize,
    pub dim: usize,
    /// `K × C`, row-major.
    pub mu: Vec<f64>,
    /// `K × C × C`.
    pub sigma: Vec<f64>,
    /// `K × C × C` lower-triangular.
    pub chol: Vec<f64>,
    pub ema_momentum: f64,
    pub ridge: f64,
    /// Draws that contributed to each class estimate.
    pub sample_counts: Vec<usize>,
}

impl ClassMoments {
    pub fn mu_k(&self, k: usize) -> &[f64] {
        &self.mu[k * self.dim..(k + 1) * self.dim]
    }

    pub fn sigma_k(&self, k: usize) -> &[f64] {
        let cc = self.dim * self.dim;
        &self.sigma[k * cc..(k + 1) * cc]
    }

    pub fn chol_k(&self, k: usize) -> &[f64] {
        let cc = self.dim * self.dim;
        &self.chol[k * cc..(k + 1) * cc]
    }

    /// Absolute diagonal loading applied to class `k`.
    pub fn ridge_abs(&self, k: usize) -> f64 {
        ridge_abs(self.ridge, self.sigma_k(k), self.dim)
    }

    /// `sigma[k] + ridge_abs(k)·I`.
    pub fn regularized(&self, k: usize) -> Vec<f64> {
        let c = self.dim;
        let eps = self.ridge_abs(k);
        let mut s = self.sigma_k(k).to_vec();
        for i in 0..c {
            s[i * c + i] += eps;
        }
        s
    }

    /// Builds from raw `mu` / `sigma`, symmetrizing and factoring.
    pub fn from_parts(
        num_classes: usize,
        dim: usize,
        mu: Vec<f64>,
        mut sigma: Vec<f64>,
        ridge: f64,
        ema_momentum: f64,
        sample_counts: Vec<usize>,
    ) -> Result<Self> {
        if mu.len() != num_classes * dim || sigma.len() != num_classes * dim * dim {
            return Err(Error::Shape(format!(
                "moments: {} means and {} covariance values for K={num_classes}, C={dim}",
                mu.len(),
                sigma.len()
            )));
        }
        if !(ridge >= 0.0) {
            return Err(Error::Config(format!("ridge must be >= 0, got {ridge}")));
        }
        if !(0.0..1.0).contains(&ema_momentum) {
            return Err(Error::Config(format!(
                "moment momentum {ema_momentum} outside [0, 1)"
            )));
        }
        if mu.iter().chain(&sigma).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "class_moments" });
        }
        let cc = dim * dim;
        for s in sigma.chunks_mut(cc) {
            symmetrize(s, dim);
        }
        let mut out = Self {
            num_classes,
            dim,
            mu,
            sigma,
            chol: Vec::with_capacity(num_classes * cc),
            ema_momentum,
            ridge,
            sample_counts,
        };
        for k in 0..num_classes {
            let l = cholesky_psd(&out.regularized(k), dim)?;
            out.chol.extend(l);
        }
        Ok(out)
    }
}

fn ridge_abs(ridge: f64, sigma: &[f64], dim: usize) -> f64 {
    ridge * (trace(sigma, dim) / dim as f64).max(f64::MIN_POSITIVE)
}

/// Class moments from the rows listed in `draws` (repeats count repeatedly).
///
/// Classes with fewer than two draws fall back to `Σ = ridge·I`; a class with
/// no draws at all takes the mean of its rows in `features`.
pub fn moments_from_draws(
    features: &[f64],
    dim: usize,
    labels: &[usize],
    num_classes: usize,
    draws: &[usize],
    ridge: f64,
    ema_momentum: f64,
) -> Result<ClassMoments> {
    if features.len() != labels.len() * dim {
        return Err(Error::Shape(format!(
            "moments: {} feature values for {} labels of dim {dim}",
            features.len(),
            labels.len()
        )));
    }
    let mut support = vec![0usize; num_classes];
    for &l in labels {
        if l >= num_classes {
            return Err(Error::Validation(format!("label {l} outside [0, {num_classes})")));
        }
        support[l] += 1;
    }
    if let Some(k) = support.iter().position(|&n| n == 0) {
        return Err(Error::Validation(format!("class {k} has no samples")));
    }

    let (c, cc) = (dim, dim * dim);
    let mut mu = vec![0.0; num_classes * c];
    let mut counts = vec![0usize; num_classes];
    for &i in draws {
        let k = labels[i];
        counts[k] += 1;
        let row = &features[i * c..(i + 1) * c];
        mu[k * c..(k + 1) * c].iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    for k in 0..num_classes {
        let m = &mut mu[k * c..(k + 1) * c];
        if counts[k] > 0 {
            m.iter_mut().for_each(|v| *v /= counts[k] as f64);
        } else {
            log::warn!("class {k} received no draws; using its full-data mean");
            let mut n = 0.0;
            for (i, _) in labels.iter().enumerate().filter(|(_, &l)| l == k) {
                m.iter_mut().zip(&features[i * c..(i + 1) * c]).for_each(|(a, x)| *a += x);
                n += 1.0;
            }
            m.iter_mut().for_each(|v| *v /= n);
        }
    }

    let mut sigma = vec![0.0; num_classes * cc];
    let mut d = vec![0.0; c];
    for &i in draws {
        let k = labels[i];
        if counts[k] < 2 {
            continue;
        }
        let row = &features[i * c..(i + 1) * c];
        for j in 0..c {
            d[j] = row[j] - mu[k * c + j];
        }
        let s = &mut sigma[k * cc..(k + 1) * cc];
        for a in 0..c {
            let da = d[a];
            if da == 0.0 {
                continue;
            }
            for b in a..c {
                s[a * c + b] += da * d[b];
            }
        }
    }
    for k in 0..num_classes {
        let s = &mut sigma[k * cc..(k + 1) * cc];
        if counts[k] < 2 {
            log::warn!(
                "class {k} has {} draw(s); covariance falls back to ridge*I",
                counts[k]
            );
            s.iter_mut().for_each(|v| *v = 0.0);
            for a in 0..c {
                s[a * c + a] = ridge;
            }
            continue;
        }
        let denom = (counts[k] - 1) as f64;
        for a in 0..c {
            for b in a..c {
                let v = s[a * c + b] / denom;
                s[a * c + b] = v;
                s[b * c + a] = v;
            }
        }
    }
    ClassMoments::from_parts(num_classes, dim, mu, sigma, ridge, ema_momentum, counts)
}

/// Row indices for a moment estimate: every row once (uniform) or `N` draws
/// from the class-balanced sampler.
pub fn moment_draws(
    labels: &[usize],
    num_classes: usize,
    mode: SamplingMode,
    seed_value: u64,
) -> Result<Vec<usize>> {
    match mode {
        SamplingMode::Uniform => Ok((0..labels.len()).collect()),
        SamplingMode::ClassBalanced => Ok(ClassBalancedSampler::from_labels(
            labels,
            num_classes,
            seed_value,
        )?
        .next_batch(labels.len())),
    }
}

/// `N` instance-uniform draws with replacement (a plain bootstrap).
pub fn bootstrap_draws(n: usize, seed_value: u64) -> Vec<usize> {
    let mut rng = seed::rng(seed_value, &[]);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Per-class mean and unbiased covariance, exact (uniform) or over a
/// class-balanced resampled stream of `N` draws.
#[allow(clippy::too_many_arguments)]
pub fn estimate_class_moments(
    features: &[f64],
    dim: usize,
    labels: &[usize],
    num_classes: usize,
    mode: SamplingMode,
    ridge: f64,
    ema_momentum: f64,
    seed_value: u64,
) -> Result<ClassMoments> {
    let draws = moment_draws(labels, num_classes, mode, seed_value)?;
    moments_from_draws(features, dim, labels, num_classes, &draws, ridge, ema_momentum)
}

/// `m·prev + (1−m)·new` for means and covariances, re-factored.
pub fn ema_moments(prev: &ClassMoments, new: &ClassMoments) -> Result<ClassMoments> {
    if prev.num_classes != new.num_classes || prev.dim != new.dim {
        return Err(Error::Shape(format!(
            "ema_moments: K={} C={} vs K={} C={}",
            prev.num_classes, prev.dim, new.num_classes, new.dim
        )));
    }
    let m = new.ema_momentum;
    let blend = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| m * x + (1.0 - m) * y).collect()
    };
    ClassMoments::from_parts(
        new.num_classes,
        new.dim,
        blend(&prev.mu, &new.mu),
        blend(&prev.sigma, &new.sigma),
        new.ridge,
        m,
        new.sample_counts.clone(),
    )
}
