use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{seed, Error, Result};

/// Parameters of a synthetic Pareto long-tailed Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongTailSpec {
    pub num_classes: usize,
    pub head_count: usize,
    pub imbalance_factor: f64,
    pub feature_dim: usize,
    pub class_separation: f64,
    pub noise_dims: usize,
    pub seed: u64,
}

impl LongTailSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.head_count < 1 {
            return Err(Error::Validation("head count must be at least 1".into()));
        }
        if !(self.imbalance_factor >= 1.0) || !self.imbalance_factor.is_finite() {
            return Err(Error::Validation(format!(
                "imbalance factor must be >= 1, got {}",
                self.imbalance_factor
            )));
        }
        if self.feature_dim < 2 {
            return Err(Error::Validation(format!(
                "feature_dim must be >= 2, got {}",
                self.feature_dim
            )));
        }
        if !(self.class_separation > 0.0) {
            return Err(Error::Validation(format!(
                "class separation must be positive, got {}",
                self.class_separation
            )));
        }
        Ok(())
    }

    pub fn total_dim(&self) -> usize {
        self.feature_dim + self.noise_dims
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// Labelled feature matrix. Features are `f32` so that the on-disk formats
/// round-trip exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Vec<f32>,
    pub dim: usize,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub class_counts: Vec<usize>,
    pub split_tag: SplitTag,
}

impl Dataset {
    pub fn new(
        features: Vec<f32>,
        dim: usize,
        labels: Vec<usize>,
        num_classes: usize,
        split_tag: SplitTag,
    ) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::Shape(format!(
                "{} feature values for {} rows of dim {dim}",
                features.len(),
                labels.len()
            )));
        }
        let mut class_counts = vec![0; num_classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= num_classes {
                return Err(Error::Validation(format!(
                    "row {i}: label {l} outside [0, {num_classes})"
                )));
            }
            class_counts[l] += 1;
        }
        if let Some(bad) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite feature at row {}",
                bad / dim
            )));
        }
        Ok(Self {
            features,
            dim,
            labels,
            num_classes,
            class_counts,
            split_tag,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows `idx` as a dense `f64` batch plus their labels.
    pub fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(idx.len() * self.dim);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend(self.row(i).iter().map(|&v| v as f64));
            y.push(self.labels[i]);
        }
        (x, y)
    }

    pub fn features_f64(&self) -> Vec<f64> {
        self.features.iter().map(|&v| v as f64).collect()
    }

    pub fn subset(&self, idx: &[usize], tag: SplitTag) -> Dataset {
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(features, self.dim, labels, self.num_classes, tag)
            .expect("subset of a valid dataset")
    }

    /// Indices of each class, in row order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

/// `counts[c] = max(1, round_half_even(N₀ · r^(−c/(K−1))))`.
pub fn pareto_counts(spec: &LongTailSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let k = spec.num_classes;
    let n0 = spec.head_count as f64;
    Ok((0..k)
        .map(|c| {
            let exponent = -(c as f64) / (k - 1) as f64;
            let v = (n0 * spec.imbalance_factor.powf(exponent)).round_ties_even();
            (v as usize).max(1)
        })
        .collect())
}

/// Class means: two points `±sep/2` on the first axis for K=2, otherwise a
/// circle in the first two dims with adjacent means `sep` apart.
pub fn class_means(spec: &LongTailSpec) -> Vec<Vec<f64>> {
    let k = spec.num_classes;
    let d = spec.total_dim();
    (0..k)
        .map(|c| {
            let mut m = vec![0.0; d];
            if k == 2 {
                m[0] = if c == 0 { -0.5 } else { 0.5 } * spec.class_separation;
            } else {
                let radius = spec.class_separation / (2.0 * (std::f64::consts::PI / k as f64).sin());
                let angle = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
                m[0] = radius * angle.cos();
                m[1] = radius * angle.sin();
            }
            m
        })
        .collect()
}

/// Unit-variance isotropic Gaussian classes with Pareto counts, rows grouped
/// by class.
pub fn synth_longtail(spec: &LongTailSpec) -> Result<Dataset> {
    let counts = pareto_counts(spec)?;
    let means = class_means(spec);
    let d = spec.total_dim();
    let mut rng = seed::rng(spec.seed, &[seed::TAG_DATA]);
    let total: usize = counts.iter().sum();
    let mut features = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    for (c, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            for m in &means[c] {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push((m + z) as f32);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, d, labels, spec.num_classes, SplitTag::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec(r: f64) -> LongTailSpec {
        LongTailSpec {
            num_classes: 8,
            head_count: 1000,
            imbalance_factor: r,
            feature_dim: 4,
            class_separation: 3.0,
            noise_dims: 2,
            seed: 11,
        }
    }

    #[test]
    fn pareto_closed_form() {
        // Oracle: direct evaluation with round-half-even.
        let oracle: Vec<usize> = (0..8)
            .map(|c| (1000.0 * 100f64.powf(-(c as f64) / 7.0)).round_ties_even() as usize)
            .collect();
        let got = pareto_counts(&spec(100.0)).unwrap();
        assert_eq!(got, oracle);
        assert_eq!(got, vec![1000, 518, 268, 139, 72, 37, 19, 10]);
        assert_eq!(got[7], (1000.0f64 / 100.0).round() as usize);
    }

    #[test]
    fn pareto_balanced_and_invalid() {
        assert_eq!(pareto_counts(&spec(1.0)).unwrap(), vec![1000; 8]);
        assert!(matches!(pareto_counts(&spec(0.5)), Err(Error::Validation(_))));
        let mut tiny = spec(1000.0);
        tiny.head_count = 3;
        assert!(pareto_counts(&tiny).unwrap().iter().all(|&c| c >= 1));
    }

    #[test]
    fn synth_matches_counts_and_is_deterministic() {
        let s = spec(100.0);
        let a = synth_longtail(&s).unwrap();
        let b = synth_longtail(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts, pareto_counts(&s).unwrap());
        assert_eq!(a.dim, 6);
    }

    #[test]
    fn adjacent_means_are_sep_apart() {
        let s = spec(1.0);
        let m = class_means(&s);
        for c in 0..8 {
            let n = (c + 1) % 8;
            let d: f64 = m[c].iter().zip(&m[n]).map(|(a, b)| (a - b).powi(2)).sum();
            assert!((d.sqrt() - 3.0).abs() < 1e-12);
        }
    }
}
