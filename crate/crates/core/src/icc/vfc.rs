use rand_distr::{Distribution, StandardNormal};

use super::ClassMoments;
use crate::datagen::ClassBalancedSampler;
use crate::{seed, Error, Result};

/// Class-major feature bank with exactly `per_class` rows per class.
#[derive(Clone, Debug, PartialEq)]
pub struct VirtualFeatureBank {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
    pub num_classes: usize,
    pub per_class: usize,
}

impl VirtualFeatureBank {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_rows(&self, k: usize) -> &[f64] {
        let block = self.per_class * self.dim;
        &self.features[k * block..(k + 1) * block]
    }
}

/// `R` draws of `μ_k + L_k ξ`, `ξ ~ N(0, I)`, per class; class `k` uses the
/// stream `(seed, k)`.
pub fn vfc_sample(moments: &ClassMoments, r: usize, seed_value: u64) -> Result<VirtualFeatureBank> {
    if r == 0 {
        return Err(Error::Config("virtual bank needs R >= 1".into()));
    }
    let (k_total, c) = (moments.num_classes, moments.dim);
    let mut features = Vec::with_capacity(k_total * r * c);
    let mut labels = Vec::with_capacity(k_total * r);
    let mut xi = vec![0.0; c];
    for k in 0..k_total {
        let mut rng = seed::rng(seed_value, &[k as u64]);
        let mu = moments.mu_k(k);
        let l = moments.chol_k(k);
        for _ in 0..r {
            xi.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
            for i in 0..c {
                let row = &l[i * c..i * c + i + 1];
                let s: f64 = row.iter().zip(&xi).map(|(a, b)| a * b).sum();
                features.push(mu[i] + s);
            }
            labels.push(k);
        }
    }
    Ok(VirtualFeatureBank {
        features,
        labels,
        dim: c,
        num_classes: k_total,
        per_class: r,
    })
}

/// `per_class` real feature rows per class drawn with replacement, class-major.
pub fn resampled_real_bank(
    features: &[f64],
    dim: usize,
    labels: &[usize],
    num_classes: usize,
    per_class: usize,
    seed_value: u64,
) -> Result<VirtualFeatureBank> {
    if features.len() != labels.len() * dim {
        return Err(Error::Shape(format!(
            "bank: {} feature values for {} labels of dim {dim}",
            features.len(),
            labels.len()
        )));
    }
    // Validates that every class is present.
    ClassBalancedSampler::from_labels(labels, num_classes, seed_value)?;
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut out = Vec::with_capacity(num_classes * per_class * dim);
    let mut out_labels = Vec::with_capacity(num_classes * per_class);
    for (k, rows) in by_class.iter().enumerate() {
        let class_labels = vec![0usize; rows.len()];
        let mut s = ClassBalancedSampler::from_labels(&class_labels, 1, seed::derive(seed_value, &[k as u64]))?;
        for j in s.next_batch(per_class) {
            let i = rows[j];
            out.extend_from_slice(&features[i * dim..(i + 1) * dim]);
            out_labels.push(k);
        }
    }
    Ok(VirtualFeatureBank {
        features: out,
        labels: out_labels,
        dim,
        num_classes,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag_moments(diag: &[f64], ridge: f64) -> ClassMoments {
        let c = diag.len();
        let mut sigma = vec![0.0; c * c];
        for (i, d) in diag.iter().enumerate() {
            sigma[i * c + i] = *d;
        }
        ClassMoments::from_parts(1, c, vec![0.5; c], sigma, ridge, 0.9, vec![10]).unwrap()
    }

    #[test]
    fn zero_covariance_gives_the_mean() {
        let m = diag_moments(&[0.0, 0.0], 1e-4);
        let bank = vfc_sample(&m, 20, 3).unwrap();
        assert!(bank.features.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn exact_rows_per_class_and_determinism() {
        let m = ClassMoments::from_parts(
            3,
            1,
            vec![0.0, 1.0, 2.0],
            vec![1.0, 1.0, 1.0],
            0.0,
            0.9,
            vec![5, 5, 5],
        )
        .unwrap();
        let bank = vfc_sample(&m, 7, 11).unwrap();
        let mut hist = [0; 3];
        bank.labels.iter().for_each(|&l| hist[l] += 1);
        assert_eq!(hist, [7, 7, 7]);
        assert_eq!(bank, vfc_sample(&m, 7, 11).unwrap());
        assert_ne!(bank, vfc_sample(&m, 7, 12).unwrap());
    }

    #[test]
    fn resampled_bank_uses_real_rows() {
        let f = [1.0, 2.0, 3.0, 10.0];
        let bank = resampled_real_bank(&f, 1, &[0, 0, 0, 1], 2, 5, 0).unwrap();
        assert_eq!(bank.len(), 10);
        assert!(bank.class_rows(0).iter().all(|v| [1.0, 2.0, 3.0].contains(v)));
        assert!(bank.class_rows(1).iter().all(|&v| v == 10.0));
    }
}
