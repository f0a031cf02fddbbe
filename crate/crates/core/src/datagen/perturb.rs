use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{seed, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbMode {
    Strong,
    Weak,
}

/// Vector-space augmentation: additive noise, coordinate dropout to zero and
/// a per-row multiplicative jitter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub mode: PerturbMode,
    pub gauss_sigma: f64,
    pub mask_prob: f64,
    pub scale_jitter: f64,
    pub seed: u64,
}

impl PerturbConfig {
    pub fn weak(seed: u64) -> Self {
        Self {
            mode: PerturbMode::Weak,
            gauss_sigma: 0.05,
            mask_prob: 0.0,
            scale_jitter: 0.02,
            seed,
        }
    }

    pub fn strong(seed: u64) -> Self {
        Self {
            mode: PerturbMode::Strong,
            gauss_sigma: 0.2,
            mask_prob: 0.15,
            scale_jitter: 0.1,
            seed,
        }
    }

    pub fn identity(mode: PerturbMode, seed: u64) -> Self {
        Self {
            mode,
            gauss_sigma: 0.0,
            mask_prob: 0.0,
            scale_jitter: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gauss_sigma >= 0.0) || !(self.scale_jitter >= 0.0) {
            return Err(Error::Config(format!(
                "perturbation sigma/jitter must be >= 0: {self:?}"
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!("mask_prob {} outside [0, 1]", self.mask_prob)));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.gauss_sigma == 0.0 && self.mask_prob == 0.0 && self.scale_jitter == 0.0
    }
}

/// Checks the strong/weak ordering: every weak knob is at most its strong
/// counterpart.
pub fn validate_pair(strong: &PerturbConfig, weak: &PerturbConfig) -> Result<()> {
    strong.validate()?;
    weak.validate()?;
    if weak.gauss_sigma > strong.gauss_sigma
        || weak.mask_prob > strong.mask_prob
        || weak.scale_jitter > strong.scale_jitter
    {
        return Err(Error::Config(format!(
            "weak perturbation exceeds strong: weak {weak:?}, strong {strong:?}"
        )));
    }
    Ok(())
}

/// `x' = s · m ⊙ (x + ε)` per row, deterministic in `(cfg.seed, batch_index)`.
pub fn perturb(batch: &[f64], dim: usize, cfg: &PerturbConfig, batch_index: u64) -> Vec<f64> {
    if cfg.is_identity() {
        return batch.to_vec();
    }
    let mut rng = seed::rng(cfg.seed, &[batch_index]);
    let noise = (cfg.gauss_sigma > 0.0).then(|| Normal::new(0.0, cfg.gauss_sigma).unwrap());
    let mut out = Vec::with_capacity(batch.len());
    for row in batch.chunks(dim) {
        let s = if cfg.scale_jitter > 0.0 {
            1.0 + rng.random_range(-cfg.scale_jitter..=cfg.scale_jitter)
        } else {
            1.0
        };
        for &v in row {
            let mut y = v;
            if let Some(n) = &noise {
                y += n.sample(&mut rng);
            }
            if cfg.mask_prob > 0.0 && rng.random::<f64>() < cfg.mask_prob {
                y = 0.0;
            }
            out.push(s * y);
        }
    }
    out
}
