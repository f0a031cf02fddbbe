use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::{seed, Error, Result};

/// How training indices are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Every instance equally likely (the natural, imbalanced stream).
    Uniform,
    /// Class first with probability 1/K, then an instance within it.
    ClassBalanced,
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "class_balanced" | "class-balanced" => Ok(Self::ClassBalanced),
            _ => Err(Error::Config(format!("unknown sampling mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::ClassBalanced => "class_balanced",
        })
    }
}

/// Infinite stream of indices: uniform class, then uniform instance, with
/// replacement.
pub struct ClassBalancedSampler {
    per_class: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
}

impl ClassBalancedSampler {
    pub fn from_labels(labels: &[usize], num_classes: usize, seed_value: u64) -> Result<Self> {
        let mut per_class = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            per_class[l].push(i);
        }
        if let Some(c) = per_class.iter().position(Vec::is_empty) {
            return Err(Error::Validation(format!(
                "class-balanced sampling needs every class; class {c} is empty"
            )));
        }
        Ok(Self {
            per_class,
            rng: seed::rng(seed_value, &[]),
        })
    }

    pub fn next_batch(&mut self, n: usize) -> Vec<usize> {
        self.take(n).collect()
    }
}

impl Iterator for ClassBalancedSampler {
    type Item = usize;
    fn next(&mut self) -> Option<usize> {
        let c = self.rng.random_range(0..self.per_class.len());
        let members = &self.per_class[c];
        Some(members[self.rng.random_range(0..members.len())])
    }
}

pub fn sampler_class_balanced(ds: &Dataset, seed_value: u64) -> Result<ClassBalancedSampler> {
    ClassBalancedSampler::from_labels(&ds.labels, ds.num_classes, seed_value)
}

/// One epoch's worth of batches of size `batch` (last one may be short).
///
/// Uniform mode is a seeded permutation of all rows; class-balanced mode
/// draws `n` indices from [`ClassBalancedSampler`].
pub fn epoch_batches(
    labels: &[usize],
    num_classes: usize,
    mode: SamplingMode,
    batch: usize,
    seed_value: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let n = labels.len();
    let order: Vec<usize> = match mode {
        SamplingMode::Uniform => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut seed::rng(seed_value, &[]));
            idx
        }
        SamplingMode::ClassBalanced => {
            ClassBalancedSampler::from_labels(labels, num_classes, seed_value)?.next_batch(n)
        }
    };
    Ok(order.chunks(batch).map(<[usize]>::to_vec).collect())
}
