use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, SplitTag};
use crate::{seed, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const fn new(train: f64, val: f64, test: f64) -> Self {
        Self { train, val, test }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|r| !(*r > 0.0)) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "split ratios must be positive and sum to 1, got {all:?}"
            )));
        }
        Ok(())
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self::new(0.7, 0.1, 0.2)
    }
}

/// Stratified index split. Classes with fewer than three samples go
/// entirely to train.
pub fn split_indices(
    ds: &Dataset,
    ratios: SplitRatios,
    seed_value: u64,
) -> Result<[Vec<usize>; 3]> {
    ratios.validate()?;
    let mut out: [Vec<usize>; 3] = Default::default();
    for (c, mut idx) in ds.class_indices().into_iter().enumerate() {
        let n = idx.len();
        if n == 0 {
            continue;
        }
        if n < 3 {
            log::warn!("class {c} has {n} samples; all assigned to train");
            out[0].extend(idx);
            continue;
        }
        let mut rng = seed::rng(seed_value, &[seed::TAG_SPLIT, c as u64]);
        idx.shuffle(&mut rng);
        let n_val = (n as f64 * ratios.val).round_ties_even() as usize;
        let n_test = (n as f64 * ratios.test).round_ties_even() as usize;
        let n_val = n_val.min(n - 1);
        let n_test = n_test.min(n - 1 - n_val);
        let n_train = n - n_val - n_test;
        out[0].extend_from_slice(&idx[..n_train]);
        out[1].extend_from_slice(&idx[n_train..n_train + n_val]);
        out[2].extend_from_slice(&idx[n_train + n_val..]);
    }
    for part in out.iter_mut() {
        part.sort_unstable();
    }
    Ok(out)
}

pub fn split(
    ds: &Dataset,
    ratios: SplitRatios,
    seed_value: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let [tr, va, te] = split_indices(ds, ratios, seed_value)?;
    Ok((
        ds.subset(&tr, SplitTag::Train),
        ds.subset(&va, SplitTag::Val),
        ds.subset(&te, SplitTag::Test),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_class(n: usize) -> Dataset {
        Dataset::new(vec![0.0; n * 2], 2, vec![0; n], 1, SplitTag::Train).unwrap()
    }

    #[test]
    fn seven_one_two() {
        let (tr, va, te) = split(&one_class(1000), SplitRatios::new(0.7, 0.1, 0.2), 3).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (700, 100, 200));
    }

    #[test]
    fn eight_one_one() {
        let (tr, va, te) = split(&one_class(1000), SplitRatios::new(0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (800, 100, 100));
    }

    #[test]
    fn tiny_class_goes_to_train() {
        let (tr, va, te) = split(&one_class(2), SplitRatios::default(), 3).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (2, 0, 0));
        let (tr, va, te) = split(&one_class(10), SplitRatios::default(), 3).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (7, 1, 2));
    }

    #[test]
    fn bad_ratios() {
        assert!(split(&one_class(10), SplitRatios::new(0.5, 0.5, 0.5), 0).is_err());
        assert!(split(&one_class(10), SplitRatios::new(1.0, 0.0, 0.0), 0).is_err());
    }
}
