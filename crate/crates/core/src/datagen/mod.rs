//! Synthetic Pareto long-tailed data, splits, perturbations, samplers and
//! dataset files.

mod io;
mod longtail;
mod perturb;
mod sampler;
mod split;

pub use io::{decode_binary, decode_csv, encode_binary, encode_csv, load_dataset, save_dataset};
pub(crate) use io::write_atomic;
pub use longtail::{class_means, pareto_counts, synth_longtail, Dataset, LongTailSpec, SplitTag};
pub use perturb::{perturb, validate_pair, PerturbConfig, PerturbMode};
pub use sampler::{
    epoch_batches, sampler_class_balanced, ClassBalancedSampler, SamplingMode,
};
pub use split::{split, split_indices, SplitRatios};
