//! Stage two: iterative classifier calibration.
//!
//! Each iteration estimates class-conditional Gaussians of the encoder
//! features, trains a fresh-started classifier on a balanced bank drawn from
//! them (encoder frozen), then fine-tunes the encoder under the feature
//! distribution consistency loss (classifier frozen).

mod em;
mod fdc;
mod moments;
mod vfc;

pub use em::{
    bank_accuracy, bank_loss, e_step, fdc_eval, m_step, run_icc, BankSource, IccConfig,
    IccIterRecord, IccTrace,
};
pub use fdc::{
    attraction_psi, fdc_loss, repulsion_phi, FdcForward, FdcTerms, MahalanobisMetric,
    MahalanobisMode,
};
pub use moments::{
    bootstrap_draws, ema_moments, estimate_class_moments, moment_draws, moments_from_draws,
    ClassMoments,
};
pub use vfc::{resampled_real_bank, vfc_sample, VirtualFeatureBank};
