use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    ema_moments, estimate_class_moments, fdc_loss, resampled_real_bank, vfc_sample, ClassMoments,
    FdcTerms, MahalanobisMetric, MahalanobisMode, VirtualFeatureBank,
};
use crate::datagen::{epoch_batches, Dataset, SamplingMode};
use crate::diffcore::{
    classifier_forward, init_classifier, sgd_step, ModelState, SgdConfig, Tape, Tensor, Which,
};
use crate::metrics::{argmax_rows, balanced_accuracy, confusion_matrix};
use crate::{eval, seed, Error, Result};

/// What the M-step classifier is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankSource {
    /// Gaussian draws from the class moments.
    Virtual,
    /// Real encoder features, resampled class-balanced to the same size.
    ResampledReal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IccConfig {
    pub iterations: usize,
    pub r_virtual: usize,
    pub lambda_e: f64,
    pub lr_classifier: f64,
    pub lr_encoder: f64,
    pub m_epochs: usize,
    pub e_epochs: usize,
    pub m_batch_size: usize,
    pub e_batch_size: usize,
    pub mahalanobis_mode: MahalanobisMode,
    pub e_step_sampling: SamplingMode,
    pub m_step_stats_sampling: SamplingMode,
    pub moment_momentum: f64,
    pub ridge: f64,
    pub bank: BankSource,
    pub max_grad_norm: Option<f64>,
    /// Keep the iteration with the best validation BACC instead of the last.
    pub select_best_val: bool,
    pub seed: u64,
}

impl Default for IccConfig {
    fn default() -> Self {
        Self {
            iterations: 5,
            r_virtual: 50_000,
            lambda_e: 1e-4,
            lr_classifier: 1e-5,
            lr_encoder: 1e-6,
            m_epochs: 10,
            e_epochs: 5,
            m_batch_size: 256,
            e_batch_size: 128,
            mahalanobis_mode: MahalanobisMode::Inverse,
            e_step_sampling: SamplingMode::Uniform,
            m_step_stats_sampling: SamplingMode::ClassBalanced,
            moment_momentum: 0.9,
            ridge: 1e-4,
            bank: BankSource::Virtual,
            max_grad_norm: None,
            select_best_val: true,
            seed: 0,
        }
    }
}

impl IccConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Validation("stage 2 needs at least one iteration".into()));
        }
        if self.r_virtual < 1 {
            return Err(Error::Config("R must be >= 1".into()));
        }
        if !(self.lambda_e >= 0.0) {
            return Err(Error::Config(format!("lambda_e must be >= 0, got {}", self.lambda_e)));
        }
        if self.m_batch_size < 1 || self.e_batch_size < 1 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.moment_momentum) {
            return Err(Error::Config(format!(
                "moment momentum {} outside [0, 1)",
                self.moment_momentum
            )));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::Config(format!("ridge must be >= 0, got {}", self.ridge)));
        }
        self.m_sgd().validate()?;
        self.e_sgd().validate()
    }

    fn m_sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.lr_classifier,
            max_grad_norm: self.max_grad_norm,
        }
    }

    fn e_sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.lr_encoder,
            max_grad_norm: self.max_grad_norm,
        }
    }
}

fn abort(stage: &str, detail: String, err: Error) -> Error {
    match err {
        Error::NonFinite { .. } => Error::NumericAbort {
            stage: stage.into(),
            snapshot: format!("{detail}; {err}"),
        },
        other => other,
    }
}

fn classifier_ce(state: &ModelState, z: &[f64], labels: &[usize]) -> Result<(Tape, crate::diffcore::Var, Vec<crate::diffcore::Var>)> {
    let mut tape = Tape::new();
    let vars = state.classifier.bind(&mut tape, true);
    let zv = tape.constant(Tensor::matrix(labels.len(), state.arch.feature_dim, z.to_vec())?);
    let logits = classifier_forward(&mut tape, &vars, zv)?;
    let loss = tape.cross_entropy(logits, labels)?;
    Ok((tape, loss, vars))
}

/// Mean classifier cross-entropy over the whole bank.
pub fn bank_loss(bank: &VirtualFeatureBank, state: &ModelState) -> Result<f64> {
    let (tape, loss, _) = classifier_ce(state, &bank.features, &bank.labels)?;
    Ok(tape.value(loss).item())
}

/// Classifier accuracy on a bank.
pub fn bank_accuracy(bank: &VirtualFeatureBank, state: &ModelState) -> Result<f64> {
    let logits = state.logits_from_features(&bank.features, bank.len())?;
    let pred = argmax_rows(&logits, bank.num_classes);
    let hits = pred.iter().zip(&bank.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / bank.len() as f64)
}

/// Trains the classifier on `bank` with the encoder frozen; returns the
/// final mean bank loss. `stream` keys the shuffling.
pub fn m_step(
    bank: &VirtualFeatureBank,
    state: &mut ModelState,
    cfg: &IccConfig,
    stream: u64,
) -> Result<f64> {
    if bank.dim != state.arch.feature_dim || bank.num_classes != state.arch.num_classes {
        return Err(Error::Shape(format!(
            "bank is {}-dim over {} classes, model expects {} over {}",
            bank.dim, bank.num_classes, state.arch.feature_dim, state.arch.num_classes
        )));
    }
    let sgd = cfg.m_sgd();
    let c = bank.dim;
    let mut z = Vec::with_capacity(cfg.m_batch_size * c);
    let mut y = Vec::with_capacity(cfg.m_batch_size);
    for epoch in 0..cfg.m_epochs {
        let batches = epoch_batches(
            &bank.labels,
            bank.num_classes,
            SamplingMode::Uniform,
            cfg.m_batch_size,
            seed::derive(cfg.seed, &[seed::TAG_MSTEP, stream, epoch as u64]),
        )?;
        for (step, idx) in batches.iter().enumerate() {
            z.clear();
            y.clear();
            for &i in idx {
                z.extend_from_slice(&bank.features[i * c..(i + 1) * c]);
                y.push(bank.labels[i]);
            }
            let detail = || format!("m-step {stream} epoch {epoch} batch {step}");
            let (tape, loss, vars) =
                classifier_ce(state, &z, &y).map_err(|e| abort("stage2.m_step", detail(), e))?;
            let grads = tape.backward(loss).map_err(|e| abort("stage2.m_step", detail(), e))?;
            state.classifier.absorb_grads(&vars, &grads);
            sgd_step(state, Which::Classifier, &sgd)?;
        }
    }
    bank_loss(bank, state).map_err(|e| abort("stage2.m_step", format!("m-step {stream} final"), e))
}

/// Mean FDC terms over `ds`, no training.
pub fn fdc_eval(
    ds: &Dataset,
    state: &ModelState,
    metric: &MahalanobisMetric,
    lambda_e: f64,
) -> Result<FdcTerms> {
    let x = ds.features_f64();
    Ok(fdc_loss(&x, &ds.labels, state, metric, lambda_e)?.terms)
}

/// Fine-tunes the encoder under the FDC loss with the classifier frozen;
/// returns the final full-set loss.
pub fn e_step(
    train: &Dataset,
    state: &mut ModelState,
    moments: &ClassMoments,
    cfg: &IccConfig,
    stream: u64,
) -> Result<f64> {
    let metric = MahalanobisMetric::new(moments, cfg.mahalanobis_mode)?;
    let sgd = cfg.e_sgd();
    for epoch in 0..cfg.e_epochs {
        let batches = epoch_batches(
            &train.labels,
            train.num_classes,
            cfg.e_step_sampling,
            cfg.e_batch_size,
            seed::derive(cfg.seed, &[seed::TAG_ESTEP, stream, epoch as u64]),
        )?;
        for (step, idx) in batches.iter().enumerate() {
            let (x, y) = train.gather(idx);
            let detail = || format!("e-step {stream} epoch {epoch} batch {step}");
            let fwd = fdc_loss(&x, &y, state, &metric, cfg.lambda_e)
                .map_err(|e| abort("stage2.e_step", detail(), e))?;
            fwd.backward_into(state)
                .map_err(|e| abort("stage2.e_step", format!("{} terms {:?}", detail(), fwd.terms), e))?;
            sgd_step(state, Which::Encoder, &sgd)?;
        }
    }
    let terms = fdc_eval(train, state, &metric, cfg.lambda_e)
        .map_err(|e| abort("stage2.e_step", format!("e-step {stream} final"), e))?;
    Ok(terms.total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IccIterRecord {
    pub iteration: usize,
    pub m_loss: f64,
    pub e_loss: f64,
    pub val_bacc: f64,
    pub train_bacc: f64,
}

/// Per-iteration records. Wall-clock is kept apart so equal seeds give
/// equal `iterations`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IccTrace {
    pub iterations: Vec<IccIterRecord>,
    /// Cumulative seconds at the end of each iteration.
    pub elapsed_secs: Vec<f64>,
    /// Iteration whose state was returned.
    pub selected: usize,
}

/// Fresh classifier, then `J` rounds of moments → EMA → bank → M-step → E-step.
pub fn run_icc(
    train: &Dataset,
    val: &Dataset,
    stage1: &ModelState,
    cfg: &IccConfig,
) -> Result<(ModelState, IccTrace)> {
    cfg.validate()?;
    let mut state = stage1.clone();
    let fresh = init_classifier(
        &state.arch,
        seed::derive(cfg.seed, &[seed::TAG_CLASSIFIER_REINIT]),
    );
    state.classifier = fresh.clone();
    state.teacher_classifier = fresh;
    state.encoder.clear_grads();

    let start = Instant::now();
    let mut trace = IccTrace::default();
    let mut prev: Option<ClassMoments> = None;
    let mut best: Option<(f64, ModelState)> = None;
    let x_train = train.features_f64();
    let c = state.arch.feature_dim;
    for j in 0..cfg.iterations {
        let it = j as u64;
        let feats = state.features(&x_train, train.len())?;
        let fresh_moments = estimate_class_moments(
            &feats,
            c,
            &train.labels,
            train.num_classes,
            cfg.m_step_stats_sampling,
            cfg.ridge,
            cfg.moment_momentum,
            seed::derive(cfg.seed, &[seed::TAG_MOMENTS, it]),
        )
        .map_err(|e| abort("stage2.moments", format!("iteration {j}"), e))?;
        let moments = match &prev {
            Some(p) => ema_moments(p, &fresh_moments)?,
            None => fresh_moments,
        };
        let bank_seed = seed::derive(cfg.seed, &[seed::TAG_VFC, it]);
        let bank = match cfg.bank {
            BankSource::Virtual => vfc_sample(&moments, cfg.r_virtual, bank_seed)?,
            BankSource::ResampledReal => resampled_real_bank(
                &feats,
                c,
                &train.labels,
                train.num_classes,
                cfg.r_virtual,
                bank_seed,
            )?,
        };
        drop(feats);
        let m_loss = m_step(&bank, &mut state, cfg, it)?;
        drop(bank);
        let e_loss = e_step(train, &mut state, &moments, cfg, it)?;
        prev = Some(moments);

        let val_bacc = eval::bacc(&state, val)?;
        let train_bacc = {
            let scores = state.predict_proba(&x_train, train.len())?;
            let pred = argmax_rows(&scores, train.num_classes);
            balanced_accuracy(&confusion_matrix(&train.labels, &pred, train.num_classes)?)
        };
        log::debug!(
            "stage2 iteration {j}: m_loss={m_loss:.5} e_loss={e_loss:.5} val_bacc={val_bacc:.4}"
        );
        trace.iterations.push(IccIterRecord {
            iteration: j,
            m_loss,
            e_loss,
            val_bacc,
            train_bacc,
        });
        trace.elapsed_secs.push(start.elapsed().as_secs_f64());
        if cfg.select_best_val && best.as_ref().is_none_or(|(b, _)| val_bacc > *b) {
            best = Some((val_bacc, state.clone()));
            trace.selected = j;
        }
    }
    match best {
        Some((_, s)) => Ok((s, trace)),
        None => {
            trace.selected = cfg.iterations - 1;
            Ok((state, trace))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{split, synth_longtail, LongTailSpec, SplitRatios};
    use crate::diffcore::Architecture;

    fn two_gaussians(sep: f64) -> ClassMoments {
        ClassMoments::from_parts(
            2,
            2,
            vec![-sep / 2.0, 0.0, sep / 2.0, 0.0],
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0],
            0.0,
            0.9,
            vec![100, 100],
        )
        .unwrap()
    }

    fn state(input_dim: usize, feature_dim: usize, k: usize) -> ModelState {
        let arch = Architecture {
            input_dim,
            hidden: vec![8],
            feature_dim,
            num_classes: k,
        };
        ModelState::new(arch, 5, 0.9).unwrap()
    }

    fn fast_cfg() -> IccConfig {
        IccConfig {
            lr_classifier: 0.1,
            lr_encoder: 0.01,
            lambda_e: 0.01,
            m_epochs: 2,
            e_epochs: 2,
            r_virtual: 500,
            ridge: 1.0,
            max_grad_norm: Some(5.0),
            ..IccConfig::default()
        }
    }

    fn data(seed_value: u64) -> (Dataset, Dataset) {
        let spec = LongTailSpec {
            num_classes: 4,
            head_count: 200,
            imbalance_factor: 10.0,
            feature_dim: 4,
            class_separation: 3.0,
            noise_dims: 2,
            seed: seed_value,
        };
        let (tr, va, _) = split(&synth_longtail(&spec).unwrap(), SplitRatios::default(), seed_value).unwrap();
        (tr, va)
    }

    #[test]
    fn m_step_separates_ten_sigma_gaussians_and_freezes_encoder() {
        let moments = two_gaussians(10.0);
        let bank = vfc_sample(&moments, 2000, 1).unwrap();
        let mut s = state(3, 2, 2);
        let enc = s.encoder.fingerprint();
        let before = bank_loss(&bank, &s).unwrap();
        let cfg = IccConfig { m_epochs: 3, ..fast_cfg() };
        let after = m_step(&bank, &mut s, &cfg, 0).unwrap();
        assert!(after <= before, "{after} > {before}");
        assert_eq!(s.encoder.fingerprint(), enc);
        let fresh = vfc_sample(&moments, 10_000, 2).unwrap();
        assert!(bank_accuracy(&fresh, &s).unwrap() >= 0.999);
    }

    #[test]
    fn e_step_freezes_classifier() {
        let (train, _) = data(3);
        let mut s = state(train.dim, 4, 4);
        let feats = s.features(&train.features_f64(), train.len()).unwrap();
        let m = estimate_class_moments(&feats, 4, &train.labels, 4, SamplingMode::ClassBalanced, 1.0, 0.9, 1).unwrap();
        let cls = s.classifier.fingerprint();
        let enc = s.encoder.fingerprint();
        e_step(&train, &mut s, &m, &fast_cfg(), 0).unwrap();
        assert_eq!(s.classifier.fingerprint(), cls);
        assert_ne!(s.encoder.fingerprint(), enc);
    }

    #[test]
    fn zero_epoch_e_step_is_a_no_op() {
        let (train, _) = data(3);
        let mut s = state(train.dim, 4, 4);
        let feats = s.features(&train.features_f64(), train.len()).unwrap();
        let m = estimate_class_moments(&feats, 4, &train.labels, 4, SamplingMode::Uniform, 1.0, 0.9, 1).unwrap();
        let before = s.clone();
        let cfg = IccConfig { lambda_e: 0.0, e_epochs: 0, ..fast_cfg() };
        e_step(&train, &mut s, &m, &cfg, 0).unwrap();
        assert_eq!(s, before);
    }

    /// Ψ is measured under the class moments of the encoder being measured,
    /// which makes it invariant to a global rescaling of the features; the
    /// E-step objective itself is unbounded under such rescaling.
    #[test]
    fn e_step_lowers_held_out_attraction() {
        let mut wins = 0;
        for seed_value in 1..=5 {
            let (train, val) = data(seed_value);
            let mut c1 = crate::rrl::Stage1Config::with_seed(seed_value);
            c1.lambda1 = 0.0;
            c1.epochs = 10;
            c1.lr = 0.05;
            c1.model = crate::rrl::ModelConfig { hidden: vec![8], feature_dim: 4 };
            let (mut s, _) = crate::rrl::train_stage1(&train, &val, &c1).unwrap();
            let feats = s.features(&train.features_f64(), train.len()).unwrap();
            let m = estimate_class_moments(&feats, 4, &train.labels, 4, SamplingMode::ClassBalanced, 1.0, 0.9, seed_value).unwrap();
            let metric = MahalanobisMetric::new(&m, MahalanobisMode::Inverse).unwrap();
            let cfg = IccConfig { lambda_e: 1.0, e_epochs: 3, ..fast_cfg() };
            let bank = vfc_sample(&m, cfg.r_virtual, seed_value).unwrap();
            m_step(&bank, &mut s, &cfg, 0).unwrap();
            let before = fdc_eval(&val, &s, &metric, cfg.lambda_e).unwrap().psi;
            e_step(&train, &mut s, &m, &cfg, 0).unwrap();
            let feats = s.features(&train.features_f64(), train.len()).unwrap();
            let m2 = estimate_class_moments(&feats, 4, &train.labels, 4, SamplingMode::ClassBalanced, 1.0, 0.9, seed_value).unwrap();
            let metric2 = MahalanobisMetric::new(&m2, MahalanobisMode::Inverse).unwrap();
            let after = fdc_eval(&val, &s, &metric2, cfg.lambda_e).unwrap().psi;
            wins += usize::from(after < before);
        }
        assert!(wins >= 4, "{wins}/5");
    }

    #[test]
    fn trace_length_and_determinism() {
        let (train, val) = data(2);
        let s = state(train.dim, 4, 4);
        let cfg = IccConfig { iterations: 1, ..fast_cfg() };
        let (_, t) = run_icc(&train, &val, &s, &cfg).unwrap();
        assert_eq!(t.iterations.len(), 1);
        let cfg = IccConfig { iterations: 3, ..fast_cfg() };
        let (a, ta) = run_icc(&train, &val, &s, &cfg).unwrap();
        let (b, tb) = run_icc(&train, &val, &s, &cfg).unwrap();
        assert_eq!(ta.iterations, tb.iterations);
        assert_eq!(ta.selected, tb.selected);
        assert_eq!(a, b);
        assert_eq!(ta.elapsed_secs.len(), 3);
        assert!(ta.elapsed_secs.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn classifier_is_reinitialised() {
        let (train, val) = data(2);
        let s = state(train.dim, 4, 4);
        let cfg = IccConfig { iterations: 1, m_epochs: 0, e_epochs: 0, ..fast_cfg() };
        let (out, _) = run_icc(&train, &val, &s, &cfg).unwrap();
        assert_ne!(out.classifier.fingerprint(), s.classifier.fingerprint());
        assert_eq!(out.encoder.fingerprint(), s.encoder.fingerprint());
    }

    #[test]
    fn zero_iterations_rejected() {
        let cfg = IccConfig { iterations: 0, ..IccConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
