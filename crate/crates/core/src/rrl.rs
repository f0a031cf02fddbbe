//! Stage one: student/teacher training across strong and weak views.
//!
//! `L = L_CE + λ₁ (L_sample + L_channel + ½ L_prob)`, where the consistency
//! terms compare the student on the strong view against the EMA teacher on
//! the weak view. The teacher never receives gradients.

use serde::{Deserialize, Serialize};

use crate::datagen::{epoch_batches, perturb, validate_pair, Dataset, PerturbConfig, SamplingMode};
use crate::diffcore::{
    classifier_forward, ema_update, encoder_forward, sgd_step, Architecture, ModelState, SgdConfig,
    Tape, Tensor, Var, Which,
};
use crate::{eval, seed, Error, Result};

/// Which distribution comes first in the KL term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(student ‖ teacher)`.
    StudentTeacher,
    /// `KL(teacher ‖ student)`.
    TeacherStudent,
}

/// View the student's cross-entropy is computed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CeView {
    Weak,
    Strong,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            feature_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn architecture(&self, input_dim: usize, num_classes: usize) -> Architecture {
        Architecture {
            input_dim,
            hidden: self.hidden.clone(),
            feature_dim: self.feature_dim,
            num_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub lambda1: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_grad_norm: Option<f64>,
    pub ema_momentum: f64,
    pub perturb_strong: PerturbConfig,
    pub perturb_weak: PerturbConfig,
    pub seed: u64,
    pub kl_direction: KlDirection,
    pub ce_view: CeView,
    /// Without a teacher the objective is plain cross-entropy.
    pub use_teacher: bool,
    pub sampling: SamplingMode,
    pub model: ModelConfig,
    /// Keep the epoch with the best validation BACC instead of the last.
    pub select_best_val: bool,
    /// Unit-normalise feature rows before both Gram terms, so relations are
    /// cosines and the terms stay bounded.
    pub gram_normalize: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self::with_seed(0)
    }
}

impl Stage1Config {
    pub fn with_seed(seed_value: u64) -> Self {
        Self {
            lambda1: 10.0,
            epochs: 100,
            batch_size: 128,
            lr: 0.01,
            max_grad_norm: None,
            ema_momentum: 0.99,
            perturb_strong: PerturbConfig::strong(seed::derive(seed_value, &[seed::TAG_PERTURB_STRONG])),
            perturb_weak: PerturbConfig::weak(seed::derive(seed_value, &[seed::TAG_PERTURB_WEAK])),
            seed: seed_value,
            kl_direction: KlDirection::StudentTeacher,
            ce_view: CeView::Weak,
            use_teacher: true,
            sampling: SamplingMode::Uniform,
            model: ModelConfig::default(),
            select_best_val: true,
            gram_normalize: false,
        }
    }

    /// Sets the base seed and re-derives the perturbation streams from it.
    pub fn reseed(&mut self, seed_value: u64) {
        self.seed = seed_value;
        self.perturb_strong.seed = seed::derive(seed_value, &[seed::TAG_PERTURB_STRONG]);
        self.perturb_weak.seed = seed::derive(seed_value, &[seed::TAG_PERTURB_WEAK]);
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0) {
            return Err(Error::Config(format!("lambda1 must be >= 0, got {}", self.lambda1)));
        }
        if self.epochs < 1 {
            return Err(Error::Config("stage 1 needs at least one epoch".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return Err(Error::Config(format!(
                "ema momentum {} outside (0, 1)",
                self.ema_momentum
            )));
        }
        self.sgd().validate()?;
        validate_pair(&self.perturb_strong, &self.perturb_weak)
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.lr,
            max_grad_norm: self.max_grad_norm,
        }
    }
}

/// Scalar loss components of one step (or an epoch mean).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Terms {
    pub ce: f64,
    pub prob: f64,
    pub sample: f64,
    pub channel: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1EpochRecord {
    pub epoch: usize,
    pub terms: Stage1Terms,
    pub val_bacc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Trace {
    pub epochs: Vec<Stage1EpochRecord>,
    /// Epoch whose state was returned.
    pub selected: usize,
}

impl Stage1Trace {
    pub fn totals(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.terms.total).collect()
    }
}

fn batch_of(tape: &Tape, v: Var) -> Result<usize> {
    Ok(tape.value(v).dims2()?.0)
}

/// `(1/B)·KL` between the row softmaxes; the teacher side is detached.
pub fn loss_prob(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: Var,
    direction: KlDirection,
) -> Result<Var> {
    if tape.value(student_logits).shape() != tape.value(teacher_logits).shape() {
        return Err(Error::Validation(format!(
            "loss_prob: student {:?} vs teacher {:?}",
            tape.value(student_logits).shape(),
            tape.value(teacher_logits).shape()
        )));
    }
    let teacher = tape.detach(teacher_logits);
    let p_student = tape.softmax_rows(student_logits)?;
    let p_teacher = tape.softmax_rows(teacher)?;
    match direction {
        KlDirection::StudentTeacher => tape.kl_rows(p_student, p_teacher),
        KlDirection::TeacherStudent => tape.kl_rows(p_teacher, p_student),
    }
}

fn gram_consistency(
    tape: &mut Tape,
    z_s: Var,
    z_w: Var,
    sample_wise: bool,
) -> Result<Var> {
    let (bs, cs) = tape.value(z_s).dims2()?;
    let (bw, cw) = tape.value(z_w).dims2()?;
    if bs != bw || cs != cw {
        return Err(Error::Validation(format!(
            "gram consistency: {bs}x{cs} vs {bw}x{cw}"
        )));
    }
    let z_w = tape.detach(z_w);
    let (gs, gw) = if sample_wise {
        (tape.gram_sample(z_s)?, tape.gram_sample(z_w)?)
    } else {
        (tape.gram_channel(z_s)?, tape.gram_channel(z_w)?)
    };
    let diff = tape.sub(gs, gw)?;
    let sq = tape.square(diff)?;
    let s = tape.sum(sq)?;
    let norm = if sample_wise { bs } else { cs };
    tape.scale(s, 1.0 / norm as f64)
}

/// `(1/B) Σ (z_s z_sᵀ − z_w z_wᵀ)²`, `z_w` detached.
pub fn loss_sample(tape: &mut Tape, z_s: Var, z_w: Var) -> Result<Var> {
    gram_consistency(tape, z_s, z_w, true)
}

/// `(1/C) Σ (z_sᵀ z_s − z_wᵀ z_w)²`, `z_w` detached.
pub fn loss_channel(tape: &mut Tape, z_s: Var, z_w: Var) -> Result<Var> {
    gram_consistency(tape, z_s, z_w, false)
}

/// A minibatch for [`loss_stage1`]. `index` keys the perturbation streams.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Batch<'a> {
    pub features: &'a [f64],
    pub labels: &'a [usize],
    pub index: u64,
}

/// Result of a stage-one forward pass, ready for [`Stage1Forward::backward_into`].
pub struct Stage1Forward {
    pub tape: Tape,
    pub total: Var,
    pub terms: Stage1Terms,
    encoder_vars: Vec<Var>,
    classifier_vars: Vec<Var>,
}

impl Stage1Forward {
    /// Accumulates student gradients into `state`.
    pub fn backward_into(&self, state: &mut ModelState) -> Result<()> {
        let grads = self.tape.backward(self.total)?;
        state.encoder.absorb_grads(&self.encoder_vars, &grads);
        state.classifier.absorb_grads(&self.classifier_vars, &grads);
        Ok(())
    }
}

pub fn loss_stage1(
    batch: &Stage1Batch<'_>,
    state: &ModelState,
    cfg: &Stage1Config,
) -> Result<Stage1Forward> {
    let dim = state.arch.input_dim;
    let rows = batch.labels.len();
    if batch.features.len() != rows * dim {
        return Err(Error::Shape(format!(
            "batch has {} values for {rows} rows of dim {dim}",
            batch.features.len()
        )));
    }
    let x_s = perturb(batch.features, dim, &cfg.perturb_strong, batch.index);
    let x_w = perturb(batch.features, dim, &cfg.perturb_weak, batch.index);

    let mut tape = Tape::new();
    let encoder_vars = state.encoder.bind(&mut tape, true);
    let classifier_vars = state.classifier.bind(&mut tape, true);
    let xs = tape.constant(Tensor::matrix(rows, dim, x_s)?);
    let xw = tape.constant(Tensor::matrix(rows, dim, x_w)?);

    let z_s = encoder_forward(&mut tape, &encoder_vars, xs)?;
    let logits_s = classifier_forward(&mut tape, &classifier_vars, z_s)?;
    let ce = match cfg.ce_view {
        CeView::Strong => tape.cross_entropy(logits_s, batch.labels)?,
        CeView::Weak => {
            let z = encoder_forward(&mut tape, &encoder_vars, xw)?;
            let logits = classifier_forward(&mut tape, &classifier_vars, z)?;
            tape.cross_entropy(logits, batch.labels)?
        }
    };

    let mut terms = Stage1Terms {
        ce: tape.value(ce).item(),
        ..Default::default()
    };
    let total = if cfg.use_teacher {
        let te = state.teacher_encoder.bind(&mut tape, false);
        let tc = state.teacher_classifier.bind(&mut tape, false);
        let z_t = encoder_forward(&mut tape, &te, xw)?;
        let logits_t = classifier_forward(&mut tape, &tc, z_t)?;
        let prob = loss_prob(&mut tape, logits_s, logits_t, cfg.kl_direction)?;
        let (g_s, g_t) = if cfg.gram_normalize {
            (tape.normalize_rows(z_s)?, tape.normalize_rows(z_t)?)
        } else {
            (z_s, z_t)
        };
        let sample = loss_sample(&mut tape, g_s, g_t)?;
        let channel = loss_channel(&mut tape, g_s, g_t)?;
        terms.prob = tape.value(prob).item();
        terms.sample = tape.value(sample).item();
        terms.channel = tape.value(channel).item();
        let half_prob = tape.scale(prob, 0.5)?;
        let relational = tape.add(sample, channel)?;
        let consistency = tape.add(relational, half_prob)?;
        let weighted = tape.scale(consistency, cfg.lambda1)?;
        tape.add(ce, weighted)?
    } else {
        ce
    };
    terms.total = tape.value(total).item();
    debug_assert!(batch_of(&tape, xs)? == rows);
    Ok(Stage1Forward {
        tape,
        total,
        terms,
        encoder_vars,
        classifier_vars,
    })
}

fn abort(epoch: usize, step: u64, terms: &Stage1Terms, err: Error) -> Error {
    match err {
        Error::NonFinite { .. } | Error::NumericAbort { .. } => Error::NumericAbort {
            stage: "stage1".into(),
            snapshot: format!(
                "epoch {epoch} step {step}: last terms ce={} prob={} sample={} channel={} total={}; {err}",
                terms.ce, terms.prob, terms.sample, terms.channel, terms.total
            ),
        },
        other => other,
    }
}

/// Runs the stage-one loop for `cfg.epochs` epochs from a fresh model.
pub fn train_stage1(
    train: &Dataset,
    val: &Dataset,
    cfg: &Stage1Config,
) -> Result<(ModelState, Stage1Trace)> {
    cfg.validate()?;
    let arch = cfg.model.architecture(train.dim, train.num_classes);
    let state = ModelState::new(arch, seed::derive(cfg.seed, &[seed::TAG_INIT]), cfg.ema_momentum)?;
    train_stage1_from(state, train, val, cfg)
}

/// Stage-one loop starting from an existing state.
pub fn train_stage1_from(
    mut state: ModelState,
    train: &Dataset,
    val: &Dataset,
    cfg: &Stage1Config,
) -> Result<(ModelState, Stage1Trace)> {
    cfg.validate()?;
    let sgd = cfg.sgd();
    let mut trace = Stage1Trace::default();
    let mut step: u64 = 0;
    let mut last = Stage1Terms::default();
    let mut best: Option<(f64, ModelState)> = None;
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(
            &train.labels,
            train.num_classes,
            cfg.sampling,
            cfg.batch_size,
            seed::derive(cfg.seed, &[seed::TAG_STAGE1, epoch as u64]),
        )?;
        let mut sum = Stage1Terms::default();
        for idx in &batches {
            let (x, y) = train.gather(idx);
            let batch = Stage1Batch {
                features: &x,
                labels: &y,
                index: step,
            };
            let fwd = loss_stage1(&batch, &state, cfg).map_err(|e| abort(epoch, step, &last, e))?;
            fwd.backward_into(&mut state)
                .map_err(|e| abort(epoch, step, &fwd.terms, e))?;
            sgd_step(&mut state, Which::Both, &sgd)?;
            if cfg.use_teacher {
                ema_update(&mut state);
            }
            last = fwd.terms;
            sum.ce += last.ce;
            sum.prob += last.prob;
            sum.sample += last.sample;
            sum.channel += last.channel;
            sum.total += last.total;
            step += 1;
        }
        state.validate()?;
        let n = batches.len() as f64;
        let terms = Stage1Terms {
            ce: sum.ce / n,
            prob: sum.prob / n,
            sample: sum.sample / n,
            channel: sum.channel / n,
            total: sum.total / n,
        };
        let val_bacc = eval::bacc(&state, val)?;
        log::debug!("stage1 epoch {epoch}: {terms:?} val_bacc={val_bacc:.4}");
        trace.epochs.push(Stage1EpochRecord {
            epoch,
            terms,
            val_bacc,
        });
        if cfg.select_best_val && best.as_ref().is_none_or(|(b, _)| val_bacc > *b) {
            best = Some((val_bacc, state.clone()));
            trace.selected = epoch;
        }
    }
    match best {
        Some((_, s)) => Ok((s, trace)),
        None => {
            trace.selected = cfg.epochs - 1;
            Ok((state, trace))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::PerturbMode;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn prob_identity_and_fixture() {
        let mut t = Tape::new();
        let a = t.param(m(&[&[0.3, -1.0, 2.0]]));
        let b = t.constant(m(&[&[0.3, -1.0, 2.0]]));
        let l = loss_prob(&mut t, a, b, KlDirection::StudentTeacher).unwrap();
        assert!(t.value(l).item().abs() < 1e-15);

        let s = t.param(m(&[&[2.0, 0.0]]));
        let q = t.constant(m(&[&[0.0, 2.0]]));
        let l = loss_prob(&mut t, s, q, KlDirection::StudentTeacher).unwrap();
        // Oracle: KL of two 2-class softmaxes with logit gaps ±2.
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let (p0, p1, q0, q1) = (sig(2.0), sig(-2.0), sig(-2.0), sig(2.0));
        let oracle = p0 * (p0 / q0).ln() + p1 * (p1 / q1).ln();
        assert!((t.value(l).item() - oracle).abs() < 1e-9);
    }

    #[test]
    fn teacher_side_gets_no_gradient() {
        let mut t = Tape::new();
        let s = t.param(m(&[&[1.0, 0.0, -1.0], &[0.5, 0.5, 0.0]]));
        let q = t.param(m(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0]]));
        let l = loss_prob(&mut t, s, q, KlDirection::StudentTeacher).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.get(s).is_some());
        assert!(g.get(q).is_none());

        let zs = t.param(m(&[&[1.0, 2.0], &[0.0, 1.0]]));
        let zw = t.param(m(&[&[0.5, 2.0], &[0.0, 0.0]]));
        let a = loss_sample(&mut t, zs, zw).unwrap();
        let b = loss_channel(&mut t, zs, zw).unwrap();
        let tot = t.add(a, b).unwrap();
        let g = t.backward(tot).unwrap();
        assert!(g.get(zw).is_none());
    }

    #[test]
    fn gram_loss_examples() {
        let mut t = Tape::new();
        let eye = t.constant(Tensor::identity(2));
        let zero = t.constant(Tensor::zeros(&[2, 2]));
        let l = loss_sample(&mut t, eye, eye).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
        let l = loss_sample(&mut t, eye, zero).unwrap();
        assert_eq!(t.value(l).item(), 1.0);

        let a = t.constant(m(&[&[1.0, 0.0]]));
        let b = t.constant(m(&[&[0.0, 0.0]]));
        let l = loss_channel(&mut t, a, b).unwrap();
        assert_eq!(t.value(l).item(), 0.5);
        let l = loss_channel(&mut t, a, a).unwrap();
        assert_eq!(t.value(l).item(), 0.0);

        let three = t.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(loss_sample(&mut t, eye, three), Err(Error::Validation(_))));
    }

    #[test]
    fn sample_loss_row_permutation_invariant() {
        let zs = m(&[&[1.0, 2.0, 0.5], &[0.0, -1.0, 3.0], &[2.0, 2.0, 2.0]]);
        let zw = m(&[&[0.9, 2.1, 0.4], &[0.3, -1.0, 2.0], &[1.0, 2.5, 2.0]]);
        let perm = [2, 0, 1];
        let mut t = Tape::new();
        let (a, b) = (t.constant(zs), t.constant(zw));
        let base = loss_sample(&mut t, a, b).unwrap();
        let pa = t.gather_rows(a, &perm).unwrap();
        let pb = t.gather_rows(b, &perm).unwrap();
        let permuted = loss_sample(&mut t, pa, pb).unwrap();
        assert!((t.value(base).item() - t.value(permuted).item()).abs() < 1e-12);
    }

    fn toy_cfg(lambda1: f64) -> Stage1Config {
        let mut cfg = Stage1Config::with_seed(4);
        cfg.lambda1 = lambda1;
        cfg.epochs = 1;
        cfg.model = ModelConfig {
            hidden: vec![6],
            feature_dim: 4,
        };
        cfg
    }

    fn toy_batch() -> (Vec<f64>, Vec<usize>) {
        (
            vec![0.5, -1.0, 1.0, 2.0, -0.3, 0.1, 1.5, 1.5, -2.0, 0.0, 0.7, -0.7],
            vec![0, 1, 2, 1],
        )
    }

    fn toy_state(cfg: &Stage1Config) -> ModelState {
        ModelState::new(cfg.model.architecture(3, 3), 1, cfg.ema_momentum).unwrap()
    }

    #[test]
    fn zero_lambda_is_pure_ce() {
        let cfg = toy_cfg(0.0);
        let (x, y) = toy_batch();
        let batch = Stage1Batch { features: &x, labels: &y, index: 0 };
        let f = loss_stage1(&batch, &toy_state(&cfg), &cfg).unwrap();
        assert_eq!(f.terms.total, f.terms.ce);
    }

    #[test]
    fn identical_views_and_models_have_zero_consistency() {
        let mut cfg = toy_cfg(10.0);
        cfg.perturb_strong = PerturbConfig::identity(PerturbMode::Strong, 1);
        cfg.perturb_weak = PerturbConfig::identity(PerturbMode::Weak, 2);
        let (x, y) = toy_batch();
        let batch = Stage1Batch { features: &x, labels: &y, index: 0 };
        let f = loss_stage1(&batch, &toy_state(&cfg), &cfg).unwrap();
        assert_eq!(f.terms.prob, 0.0);
        assert_eq!(f.terms.sample, 0.0);
        assert_eq!(f.terms.channel, 0.0);
        assert_eq!(f.terms.total, f.terms.ce);
    }

    #[test]
    fn total_recombines_from_terms() {
        let cfg = toy_cfg(10.0);
        let (x, y) = toy_batch();
        let batch = Stage1Batch { features: &x, labels: &y, index: 3 };
        let mut state = toy_state(&cfg);
        // Push the teacher away from the student so every term is non-zero.
        state.teacher_encoder.params[0].value.data_mut()[0] += 0.5;
        let f = loss_stage1(&batch, &state, &cfg).unwrap();
        let t = f.terms;
        assert!(t.prob > 0.0 && t.sample > 0.0 && t.channel > 0.0);
        let recombined = t.ce + 10.0 * (t.sample + t.channel + 0.5 * t.prob);
        assert!((t.total - recombined).abs() <= 1e-12 * t.total.abs().max(1.0));
    }

    #[test]
    fn backward_leaves_teacher_untouched() {
        let cfg = toy_cfg(10.0);
        let (x, y) = toy_batch();
        let batch = Stage1Batch { features: &x, labels: &y, index: 1 };
        let mut state = toy_state(&cfg);
        let f = loss_stage1(&batch, &state, &cfg).unwrap();
        f.backward_into(&mut state).unwrap();
        assert!(state.encoder.has_grads() && state.classifier.has_grads());
        assert!(!state.teacher_encoder.has_grads());
        assert!(!state.teacher_classifier.has_grads());
    }
}
