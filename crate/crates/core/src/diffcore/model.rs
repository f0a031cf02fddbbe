use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{softmax_raw, Gradients, Tape, Var};
use super::tensor::{matmul_raw, Tensor};
use crate::{seed, Error, Result};

/// Layer sizes of the MLP encoder and the linear classifier head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!("zero-width layer in {self:?}")));
        }
        if self.num_classes < 1 {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        Ok(())
    }

    fn encoder_layers(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(self.feature_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Ordered named parameters. Order is part of the checkpoint format.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    pub params: Vec<Param>,
}

impl ParamSet {
    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Pushes every tensor onto `tape`, trainable or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Accumulates gradients for previously bound vars.
    pub fn absorb_grads(&mut self, vars: &[Var], grads: &Gradients) {
        for (p, v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = grads.get(*v) {
                match &mut p.grad {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
    }

    pub fn has_grads(&self) -> bool {
        self.params.iter().any(|p| p.grad.is_some())
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// CRC32 over the little-endian bytes of every value, for freeze checks.
    pub fn fingerprint(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(&v.to_le_bytes());
            }
        }
        h.finalize()
    }

    /// True when both sets have the same names and shapes in the same order.
    pub fn congruent(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }
}

fn he_init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("init shape")
}

fn linear_params(rng: &mut impl Rng, prefix: &str, fan_in: usize, fan_out: usize) -> [Param; 2] {
    [
        Param {
            name: format!("{prefix}.weight"),
            value: he_init(rng, fan_in, fan_out),
            grad: None,
        },
        Param {
            name: format!("{prefix}.bias"),
            value: Tensor::zeros(&[fan_out]),
            grad: None,
        },
    ]
}

pub fn init_encoder(arch: &Architecture, seed_value: u64) -> ParamSet {
    let mut rng = seed::rng(seed_value, &[seed::TAG_INIT, 0]);
    let params = arch
        .encoder_layers()
        .into_iter()
        .enumerate()
        .flat_map(|(i, (a, b))| linear_params(&mut rng, &format!("encoder.{i}"), a, b))
        .collect();
    ParamSet { params }
}

pub fn init_classifier(arch: &Architecture, seed_value: u64) -> ParamSet {
    let mut rng = seed::rng(seed_value, &[seed::TAG_INIT, 1]);
    ParamSet {
        params: linear_params(&mut rng, "classifier", arch.feature_dim, arch.num_classes).to_vec(),
    }
}

/// Which student parameter sets an update touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Encoder,
    Classifier,
    Both,
}

/// Student encoder/classifier with an EMA teacher mirror.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub arch: Architecture,
    pub encoder: ParamSet,
    pub classifier: ParamSet,
    pub teacher_encoder: ParamSet,
    pub teacher_classifier: ParamSet,
    pub ema_momentum: f64,
}

impl ModelState {
    /// Random student; teacher is an exact copy.
    pub fn new(arch: Architecture, seed_value: u64, ema_momentum: f64) -> Result<Self> {
        arch.validate()?;
        if !(ema_momentum > 0.0 && ema_momentum < 1.0) {
            return Err(Error::Config(format!(
                "ema momentum {ema_momentum} outside (0, 1)"
            )));
        }
        let encoder = init_encoder(&arch, seed_value);
        let classifier = init_classifier(&arch, seed_value);
        Ok(Self {
            teacher_encoder: encoder.clone(),
            teacher_classifier: classifier.clone(),
            encoder,
            classifier,
            arch,
            ema_momentum,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.encoder.congruent(&self.teacher_encoder)
            || !self.classifier.congruent(&self.teacher_classifier)
        {
            return Err(Error::State("teacher and student are not congruent".into()));
        }
        if self.teacher_encoder.has_grads() || self.teacher_classifier.has_grads() {
            return Err(Error::State("teacher parameters carry gradients".into()));
        }
        Ok(())
    }

    pub fn selected_mut(&mut self, which: Which) -> Vec<&mut ParamSet> {
        match which {
            Which::Encoder => vec![&mut self.encoder],
            Which::Classifier => vec![&mut self.classifier],
            Which::Both => vec![&mut self.encoder, &mut self.classifier],
        }
    }

    /// Clean-input class probabilities from the student, no tape.
    pub fn predict_proba(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        let z = self.features(x, rows)?;
        let logits = linear_raw(&self.classifier, 0, &z, rows)?;
        Ok(softmax_raw(&logits, self.arch.num_classes))
    }

    /// Student encoder output for `rows` inputs, no tape.
    pub fn features(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        if x.len() != rows * self.arch.input_dim {
            return Err(Error::Shape(format!(
                "expected {rows}x{} inputs, got {} values",
                self.arch.input_dim,
                x.len()
            )));
        }
        let n_layers = self.arch.hidden.len() + 1;
        let mut h = x.to_vec();
        for layer in 0..n_layers {
            h = linear_raw(&self.encoder, layer, &h, rows)?;
            if layer + 1 < n_layers {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(h)
    }

    pub fn logits_from_features(&self, z: &[f64], rows: usize) -> Result<Vec<f64>> {
        linear_raw(&self.classifier, 0, z, rows)
    }
}

fn linear_raw(set: &ParamSet, layer: usize, x: &[f64], rows: usize) -> Result<Vec<f64>> {
    let w = &set.params[2 * layer].value;
    let b = &set.params[2 * layer + 1].value;
    let (fan_in, fan_out) = w.dims2()?;
    if x.len() != rows * fan_in {
        return Err(Error::Shape(format!(
            "layer expects {fan_in} inputs per row, got {} values for {rows} rows",
            x.len()
        )));
    }
    let mut out = matmul_raw(x, w.data(), rows, fan_in, fan_out);
    for row in out.chunks_mut(fan_out) {
        row.iter_mut().zip(b.data()).for_each(|(o, bv)| *o += bv);
    }
    Ok(out)
}

/// Encoder forward on the tape: `Linear → ReLU → … → Linear`.
pub fn encoder_forward(tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
    let n_layers = vars.len() / 2;
    let mut h = x;
    for layer in 0..n_layers {
        h = tape.matmul(h, vars[2 * layer])?;
        h = tape.add_bias(h, vars[2 * layer + 1])?;
        if layer + 1 < n_layers {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

pub fn classifier_forward(tape: &mut Tape, vars: &[Var], z: Var) -> Result<Var> {
    let h = tape.matmul(z, vars[0])?;
    tape.add_bias(h, vars[1])
}
