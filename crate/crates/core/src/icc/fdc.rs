use serde::{Deserialize, Serialize};

use super::ClassMoments;
use crate::diffcore::{classifier_forward, encoder_forward, ModelState, Tape, Tensor, Var};
use crate::linalg::cholesky_inverse;
use crate::{Error, Result};

/// Matrix inside the attraction/repulsion quadratic forms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MahalanobisMode {
    /// `(Σ_k + ridge·I)⁻¹`: a true Mahalanobis distance.
    Inverse,
    /// `Σ_k` as it appears inside the printed quadratic form.
    AsPrinted,
}

impl std::str::FromStr for MahalanobisMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inverse" => Ok(Self::Inverse),
            "as_printed" | "as-printed" => Ok(Self::AsPrinted),
            _ => Err(Error::Config(format!("unknown mahalanobis mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for MahalanobisMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Inverse => "inverse",
            Self::AsPrinted => "as_printed",
        })
    }
}

/// Class means and metric matrices, ready to be placed on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct MahalanobisMetric {
    pub mu: Vec<Tensor>,
    pub m: Vec<Tensor>,
}

impl MahalanobisMetric {
    pub fn new(moments: &ClassMoments, mode: MahalanobisMode) -> Result<Self> {
        let c = moments.dim;
        let mut mu = Vec::with_capacity(moments.num_classes);
        let mut m = Vec::with_capacity(moments.num_classes);
        for k in 0..moments.num_classes {
            mu.push(Tensor::vector(moments.mu_k(k).to_vec()));
            let mat = match mode {
                MahalanobisMode::AsPrinted => moments.sigma_k(k).to_vec(),
                MahalanobisMode::Inverse => cholesky_inverse(moments.chol_k(k), c)?,
            };
            m.push(Tensor::matrix(c, c, mat)?.ensure_finite("mahalanobis_metric")?);
        }
        Ok(Self { mu, m })
    }

    pub fn num_classes(&self) -> usize {
        self.mu.len()
    }
}

fn class_quad_sum(
    tape: &mut Tape,
    z: Var,
    rows: &[usize],
    metric: &MahalanobisMetric,
    k: usize,
) -> Result<Option<Var>> {
    if rows.is_empty() {
        return Ok(None);
    }
    let zk = tape.gather_rows(z, rows)?;
    let mu = tape.constant(metric.mu[k].clone());
    let m = tape.constant(metric.m[k].clone());
    let q = tape.quadratic_form(zk, mu, m)?;
    Ok(Some(tape.sum(q)?))
}

fn sum_all(tape: &mut Tape, parts: Vec<Var>) -> Result<Var> {
    let mut it = parts.into_iter();
    let mut acc = match it.next() {
        Some(v) => v,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    for v in it {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

fn check(tape: &Tape, z: Var, labels: &[usize], metric: &MahalanobisMetric) -> Result<usize> {
    let (b, _) = tape.value(z).dims2()?;
    if b != labels.len() || b == 0 {
        return Err(Error::Validation(format!(
            "{b} feature rows for {} labels",
            labels.len()
        )));
    }
    let k = metric.num_classes();
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Validation(format!("label {l} outside [0, {k})")));
    }
    Ok(b)
}

/// `(1/B) Σ_i (z_i − μ_{y_i}) M_{y_i} (z_i − μ_{y_i})ᵀ`.
pub fn attraction_psi(
    tape: &mut Tape,
    z: Var,
    labels: &[usize],
    metric: &MahalanobisMetric,
) -> Result<Var> {
    let b = check(tape, z, labels, metric)?;
    let mut parts = Vec::new();
    for k in 0..metric.num_classes() {
        let rows: Vec<usize> = (0..b).filter(|&i| labels[i] == k).collect();
        parts.extend(class_quad_sum(tape, z, &rows, metric, k)?);
    }
    let s = sum_all(tape, parts)?;
    tape.scale(s, 1.0 / b as f64)
}

/// `(1/B) Σ_i (1/(K−1)) Σ_{k≠y_i} (z_i − μ_k) M_k (z_i − μ_k)ᵀ`.
pub fn repulsion_phi(
    tape: &mut Tape,
    z: Var,
    labels: &[usize],
    metric: &MahalanobisMetric,
) -> Result<Var> {
    let b = check(tape, z, labels, metric)?;
    let k_total = metric.num_classes();
    if k_total < 2 {
        return Err(Error::Validation("repulsion needs at least two classes".into()));
    }
    let mut parts = Vec::new();
    for k in 0..k_total {
        let rows: Vec<usize> = (0..b).filter(|&i| labels[i] != k).collect();
        parts.extend(class_quad_sum(tape, z, &rows, metric, k)?);
    }
    let s = sum_all(tape, parts)?;
    tape.scale(s, 1.0 / (b * (k_total - 1)) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FdcTerms {
    pub psi: f64,
    pub phi: f64,
    pub ce: f64,
    pub total: f64,
}

/// Forward pass of `λ_e(Ψ − Φ) + CE` with the classifier frozen.
pub struct FdcForward {
    pub tape: Tape,
    pub total: Var,
    pub terms: FdcTerms,
    encoder_vars: Vec<Var>,
}

impl FdcForward {
    /// Accumulates encoder gradients into `state`.
    pub fn backward_into(&self, state: &mut ModelState) -> Result<()> {
        let grads = self.tape.backward(self.total)?;
        state.encoder.absorb_grads(&self.encoder_vars, &grads);
        Ok(())
    }

    pub fn encoder_vars(&self) -> &[Var] {
        &self.encoder_vars
    }
}

pub fn fdc_loss(
    x: &[f64],
    labels: &[usize],
    state: &ModelState,
    metric: &MahalanobisMetric,
    lambda_e: f64,
) -> Result<FdcForward> {
    let (rows, dim) = (labels.len(), state.arch.input_dim);
    let mut tape = Tape::new();
    let encoder_vars = state.encoder.bind(&mut tape, true);
    let classifier_vars = state.classifier.bind(&mut tape, false);
    let xv = tape.constant(Tensor::matrix(rows, dim, x.to_vec())?);
    let z = encoder_forward(&mut tape, &encoder_vars, xv)?;
    let logits = classifier_forward(&mut tape, &classifier_vars, z)?;
    let ce = tape.cross_entropy(logits, labels)?;
    let mut terms = FdcTerms {
        ce: tape.value(ce).item(),
        ..Default::default()
    };
    let total = if lambda_e == 0.0 {
        ce
    } else {
        let psi = attraction_psi(&mut tape, z, labels, metric)?;
        let phi = repulsion_phi(&mut tape, z, labels, metric)?;
        terms.psi = tape.value(psi).item();
        terms.phi = tape.value(phi).item();
        let diff = tape.sub(psi, phi)?;
        let reg = tape.scale(diff, lambda_e)?;
        tape.add(reg, ce)?
    };
    terms.total = tape.value(total).item();
    Ok(FdcForward {
        tape,
        total,
        terms,
        encoder_vars,
    })
}
