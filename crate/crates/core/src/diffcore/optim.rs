use super::model::{ModelState, ParamSet, Which};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    /// Global L2 norm cap over the selected parameters' gradients.
    pub max_grad_norm: Option<f64>,
}

impl SgdConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            max_grad_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0) {
                return Err(Error::Config(format!("max_grad_norm must be positive, got {n}")));
            }
        }
        Ok(())
    }
}

/// Plain SGD on the selected student parameters; gradients are cleared.
pub fn sgd_step(state: &mut ModelState, which: Which, cfg: &SgdConfig) -> Result<()> {
    cfg.validate()?;
    let mut sets = state.selected_mut(which);
    for set in sets.iter() {
        if let Some(p) = set.params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::State(format!("no gradient for `{}`", p.name)));
        }
    }
    let scale = match cfg.max_grad_norm {
        Some(cap) => {
            let norm = sets
                .iter()
                .flat_map(|s| s.params.iter())
                .flat_map(|p| p.grad.as_ref().unwrap().data().iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > cap {
                cap / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let lr = cfg.learning_rate * scale;
    for set in sets.iter_mut() {
        for p in set.params.iter_mut() {
            let g = p.grad.take().unwrap();
            p.value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(v, gv)| *v -= lr * gv);
        }
    }
    Ok(())
}

fn blend(teacher: &mut ParamSet, student: &ParamSet, m: f64) {
    for (t, s) in teacher.params.iter_mut().zip(&student.params) {
        t.value
            .data_mut()
            .iter_mut()
            .zip(s.value.data())
            .for_each(|(tv, sv)| *tv = m * *tv + (1.0 - m) * sv);
    }
}

/// `teacher ← m·teacher + (1−m)·student` for encoder and classifier.
pub fn ema_update(state: &mut ModelState) {
    let m = state.ema_momentum;
    blend(&mut state.teacher_encoder, &state.encoder, m);
    blend(&mut state.teacher_classifier, &state.classifier, m);
}
