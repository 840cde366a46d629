//! SGD with momentum, Adam (coupled L2) and AdamW (decoupled decay) on flat
//! parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f32,
    /// SGD momentum, or β1 for the Adam family.
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Hyper {
    pub fn sgd() -> Self {
        Hyper { lr: 0.01, beta1: 0.937, beta2: 0.0, eps: 0.0, weight_decay: 0.0 }
    }

    pub fn adam() -> Self {
        Hyper { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }

    pub fn with_lr(self, lr: f32) -> Self {
        Hyper { lr, ..self }
    }

    pub fn with_weight_decay(self, weight_decay: f32) -> Self {
        Hyper { weight_decay, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr {} must be positive", self.lr)));
        }
        for (name, b) in [("beta1/momentum", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} {b} outside [0, 1)")));
            }
        }
        if self.eps < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::invalid("eps and weight decay must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub params: Vec<f32>,
    /// Momentum buffer (SGD) or first moment (Adam family).
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
    pub hyper: Hyper,
}

impl OptimState {
    pub fn new(params: Vec<f32>, hyper: Hyper) -> Result<Self> {
        hyper.validate()?;
        let n = params.len();
        Ok(OptimState { params, m: vec![0.0; n], v: vec![0.0; n], t: 0, hyper })
    }

    fn check(&self, grad: &[f32]) -> Result<()> {
        if grad.len() != self.params.len() {
            return Err(Error::shape(format!(
                "gradient has {} entries, parameters {}",
                grad.len(),
                self.params.len()
            )));
        }
        Ok(())
    }

    /// buf = μ·buf + (g + λθ); θ -= lr·buf.
    pub fn sgd_step(&mut self, grad: &[f32]) -> Result<()> {
        self.check(grad)?;
        let h = self.hyper;
        for ((p, b), &g) in self.params.iter_mut().zip(&mut self.m).zip(grad) {
            *b = h.beta1 * *b + (g + h.weight_decay * *p);
            *p -= h.lr * *b;
        }
        self.t += 1;
        Ok(())
    }

    /// Adam with λ folded into the gradient.
    pub fn adam_step(&mut self, grad: &[f32]) -> Result<()> {
        self.check(grad)?;
        self.adaptive_step(grad, true)
    }

    /// Adam moments with decay applied directly to the parameters.
    pub fn adamw_step(&mut self, grad: &[f32]) -> Result<()> {
        self.check(grad)?;
        let decay = 1.0 - self.hyper.lr * self.hyper.weight_decay;
        for p in &mut self.params {
            *p *= decay;
        }
        self.adaptive_step(grad, false)
    }

    fn adaptive_step(&mut self, grad: &[f32], coupled: bool) -> Result<()> {
        let h = self.hyper;
        self.t += 1;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        for (((p, m), v), &g) in self.params.iter_mut().zip(&mut self.m).zip(&mut self.v).zip(grad) {
            let g = if coupled { g + h.weight_decay * *p } else { g };
            *m = h.beta1 * *m + (1.0 - h.beta1) * g;
            *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Sgd,
    Adam,
    AdamW,
}

impl OptimState {
    pub fn step(&mut self, kind: OptimKind, grad: &[f32]) -> Result<()> {
        match kind {
            OptimKind::Sgd => self.sgd_step(grad),
            OptimKind::Adam => self.adam_step(grad),
            OptimKind::AdamW => self.adamw_step(grad),
        }
    }
}

/// Diagonal quadratic ½ Σ aᵢθᵢ² used by the optimizer comparison demo.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadratic {
    pub diag: Vec<f32>,
}

impl Quadratic {
    pub fn loss(&self, theta: &[f32]) -> f32 {
        0.5 * self.diag.iter().zip(theta).map(|(a, t)| a * t * t).sum::<f32>()
    }

    pub fn grad(&self, theta: &[f32]) -> Vec<f32> {
        self.diag.iter().zip(theta).map(|(a, t)| a * t).collect()
    }
}

/// Loss per step for SGD, Adam and AdamW started from the same point.
/// Row k holds the losses after k steps.
pub fn compare_optimizers(
    objective: &Quadratic,
    theta0: &[f32],
    steps: usize,
    hypers: [(OptimKind, Hyper); 3],
) -> Result<Vec<[f32; 3]>> {
    let mut states = hypers
        .iter()
        .map(|&(_, h)| OptimState::new(theta0.to_vec(), h))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(steps + 1);
    let losses = |s: &[OptimState]| [0, 1, 2].map(|i| objective.loss(&s[i].params));
    rows.push(losses(&states));
    for _ in 0..steps {
        for (s, &(kind, _)) in states.iter_mut().zip(&hypers) {
            let g = objective.grad(&s.params);
            s.step(kind, &g)?;
        }
        rows.push(losses(&states));
    }
    Ok(rows)
}
