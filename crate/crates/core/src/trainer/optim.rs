use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use super::Result;
use crate::config::OptimizerKind;

/// Adam or SGD with the L2 penalty folded into the gradient
/// (`g + weight_decay * p`), as the classic torch optimizers do.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    momentum: f64,
    betas: (f64, f64),
    eps: f64,
    steps: i32,
    slots: Vec<Slot>,
}

struct Slot {
    var: Var,
    /// Adam first moment or SGD momentum buffer.
    m: Option<Tensor>,
    /// Adam second moment.
    v: Option<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, vars: Vec<Var>, lr: f64, weight_decay: f64, momentum: f64) -> Self {
        Self {
            kind,
            lr,
            weight_decay,
            momentum,
            betas: (0.9, 0.999),
            eps: 1e-8,
            steps: 0,
            slots: vars.into_iter().map(|var| Slot { var, m: None, v: None }).collect(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one update. Variables without a gradient are left alone.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.steps += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.steps);
        let bc2 = 1.0 - b2.powi(self.steps);
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            let p = slot.var.as_tensor().detach();
            let mut g = g.detach();
            if self.weight_decay != 0.0 {
                g = (g + (&p * self.weight_decay)?)?;
            }
            let update = match self.kind {
                OptimizerKind::Adam => {
                    let m = match &slot.m {
                        Some(m) => ((m * b1)? + (&g * (1.0 - b1))?)?,
                        None => (&g * (1.0 - b1))?,
                    };
                    let v = match &slot.v {
                        Some(v) => ((v * b2)? + (g.sqr()? * (1.0 - b2))?)?,
                        None => (g.sqr()? * (1.0 - b2))?,
                    };
                    let denom = ((v.sqrt()? / bc2.sqrt())? + self.eps)?;
                    let u = ((&m / denom)? * (self.lr / bc1))?;
                    slot.m = Some(m);
                    slot.v = Some(v);
                    u
                }
                OptimizerKind::Sgd => {
                    let d = if self.momentum != 0.0 {
                        let buf = match &slot.m {
                            Some(b) => ((b * self.momentum)? + &g)?,
                            None => g,
                        };
                        slot.m = Some(buf.clone());
                        buf
                    } else {
                        g
                    };
                    (d * self.lr)?
                }
            };
            slot.var.set(&(p - update)?)?;
        }
        Ok(())
    }
}
