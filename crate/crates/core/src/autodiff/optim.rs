use crate::autodiff::graph::Gradients;
use crate::autodiff::tensor::ParamStore;
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update over every trainable parameter that has a gradient.
    /// Frozen tensors and tensors absent from `grads` are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: vec![self.first.len()],
                rhs: vec![store.len()],
            });
        }
        for id in store.ids() {
            if let Some(g) = grads.get(id) {
                if g.len() != store.get(id).len() || self.first[id.index()].len() != g.len() {
                    return Err(Error::Shape {
                        op: "adam_step",
                        lhs: store.get(id).shape().to_vec(),
                        rhs: vec![g.len()],
                    });
                }
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in store.ids() {
            let Some(g) = grads.get(id) else { continue };
            let param = store.get_mut(id);
            if !param.requires_grad {
                continue;
            }
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            for (((p, &gi), mi), vi) in param.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
