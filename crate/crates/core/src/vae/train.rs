use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{kl_weight, VaeModel};
use crate::autodiff::{Adam, Graph};
use crate::corpus::EncodedLine;
use crate::error::{Error, Result};
use crate::nn::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    pub step: usize,
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub kl_weight: f64,
    /// Reconstruction nats per predicted token.
    pub per_token_nll: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepOutput>,
}

impl TrainHistory {
    /// Mean of `f` over the first `n` recorded steps.
    pub fn head_mean(&self, n: usize, f: impl Fn(&StepOutput) -> f64) -> f64 {
        mean(self.steps.iter().take(n).map(f))
    }

    /// Mean of `f` over the last `n` recorded steps.
    pub fn tail_mean(&self, n: usize, f: impl Fn(&StepOutput) -> f64) -> f64 {
        let skip = self.steps.len().saturating_sub(n);
        mean(self.steps.iter().skip(skip).map(f))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// One optimizer update on `batch` at schedule position `step`.
pub fn training_step<R: Rng + ?Sized>(
    model: &mut VaeModel,
    adam: &mut Adam,
    batch: &[&EncodedLine],
    step: usize,
    rng: &mut R,
) -> Result<StepOutput> {
    let w = kl_weight(step, &model.config.anneal);
    let (out, mut grads) = {
        let mut g = Graph::new(&model.store);
        let loss = model.loss(&mut g, batch, w, rng)?;
        let recon = g.scalar(loss.recon);
        let out = StepOutput {
            step,
            total: g.scalar(loss.total),
            recon,
            kl: g.scalar(loss.kl),
            kl_weight: w,
            per_token_nll: recon * batch.len() as f64 / loss.tokens as f64,
        };
        (out, g.backward(loss.total)?)
    };
    if model.config.grad_clip > 0.0 {
        grads.clip_global_norm(model.config.grad_clip);
    }
    adam.step(&mut model.store, &grads)?;
    Ok(out)
}

/// Runs `model.config.steps` updates over shuffled passes of `lines`.
pub fn train_vae(model: &mut VaeModel, lines: &[EncodedLine], seed: u64) -> Result<TrainHistory> {
    if lines.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    for line in lines {
        model.check_artist(line.artist)?;
    }
    let mut rng = seeded(seed);
    let mut adam = Adam::new(&model.store, model.config.learning_rate);
    let batch_size = model.config.batch_size.min(lines.len());
    let mut order: Vec<usize> = (0..lines.len()).collect();
    let mut cursor = order.len();
    let mut history = TrainHistory::default();
    for step in 0..model.config.steps {
        if cursor + batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<&EncodedLine> = order[cursor..cursor + batch_size].iter().map(|&i| &lines[i]).collect();
        cursor += batch_size;
        history.steps.push(training_step(model, &mut adam, &batch, step, &mut rng)?);
    }
    Ok(history)
}
