//! Artist-conditioned sentence VAE.
//!
//! A bidirectional LSTM reads the line; its final forward and backward states
//! map to the mean and log-variance of a diagonal Gaussian posterior. A sample
//! `z` initialises the decoder LSTM state, and the artist's embedding row is
//! concatenated to the word embedding at every decoder step. Training minimises
//! the reconstruction cross-entropy plus a linearly annealed KL term, with word
//! dropout on the decoder inputs.

mod generate;
mod model;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, UNK};
use crate::error::{Error, Result};

pub use generate::{generate, generate_from_latents, sample_prior};
pub use model::{VaeModel, VaeLoss};
pub use train::{train_vae, training_step, StepOutput, TrainHistory};

/// How the artist embedding matrix is initialised and whether it trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConditioningMode {
    OneHot,
    RandomTrainable,
    RandomFrozen,
    AudioTrainable,
    AudioFrozen,
}

impl ConditioningMode {
    pub const ALL: [ConditioningMode; 5] = [
        ConditioningMode::OneHot,
        ConditioningMode::RandomTrainable,
        ConditioningMode::RandomFrozen,
        ConditioningMode::AudioTrainable,
        ConditioningMode::AudioFrozen,
    ];

    /// Short name used on the command line and in file names.
    pub fn as_str(self) -> &'static str {
        match self {
            ConditioningMode::OneHot => "onehot",
            ConditioningMode::RandomTrainable => "randT",
            ConditioningMode::RandomFrozen => "randNT",
            ConditioningMode::AudioTrainable => "audioT",
            ConditioningMode::AudioFrozen => "audioNT",
        }
    }

    pub fn is_trainable(self) -> bool {
        matches!(self, ConditioningMode::RandomTrainable | ConditioningMode::AudioTrainable)
    }

    pub fn needs_audio(self) -> bool {
        matches!(self, ConditioningMode::AudioTrainable | ConditioningMode::AudioFrozen)
    }
}

impl fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownMode(s.to_string()))
    }
}

impl Serialize for ConditioningMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for ConditioningMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnealShape {
    Linear,
}

/// KL weight ramp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub total_steps: usize,
    pub shape: AnnealShape,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule {
            total_steps: 3000,
            shape: AnnealShape::Linear,
        }
    }
}

/// Weight on the KL term at `step`: `min(step / total_steps, 1)`.
pub fn kl_weight(step: usize, schedule: &AnnealSchedule) -> f64 {
    match schedule.shape {
        AnnealShape::Linear => (step as f64 / schedule.total_steps.max(1) as f64).min(1.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub word_emb_dim: usize,
    /// Hidden units per encoder direction.
    pub encoder_hidden: usize,
    pub latent_dim: usize,
    pub decoder_hidden: usize,
    /// Ignored in one-hot mode, where the width is the artist count.
    pub artist_emb_dim: usize,
    pub word_dropout: f64,
    pub anneal: AnnealSchedule,
    pub max_decode_len: usize,
    pub mode: ConditioningMode,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            word_emb_dim: 300,
            encoder_hidden: 100,
            latent_dim: 64,
            decoder_hidden: 256,
            artist_emb_dim: 50,
            word_dropout: 0.5,
            anneal: AnnealSchedule::default(),
            max_decode_len: 20,
            mode: ConditioningMode::AudioFrozen,
            learning_rate: 1e-3,
            batch_size: 32,
            steps: 5000,
            grad_clip: 5.0,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.word_emb_dim,
            self.encoder_hidden,
            self.latent_dim,
            self.decoder_hidden,
            self.artist_emb_dim,
            self.max_decode_len,
            self.batch_size,
            self.anneal.total_steps,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig("VAE dimensions, batch size and anneal steps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.word_dropout) {
            return Err(Error::InvalidConfig(format!("word_dropout {} outside [0, 1]", self.word_dropout)));
        }
        Ok(())
    }

    /// Width of the artist vector appended at each decoder step.
    pub fn artist_width(&self, artists: usize) -> usize {
        if self.mode == ConditioningMode::OneHot {
            artists
        } else {
            self.artist_emb_dim
        }
    }
}

/// `½ Σ (μ² + exp(logσ²) − 1 − logσ²)`, the KL from `N(μ, σ²)` to `N(0, I)` in nats.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// `z = μ + exp(½·logσ²) ⊙ ε`.
pub fn reparameterize(mu: &[f64], logvar: &[f64], eps: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(logvar)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect()
}

pub fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect()
}

/// Replace each non-BOS token by UNK with probability `p`.
pub fn word_dropout<R: Rng + ?Sized>(ids: &[usize], p: f64, rng: &mut R) -> Vec<usize> {
    ids.iter()
        .map(|&id| {
            if id == BOS || p <= 0.0 {
                id
            } else if p >= 1.0 || rng.random::<f64>() < p {
                UNK
            } else {
                id
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded;

    #[test]
    fn anneal_endpoints_and_midpoint() {
        let s = AnnealSchedule::default();
        assert_eq!(kl_weight(0, &s), 0.0);
        assert_eq!(kl_weight(1500, &s), 0.5);
        assert_eq!(kl_weight(3000, &s), 1.0);
        assert_eq!(kl_weight(100_000, &s), 1.0);
        let mut prev = 0.0;
        for step in 0..=4000 {
            let w = kl_weight(step, &s);
            assert!((0.0..=1.0).contains(&w) && w >= prev);
            prev = w;
        }
    }

    #[test]
    fn kl_closed_form_values() {
        assert_eq!(kl_divergence(&[0.0; 4], &[0.0; 4]), 0.0);
        assert_eq!(kl_divergence(&[1.0; 4], &[0.0; 4]), 2.0);
        let mut rng = seeded(4);
        for _ in 0..1000 {
            let mu = standard_normal(6, &mut rng);
            let lv: Vec<f64> = standard_normal(6, &mut rng).iter().map(|v| 2.0 * v).collect();
            assert!(kl_divergence(&mu, &lv) >= 0.0);
        }
    }

    #[test]
    fn reparameterize_examples() {
        let mu = [0.5, -1.0];
        assert_eq!(reparameterize(&mu, &[0.3, -2.0], &[0.0, 0.0]), mu);
        assert_eq!(reparameterize(&mu, &[0.0, 0.0], &[1.5, 2.0]), [2.0, 1.0]);
    }

    #[test]
    fn reparameterized_samples_have_target_moments() {
        let mut rng = seeded(10);
        let n = 100_000;
        let eps = standard_normal(n, &mut rng);
        let z = reparameterize(&vec![1.0; n], &vec![0.0; n], &eps);
        let mean = z.iter().sum::<f64>() / n as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn word_dropout_rates() {
        let mut rng = seeded(1);
        let ids: Vec<usize> = std::iter::once(BOS).chain(4..24).collect();
        assert_eq!(word_dropout(&ids, 0.0, &mut rng), ids);
        let all = word_dropout(&ids, 1.0, &mut rng);
        assert_eq!(all[0], BOS);
        assert!(all[1..].iter().all(|&t| t == UNK));

        let long: Vec<usize> = vec![7; 10_000];
        let dropped = word_dropout(&long, 0.5, &mut rng).iter().filter(|&&t| t == UNK).count();
        let frac = dropped as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn mode_names_round_trip() {
        for m in ConditioningMode::ALL {
            assert_eq!(m.as_str().parse::<ConditioningMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<ConditioningMode>(&json).unwrap(), m);
        }
        assert!(matches!("audio".parse::<ConditioningMode>(), Err(Error::UnknownMode(_))));
        assert!(ConditioningMode::AudioTrainable.is_trainable());
        assert!(!ConditioningMode::RandomFrozen.is_trainable());
        assert!(!ConditioningMode::OneHot.is_trainable());
    }
}
