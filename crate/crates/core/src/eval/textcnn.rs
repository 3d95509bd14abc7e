use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::StyleClassifier;
use crate::autodiff::{dropout_mask, Adam, Graph, ParamId, ParamStore, Tensor, Var};
use crate::corpus::{build_vocabulary, tokenize_line, ArtistId, Line, Split, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::nn::{seeded, Linear, SeededRng};
use crate::spectro::{argmax, majority_baseline};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextCnnConfig {
    pub filter_widths: Vec<usize>,
    pub feature_maps: usize,
    pub dropout: f64,
    pub embedding_dim: usize,
    /// Lines are truncated or padded to this many tokens.
    pub max_len: usize,
    pub min_count: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TextCnnConfig {
    fn default() -> Self {
        TextCnnConfig {
            filter_widths: vec![3, 4, 5],
            feature_maps: 100,
            dropout: 0.5,
            embedding_dim: 300,
            max_len: 20,
            min_count: 1,
            epochs: 10,
            batch_size: 50,
            learning_rate: 1e-3,
        }
    }
}

impl TextCnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.filter_widths.is_empty() || self.filter_widths.contains(&0) {
            return Err(Error::InvalidConfig("filter widths must be nonempty and positive".into()));
        }
        if !self.filter_widths.iter().any(|&w| w <= self.max_len) {
            return Err(Error::InvalidConfig(format!(
                "no filter width fits a padded line of {} tokens",
                self.max_len
            )));
        }
        if self.feature_maps == 0 || self.embedding_dim == 0 || self.batch_size == 0 || self.min_count == 0 {
            return Err(Error::InvalidConfig("text CNN sizes must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

struct Filter {
    width: usize,
    weight: ParamId,
    bias: ParamId,
}

/// Convolutions of several widths over word embeddings, max-over-time pooling,
/// dropout and a linear softmax layer.
pub struct TextCnn {
    pub config: TextCnnConfig,
    pub vocab: Vocabulary,
    pub classes: usize,
    pub store: ParamStore,
    embedding: ParamId,
    filters: Vec<Filter>,
    output: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleTrainReport {
    pub epoch_losses: Vec<f64>,
    pub valid_accuracies: Vec<f64>,
    pub test_accuracy: f64,
    pub majority_baseline: f64,
}

impl TextCnn {
    pub fn new(config: TextCnnConfig, vocab: Vocabulary, classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 classes, got {classes}")));
        }
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let e = config.embedding_dim;
        let embedding = store.insert("embedding", Tensor::uniform(&[vocab.len(), e], 0.25, &mut rng));
        let mut filters = Vec::new();
        for &w in config.filter_widths.iter().filter(|&&w| w <= config.max_len) {
            let fan_in = w * e;
            let weight = store.insert(
                format!("conv{w}.weight"),
                Tensor::uniform(&[config.feature_maps, 1, w, e], (6.0 / fan_in as f64).sqrt(), &mut rng),
            );
            let bias = store.insert(format!("conv{w}.bias"), Tensor::zeros(&[config.feature_maps]));
            filters.push(Filter { width: w, weight, bias });
        }
        let output = Linear::new(&mut store, "out", filters.len() * config.feature_maps, classes, &mut rng);
        Ok(TextCnn {
            config,
            vocab,
            classes,
            store,
            embedding,
            filters,
            output,
        })
    }

    /// Token ids padded or truncated to `max_len`.
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        let mut ids: Vec<usize> = tokens.iter().take(self.config.max_len).map(|t| self.vocab.id_or_unk(t)).collect();
        ids.resize(self.config.max_len, PAD);
        ids
    }

    /// Logits `[N, K]` for `N` encoded lines. Dropout is active only when `rng` is given.
    pub fn forward(&self, g: &mut Graph, batch: &[Vec<usize>], rng: Option<&mut SeededRng>) -> Result<Var> {
        let n = batch.len();
        let t = self.config.max_len;
        let e = self.config.embedding_dim;
        let flat: Vec<usize> = batch.iter().flatten().copied().collect();
        let table = g.param(self.embedding);
        let emb = g.embedding(table, &flat)?;
        let x = g.reshape(emb, &[n, 1, t, e])?;
        let mut pooled = Vec::with_capacity(self.filters.len());
        for f in &self.filters {
            let w = g.param(f.weight);
            let b = g.param(f.bias);
            let c = g.conv2d(x, w, b)?;
            let c = g.relu(c)?;
            let c = g.reshape(c, &[n, self.config.feature_maps, t - f.width + 1])?;
            pooled.push(g.max_last(c)?);
        }
        let mut h = g.concat(&pooled)?;
        if let Some(r) = rng {
            if self.config.dropout > 0.0 {
                let mask = dropout_mask(g.value(h).len(), self.config.dropout, r);
                h = g.dropout(h, mask)?;
            }
        }
        self.output.forward(g, h)
    }

    pub fn predict_ids(&self, ids: &[usize]) -> Result<ArtistId> {
        let mut g = Graph::new(&self.store);
        let logits = self.forward(&mut g, &[ids.to_vec()], None)?;
        Ok(ArtistId(argmax(g.value(logits))))
    }

    pub fn accuracy(&self, lines: &[Line]) -> Result<f64> {
        if lines.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0;
        for chunk in lines.chunks(256) {
            let batch: Vec<Vec<usize>> = chunk.iter().map(|l| self.encode(&l.tokens)).collect();
            let mut g = Graph::new(&self.store);
            let logits = self.forward(&mut g, &batch, None)?;
            let values = g.value(logits);
            for (i, l) in chunk.iter().enumerate() {
                if argmax(&values[i * self.classes..(i + 1) * self.classes]) == l.artist.0 {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / lines.len() as f64)
    }
}

impl StyleClassifier for TextCnn {
    fn classes(&self) -> usize {
        self.classes
    }

    fn predict(&self, text: &str) -> Result<ArtistId> {
        self.predict_ids(&self.encode(&tokenize_line(text)))
    }
}

/// Trains on `split.train`, keeps the best-validation snapshot and reports test accuracy
/// with the majority baseline of the same test set.
pub fn train_style_classifier(
    split: &Split<Line>,
    classes: usize,
    config: TextCnnConfig,
    seed: u64,
) -> Result<(TextCnn, StyleTrainReport)> {
    for a in 0..classes {
        if !split.train.iter().any(|l| l.artist.0 == a) {
            return Err(Error::MissingArtist(a.to_string()));
        }
    }
    if let Some(l) = split.train.iter().find(|l| l.artist.0 >= classes) {
        return Err(Error::InvalidArtist(l.artist.0.to_string()));
    }
    let vocab = build_vocabulary(&split.train, config.min_count)?;
    let mut model = TextCnn::new(config, vocab, classes, seed)?;
    let mut rng = seeded(seed ^ 0x5eed);
    let mut adam = Adam::new(&model.store, model.config.learning_rate);
    let encoded: Vec<(Vec<usize>, usize)> = split
        .train
        .iter()
        .map(|l| (model.encode(&l.tokens), l.artist.0))
        .collect();
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut epoch_losses = Vec::new();
    let mut valid_accuracies = Vec::new();
    let mut best: Option<(f64, ParamStore)> = None;
    for _ in 0..model.config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(model.config.batch_size) {
            let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| encoded[i].0.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| encoded[i].1).collect();
            let grads = {
                let mut g = Graph::new(&model.store);
                let logits = model.forward(&mut g, &batch, Some(&mut rng))?;
                let loss = g.softmax_cross_entropy(logits, &labels)?;
                total += g.scalar(loss) * chunk.len() as f64;
                g.backward(loss)?
            };
            adam.step(&mut model.store, &grads)?;
        }
        epoch_losses.push(total / encoded.len() as f64);
        if !split.valid.is_empty() {
            let acc = model.accuracy(&split.valid)?;
            valid_accuracies.push(acc);
            if best.as_ref().is_none_or(|(b, _)| acc >= *b) {
                best = Some((acc, model.store.clone()));
            }
        }
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    let test_accuracy = model.accuracy(&split.test)?;
    let report = StyleTrainReport {
        epoch_losses,
        valid_accuracies,
        test_accuracy,
        majority_baseline: majority_baseline(split.test.iter().map(|l| l.artist)),
    };
    Ok((model, report))
}
