//! Spectrogram artist classifier and per-artist embedding extraction.
//!
//! A stack of conv 3×3 / ReLU / max-pool blocks feeds a fully connected head
//! (512, 128, 50 units by default, 30% dropout). The post-ReLU output of the
//! last hidden layer is the clip's embedding; averaging it over an artist's
//! training clips gives that artist's row in the [`ArtistEmbeddingMatrix`].

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{dropout_mask, Adam, Graph, ParamStore, Tensor, Var};
use crate::corpus::{ArtistId, Split};
use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::nn::{seeded, ConvBlock, Linear, SeededRng};

pub const ARTIST_EMBEDDING_DIM: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectroCnnConfig {
    pub conv_channels: Vec<usize>,
    pub head: Vec<usize>,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for SpectroCnnConfig {
    fn default() -> Self {
        SpectroCnnConfig {
            conv_channels: vec![8, 16, 32, 64],
            head: vec![512, 128, ARTIST_EMBEDDING_DIM],
            dropout: 0.3,
            epochs: 20,
            batch_size: 8,
            learning_rate: 1e-3,
        }
    }
}

impl SpectroCnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.head.last() != Some(&ARTIST_EMBEDDING_DIM) {
            return Err(Error::InvalidConfig(format!(
                "last hidden layer must have {ARTIST_EMBEDDING_DIM} units, got {:?}",
                self.head
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.head.contains(&0) || self.conv_channels.contains(&0) || self.batch_size == 0 {
            return Err(Error::InvalidConfig("layer sizes and batch size must be positive".into()));
        }
        Ok(())
    }

    /// Spatial size after the conv blocks for an `height × width` input.
    pub fn feature_shape(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let (mut h, mut w) = (height, width);
        for _ in &self.conv_channels {
            if h < 4 || w < 4 {
                return Err(Error::InvalidConfig(format!(
                    "input {height}×{width} too small for {} conv blocks",
                    self.conv_channels.len()
                )));
            }
            h = (h - 2) / 2;
            w = (w - 2) / 2;
        }
        Ok((h, w))
    }
}

#[derive(Debug, Clone)]
pub struct SpectroCnn {
    pub config: SpectroCnnConfig,
    pub store: ParamStore,
    pub input_shape: (usize, usize),
    pub classes: usize,
    blocks: Vec<ConvBlock>,
    head: Vec<Linear>,
    output: Linear,
}

/// Per-epoch diagnostics from [`train_spectro_classifier`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectroTrainReport {
    /// Mean training loss before any update.
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub valid_accuracies: Vec<f64>,
    pub best_epoch: usize,
    pub test_accuracy: f64,
    pub majority_baseline: f64,
}

impl SpectroCnn {
    pub fn new(config: SpectroCnnConfig, input_shape: (usize, usize), classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 classes, got {classes}")));
        }
        let (fh, fw) = config.feature_shape(input_shape.0, input_shape.1)?;
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let mut in_ch = 1;
        let mut blocks = Vec::new();
        for (i, &ch) in config.conv_channels.iter().enumerate() {
            blocks.push(ConvBlock::new(&mut store, &format!("conv{i}"), in_ch, ch, (3, 3), &mut rng));
            in_ch = ch;
        }
        let mut width = in_ch * fh * fw;
        let mut head = Vec::new();
        for (i, &units) in config.head.iter().enumerate() {
            head.push(Linear::new(&mut store, &format!("fc{i}"), width, units, &mut rng));
            width = units;
        }
        let output = Linear::new(&mut store, "out", width, classes, &mut rng);
        Ok(SpectroCnn {
            config,
            store,
            input_shape,
            classes,
            blocks,
            head,
            output,
        })
    }

    /// Builds `(logits [N, K], penultimate [N, 50])`. Dropout is active only when `rng` is given.
    pub fn forward(&self, g: &mut Graph, inputs: Var, mut rng: Option<&mut SeededRng>) -> Result<(Var, Var)> {
        let mut x = inputs;
        for block in &self.blocks {
            x = block.forward(g, x)?;
        }
        let n = g.shape(x)[0];
        let flat: usize = g.shape(x)[1..].iter().product();
        x = g.reshape(x, &[n, flat])?;
        for layer in &self.head {
            let y = layer.forward(g, x)?;
            x = g.relu(y)?;
            if let Some(r) = rng.as_deref_mut() {
                if self.config.dropout > 0.0 {
                    let mask = dropout_mask(g.value(x).len(), self.config.dropout, r);
                    x = g.dropout(x, mask)?;
                }
            }
        }
        let logits = self.output.forward(g, x)?;
        Ok((logits, x))
    }

    /// Stacks unit-scaled spectrograms into a `[batch, 1, h, w]` constant.
    pub fn batch_input(&self, g: &mut Graph, batch: &[&Spectrogram]) -> Result<Var> {
        let (h, w) = self.input_shape;
        let mut data = Vec::with_capacity(batch.len() * h * w);
        for s in batch {
            if (s.values.rows, s.values.cols) != (h, w) {
                return Err(Error::Shape {
                    op: "spectro_cnn input",
                    lhs: vec![h, w],
                    rhs: vec![s.values.rows, s.values.cols],
                });
            }
            data.extend(s.unit_scaled());
        }
        g.constant_from(&[batch.len(), 1, h, w], data)
    }

    /// Inference-mode forward of one spectrogram: `(logits, penultimate)`.
    pub fn cnn_forward(&self, spectrogram: &Spectrogram) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new(&self.store);
        let x = self.batch_input(&mut g, &[spectrogram])?;
        let (logits, pen) = self.forward(&mut g, x, None)?;
        Ok((g.value(logits).to_vec(), g.value(pen).to_vec()))
    }

    pub fn predict(&self, spectrogram: &Spectrogram) -> Result<ArtistId> {
        let (logits, _) = self.cnn_forward(spectrogram)?;
        Ok(ArtistId(argmax(&logits)))
    }

    pub fn accuracy(&self, items: &[Spectrogram]) -> Result<f64> {
        if items.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0;
        for s in items {
            if self.predict(s)? == s.artist {
                correct += 1;
            }
        }
        Ok(correct as f64 / items.len() as f64)
    }

    fn batch_loss(&self, batch: &[&Spectrogram], rng: Option<&mut SeededRng>) -> Result<(f64, Option<crate::autodiff::Gradients>)> {
        let mut g = Graph::new(&self.store);
        let x = self.batch_input(&mut g, batch)?;
        let training = rng.is_some();
        let (logits, _) = self.forward(&mut g, x, rng)?;
        let labels: Vec<usize> = batch.iter().map(|s| s.artist.0).collect();
        let loss = g.softmax_cross_entropy(logits, &labels)?;
        let grads = if training { Some(g.backward(loss)?) } else { None };
        Ok((g.scalar(loss), grads))
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of the most frequent class.
pub fn majority_baseline(labels: impl IntoIterator<Item = ArtistId>) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    let mut n = 0usize;
    for l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
        n += 1;
    }
    if n == 0 {
        return 0.0;
    }
    *counts.values().max().unwrap() as f64 / n as f64
}

/// Train on `split.train`, keep the best-validation-accuracy snapshot, report test accuracy once.
pub fn train_spectro_classifier(
    split: &Split<Spectrogram>,
    classes: usize,
    config: &SpectroCnnConfig,
    seed: u64,
) -> Result<(SpectroCnn, SpectroTrainReport)> {
    for a in 0..classes {
        if !split.train.iter().any(|s| s.artist.0 == a) {
            return Err(Error::MissingArtist(a.to_string()));
        }
    }
    let first = &split.train[0];
    let input_shape = (first.values.rows, first.values.cols);
    let mut model = SpectroCnn::new(config.clone(), input_shape, classes, seed)?;
    let mut rng = seeded(seed ^ 0x5eed_cafe);
    let mut adam = Adam::new(&model.store, config.learning_rate);

    let all: Vec<&Spectrogram> = split.train.iter().collect();
    let mut initial = 0.0;
    for chunk in all.chunks(config.batch_size) {
        initial += model.batch_loss(chunk, None)?.0 * chunk.len() as f64;
    }
    let initial_loss = initial / all.len() as f64;

    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut valid_accuracies = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Spectrogram> = chunk.iter().map(|&i| &split.train[i]).collect();
            let (loss, grads) = model.batch_loss(&batch, Some(&mut rng))?;
            adam.step(&mut model.store, &grads.expect("training pass returns gradients"))?;
            total += loss * batch.len() as f64;
        }
        epoch_losses.push(total / order.len() as f64);
        // ties go to the later, longer-trained snapshot; without a validation set the final weights are kept
        if !split.valid.is_empty() {
            let acc = model.accuracy(&split.valid)?;
            valid_accuracies.push(acc);
            if best.as_ref().is_none_or(|(b, _, _)| acc >= *b) {
                best = Some((acc, epoch, model.store.clone()));
            }
        }
    }
    let mut best_epoch = config.epochs.saturating_sub(1);
    if let Some((_, epoch, store)) = best {
        model.store = store;
        best_epoch = epoch;
    }
    let test_accuracy = model.accuracy(&split.test)?;
    let report = SpectroTrainReport {
        initial_loss,
        epoch_losses,
        valid_accuracies,
        best_epoch,
        test_accuracy,
        majority_baseline: majority_baseline(split.test.iter().map(|s| s.artist)),
    };
    Ok((model, report))
}

/// Where the artist embedding rows came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingProvenance {
    Audio,
    Random,
    OneHot,
}

/// One row per artist.
#[derive(Debug, Clone, PartialEq)]
pub struct ArtistEmbeddingMatrix {
    pub matrix: Tensor,
    pub provenance: EmbeddingProvenance,
}

impl ArtistEmbeddingMatrix {
    pub fn new(matrix: Tensor, provenance: EmbeddingProvenance) -> Result<Self> {
        if matrix.shape().len() != 2 || !matrix.all_finite() {
            return Err(Error::InvalidInput("artist embeddings must be a finite 2-D matrix".into()));
        }
        Ok(ArtistEmbeddingMatrix { matrix, provenance })
    }

    pub fn one_hot(artists: usize) -> Self {
        ArtistEmbeddingMatrix {
            matrix: Tensor::identity(artists),
            provenance: EmbeddingProvenance::OneHot,
        }
    }

    pub fn random<R: Rng + ?Sized>(artists: usize, dim: usize, rng: &mut R) -> Self {
        ArtistEmbeddingMatrix {
            matrix: Tensor::normal(&[artists, dim], 1.0 / (dim as f64).sqrt(), rng),
            provenance: EmbeddingProvenance::Random,
        }
    }

    pub fn artists(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn row(&self, artist: ArtistId) -> &[f64] {
        self.matrix.row(artist.0)
    }

    /// `name<TAB>v1<TAB>…<TAB>vd` per artist, in artist order.
    pub fn to_tsv(&self, names: &[String]) -> Result<String> {
        if names.len() != self.artists() {
            return Err(Error::InvalidInput(format!(
                "{} names for {} embedding rows",
                names.len(),
                self.artists()
            )));
        }
        let mut out = String::new();
        for (i, name) in names.iter().enumerate() {
            out.push_str(name);
            for v in self.matrix.row(i) {
                write!(out, "\t{v}").unwrap();
            }
            out.push('\n');
        }
        Ok(out)
    }

    /// Parse TSV rows and order them to match `names`.
    pub fn from_tsv(text: &str, names: &[String], provenance: EmbeddingProvenance) -> Result<Self> {
        let mut rows: std::collections::HashMap<&str, Vec<f64>> = Default::default();
        let mut dim = None;
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let name = fields.next().unwrap_or_default();
            let values: Vec<f64> = fields
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidInput(format!("embedding TSV line {}: {e}", n + 1)))?;
            if *dim.get_or_insert(values.len()) != values.len() || values.is_empty() {
                return Err(Error::InvalidInput(format!("embedding TSV line {}: ragged row", n + 1)));
            }
            rows.insert(name, values);
        }
        let dim = dim.ok_or_else(|| Error::InvalidInput("empty embedding TSV".into()))?;
        let mut data = Vec::with_capacity(names.len() * dim);
        for name in names {
            let row = rows
                .get(name.as_str())
                .ok_or_else(|| Error::InvalidArtist(format!("{name} missing from embedding TSV")))?;
            data.extend_from_slice(row);
        }
        Self::new(Tensor::new(&[names.len(), dim], data)?, provenance)
    }

    pub fn load_tsv(path: &Path, names: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text, names, EmbeddingProvenance::Audio)
    }
}

/// Row `a` is the mean inference-mode penultimate vector over artist `a`'s clips.
pub fn extract_artist_embeddings(model: &SpectroCnn, training: &[Spectrogram]) -> Result<ArtistEmbeddingMatrix> {
    let dim = *model.config.head.last().expect("validated head");
    let mut sums = vec![0.0; model.classes * dim];
    let mut counts = vec![0usize; model.classes];
    for s in training {
        let a = s.artist.0;
        if a >= model.classes {
            return Err(Error::InvalidArtist(a.to_string()));
        }
        let (_, pen) = model.cnn_forward(s)?;
        sums[a * dim..(a + 1) * dim].iter_mut().zip(&pen).for_each(|(acc, v)| *acc += v);
        counts[a] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::MissingArtist(missing.to_string()));
    }
    for (a, &c) in counts.iter().enumerate() {
        sums[a * dim..(a + 1) * dim].iter_mut().for_each(|v| *v /= c as f64);
    }
    ArtistEmbeddingMatrix::new(Tensor::new(&[model.classes, dim], sums)?, EmbeddingProvenance::Audio)
}
