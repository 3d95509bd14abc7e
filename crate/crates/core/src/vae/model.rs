use rand::Rng;

use super::{standard_normal, word_dropout, ConditioningMode, VaeConfig};
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::corpus::{ArtistId, EncodedLine, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::nn::{seeded, Linear, LstmCell};
use crate::spectro::{ArtistEmbeddingMatrix, EmbeddingProvenance};

pub const WORD_EMBEDDING: &str = "word_embedding";
pub const ARTIST_EMBEDDING: &str = "artist_embedding";

#[derive(Debug, Clone)]
pub struct VaeModel {
    pub config: VaeConfig,
    pub vocab: Vocabulary,
    pub artists: usize,
    pub store: ParamStore,
    pub provenance: EmbeddingProvenance,
    word_emb: ParamId,
    artist_emb: ParamId,
    enc_fwd: LstmCell,
    enc_bwd: LstmCell,
    mu_head: Linear,
    logvar_head: Linear,
    to_state: Linear,
    decoder: LstmCell,
    output: Linear,
}

/// Graph handles for one batch objective.
#[derive(Debug, Clone, Copy)]
pub struct VaeLoss {
    /// `recon + kl_weight · kl`
    pub total: Var,
    /// Summed token NLL averaged over lines.
    pub recon: Var,
    /// Closed-form KL averaged over lines.
    pub kl: Var,
    pub mu: Var,
    pub logvar: Var,
    /// Predicted tokens in the batch, EOS included.
    pub tokens: usize,
    pub kl_weight: f64,
}

impl VaeModel {
    /// Builds a freshly initialised model. Audio modes need `embeddings`
    /// with audio provenance; the other modes ignore it.
    pub fn new(
        config: VaeConfig,
        vocab: Vocabulary,
        artists: usize,
        embeddings: Option<&ArtistEmbeddingMatrix>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if artists == 0 {
            return Err(Error::InvalidConfig("at least one artist is required".into()));
        }
        let mut rng = seeded(seed);
        let table = match config.mode {
            ConditioningMode::OneHot => ArtistEmbeddingMatrix::one_hot(artists),
            ConditioningMode::RandomTrainable | ConditioningMode::RandomFrozen => {
                ArtistEmbeddingMatrix::random(artists, config.artist_emb_dim, &mut rng)
            }
            ConditioningMode::AudioTrainable | ConditioningMode::AudioFrozen => {
                let e = embeddings
                    .filter(|e| e.provenance == EmbeddingProvenance::Audio)
                    .ok_or(Error::AudioEmbeddingsRequired)?;
                if e.artists() != artists || e.dim() != config.artist_emb_dim {
                    return Err(Error::Shape {
                        op: "artist embeddings",
                        lhs: e.matrix.shape().to_vec(),
                        rhs: vec![artists, config.artist_emb_dim],
                    });
                }
                e.clone()
            }
        };
        let provenance = table.provenance;
        let mut matrix = table.matrix;
        matrix.requires_grad = config.mode.is_trainable();

        let v = vocab.len();
        let (e, h, l, dh) = (config.word_emb_dim, config.encoder_hidden, config.latent_dim, config.decoder_hidden);
        let a = config.artist_width(artists);
        let mut store = ParamStore::new();
        let word_emb = store.insert(WORD_EMBEDDING, Tensor::normal(&[v, e], 0.1, &mut rng));
        let artist_emb = store.insert(ARTIST_EMBEDDING, matrix);
        let enc_fwd = LstmCell::new(&mut store, "encoder.forward", e, h, &mut rng);
        let enc_bwd = LstmCell::new(&mut store, "encoder.backward", e, h, &mut rng);
        let mu_head = Linear::new(&mut store, "latent.mu", 2 * h, l, &mut rng);
        let logvar_head = Linear::new(&mut store, "latent.logvar", 2 * h, l, &mut rng);
        let to_state = Linear::new(&mut store, "decoder.init", l, 2 * dh, &mut rng);
        let decoder = LstmCell::new(&mut store, "decoder.lstm", e + a, dh, &mut rng);
        let output = Linear::new(&mut store, "decoder.output", dh, v, &mut rng);
        Ok(VaeModel {
            config,
            vocab,
            artists,
            store,
            provenance,
            word_emb,
            artist_emb,
            enc_fwd,
            enc_bwd,
            mu_head,
            logvar_head,
            to_state,
            decoder,
            output,
        })
    }

    /// Rebuilds a model around parameters loaded from disk.
    pub fn from_store(
        config: VaeConfig,
        vocab: Vocabulary,
        artists: usize,
        mut store: ParamStore,
        provenance: EmbeddingProvenance,
    ) -> Result<Self> {
        config.validate()?;
        let missing = |name: &str| Error::InvalidCheckpoint(format!("missing parameter {name}"));
        let word_emb = store.id(WORD_EMBEDDING).ok_or_else(|| missing(WORD_EMBEDDING))?;
        let artist_emb = store.id(ARTIST_EMBEDDING).ok_or_else(|| missing(ARTIST_EMBEDDING))?;
        let lstm = |n: &str| LstmCell::find(&store, n).ok_or_else(|| missing(n));
        let lin = |n: &str| Linear::find(&store, n).ok_or_else(|| missing(n));
        let enc_fwd = lstm("encoder.forward")?;
        let enc_bwd = lstm("encoder.backward")?;
        let mu_head = lin("latent.mu")?;
        let logvar_head = lin("latent.logvar")?;
        let to_state = lin("decoder.init")?;
        let decoder = lstm("decoder.lstm")?;
        let output = lin("decoder.output")?;
        store.get_mut(artist_emb).requires_grad = config.mode.is_trainable();

        let expect = [
            (word_emb, vec![vocab.len(), config.word_emb_dim]),
            (artist_emb, vec![artists, config.artist_width(artists)]),
            (output.weight, vec![config.decoder_hidden, vocab.len()]),
            (mu_head.weight, vec![2 * config.encoder_hidden, config.latent_dim]),
            (decoder.weight, vec![
                config.word_emb_dim + config.artist_width(artists) + config.decoder_hidden,
                4 * config.decoder_hidden,
            ]),
        ];
        for (id, shape) in expect {
            if store.get(id).shape() != shape.as_slice() {
                return Err(Error::InvalidCheckpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    store.name(id),
                    store.get(id).shape(),
                    shape
                )));
            }
        }
        Ok(VaeModel {
            config,
            vocab,
            artists,
            store,
            provenance,
            word_emb,
            artist_emb,
            enc_fwd,
            enc_bwd,
            mu_head,
            logvar_head,
            to_state,
            decoder,
            output,
        })
    }

    pub fn artist_embeddings(&self) -> &Tensor {
        self.store.get(self.artist_emb)
    }

    pub fn artist_embedding_id(&self) -> ParamId {
        self.artist_emb
    }

    pub fn check_artist(&self, artist: ArtistId) -> Result<()> {
        if artist.0 >= self.artists {
            return Err(Error::InvalidArtist(format!("artist {} of {}", artist.0, self.artists)));
        }
        Ok(())
    }

    /// Sets every parameter, the artist table included, to zero.
    pub fn zero_parameters(&mut self) {
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            self.store.get_mut(id).data_mut().fill(0.0);
        }
    }

    /// Overwrites word-embedding rows from `token v1 … vd` text lines.
    /// Tokens outside the vocabulary and rows of the wrong width are skipped.
    pub fn load_word_vectors(&mut self, text: &str) -> usize {
        let dim = self.config.word_emb_dim;
        let mut loaded = 0;
        for line in text.lines() {
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let Some(id) = self.vocab.id(token) else { continue };
            let values: Vec<f64> = match fields.map(str::parse).collect() {
                Ok(v) => v,
                Err(_) => continue,
            };
            if values.len() != dim {
                continue;
            }
            self.store.get_mut(self.word_emb).data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&values);
            loaded += 1;
        }
        loaded
    }

    /// Bidirectional encoding of a batch; returns `(μ, logσ²)`, each `[B, latent]`.
    pub fn encode_batch(&self, g: &mut Graph, batch: &[&EncodedLine]) -> Result<(Var, Var)> {
        let b = batch.len();
        let h = self.config.encoder_hidden;
        let lens: Vec<usize> = batch.iter().map(|l| l.content().len()).collect();
        let steps = lens.iter().copied().max().unwrap_or(0);
        let table = g.param(self.word_emb);
        let mut finals = Vec::with_capacity(2);
        for (cell, reverse) in [(&self.enc_fwd, false), (&self.enc_bwd, true)] {
            let mut hs = g.constant(Tensor::zeros(&[b, h]));
            let mut cs = g.constant(Tensor::zeros(&[b, h]));
            for t in 0..steps {
                let ids: Vec<usize> = batch
                    .iter()
                    .zip(&lens)
                    .map(|(line, &n)| match (t < n, reverse) {
                        (false, _) => PAD,
                        (true, false) => line.content()[t],
                        (true, true) => line.content()[n - 1 - t],
                    })
                    .collect();
                let x = g.embedding(table, &ids)?;
                let (hn, cn) = cell.step(g, x, hs, cs)?;
                if lens.iter().all(|&n| t < n) {
                    hs = hn;
                    cs = cn;
                } else {
                    // finished lines keep their last state
                    let mut keep = Vec::with_capacity(b * h);
                    for &n in &lens {
                        keep.extend(std::iter::repeat_n(if t < n { 1.0 } else { 0.0 }, h));
                    }
                    let hold: Vec<f64> = keep.iter().map(|m| 1.0 - m).collect();
                    let keep = g.constant_from(&[b, h], keep)?;
                    let hold = g.constant_from(&[b, h], hold)?;
                    hs = masked(g, hn, hs, keep, hold)?;
                    cs = masked(g, cn, cs, keep, hold)?;
                }
            }
            finals.push(hs);
        }
        let both = g.concat(&finals)?;
        let mu = self.mu_head.forward(g, both)?;
        let logvar = self.logvar_head.forward(g, both)?;
        Ok((mu, logvar))
    }

    /// Decoder state from a latent batch `z: [B, latent]`.
    pub fn initial_state(&self, g: &mut Graph, z: Var) -> Result<(Var, Var)> {
        let dh = self.config.decoder_hidden;
        let s = self.to_state.forward(g, z)?;
        Ok((g.slice_last(s, 0, dh)?, g.slice_last(s, dh, dh)?))
    }

    /// One decoder step; returns `(logits [B, V], h, c)`.
    pub fn decoder_step(
        &self,
        g: &mut Graph,
        ids: &[usize],
        artists: &[usize],
        h: Var,
        c: Var,
    ) -> Result<(Var, Var, Var)> {
        let words = g.param(self.word_emb);
        let table = g.param(self.artist_emb);
        let w = g.embedding(words, ids)?;
        let a = g.embedding(table, artists)?;
        let x = g.concat(&[w, a])?;
        let (h, c) = self.decoder.step(g, x, h, c)?;
        let logits = self.output.forward(g, h)?;
        Ok((logits, h, c))
    }

    /// Batch objective with explicit noise: `eps` is `[B, latent]` and
    /// `inputs[b]` the (possibly word-dropped) decoder inputs for line `b`.
    pub fn loss_with_noise(
        &self,
        g: &mut Graph,
        batch: &[&EncodedLine],
        kl_weight: f64,
        eps: &[f64],
        inputs: &[Vec<usize>],
    ) -> Result<VaeLoss> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::EmptyCorpus);
        }
        let l = self.config.latent_dim;
        for line in batch {
            self.check_artist(line.artist)?;
            if line.content().is_empty() {
                return Err(Error::EmptyLine);
            }
        }
        let (mu, logvar) = self.encode_batch(g, batch)?;

        let half = g.scale(logvar, 0.5)?;
        let sigma = g.exp(half)?;
        let noise = g.constant_from(&[b, l], eps.to_vec())?;
        let spread = g.mul(sigma, noise)?;
        let z = g.add(mu, spread)?;

        let mu2 = g.mul(mu, mu)?;
        let var = g.exp(logvar)?;
        let t = g.add(mu2, var)?;
        let t = g.sub(t, logvar)?;
        let t = g.sum(t)?;
        let t = g.scale(t, 0.5 / b as f64)?;
        let offset = g.constant(Tensor::scalar(-0.5 * l as f64));
        let kl = g.add(t, offset)?;

        let (mut h, mut c) = self.initial_state(g, z)?;
        let artists: Vec<usize> = batch.iter().map(|line| line.artist.0).collect();
        let steps = batch.iter().map(|line| line.ids.len() - 1).max().unwrap_or(0);
        let mut recon: Option<Var> = None;
        let mut tokens = 0;
        for t in 0..steps {
            let mut ids = Vec::with_capacity(b);
            let mut targets = Vec::with_capacity(b);
            let mut weights = Vec::with_capacity(b);
            for (line, input) in batch.iter().zip(inputs) {
                if t + 1 < line.ids.len() {
                    ids.push(input[t]);
                    targets.push(line.ids[t + 1]);
                    weights.push(1.0 / b as f64);
                    tokens += 1;
                } else {
                    ids.push(PAD);
                    targets.push(PAD);
                    weights.push(0.0);
                }
            }
            let (logits, hn, cn) = self.decoder_step(g, &ids, &artists, h, c)?;
            h = hn;
            c = cn;
            let step_loss = g.weighted_cross_entropy(logits, &targets, &weights)?;
            recon = Some(match recon {
                Some(acc) => g.add(acc, step_loss)?,
                None => step_loss,
            });
        }
        let recon = recon.ok_or(Error::EmptyLine)?;
        let weighted = g.scale(kl, kl_weight)?;
        let total = g.add(recon, weighted)?;
        Ok(VaeLoss {
            total,
            recon,
            kl,
            mu,
            logvar,
            tokens,
            kl_weight,
        })
    }

    /// Batch objective drawing posterior noise and word dropout from `rng`.
    pub fn loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        batch: &[&EncodedLine],
        kl_weight: f64,
        rng: &mut R,
    ) -> Result<VaeLoss> {
        let eps = standard_normal(batch.len() * self.config.latent_dim, rng);
        let inputs: Vec<Vec<usize>> = batch
            .iter()
            .map(|line| word_dropout(&line.ids[..line.ids.len() - 1], self.config.word_dropout, rng))
            .collect();
        self.loss_with_noise(g, batch, kl_weight, &eps, &inputs)
    }

    /// Posterior parameters `(μ, logσ²)` for a single line.
    pub fn encode(&self, line: &EncodedLine) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new(&self.store);
        let (mu, lv) = self.encode_batch(&mut g, &[line])?;
        Ok((g.value(mu).to_vec(), g.value(lv).to_vec()))
    }

    /// Logits `[T, V]` for decoder inputs `inputs` given latent `z`.
    pub fn decode_teacher_forced(&self, z: &[f64], artist: ArtistId, inputs: &[usize]) -> Result<Tensor> {
        self.check_artist(artist)?;
        let v = self.vocab.len();
        let mut g = Graph::new(&self.store);
        let z = g.constant_from(&[1, self.config.latent_dim], z.to_vec())?;
        let (mut h, mut c) = self.initial_state(&mut g, z)?;
        let mut out = Vec::with_capacity(inputs.len() * v);
        for &id in inputs {
            let (logits, hn, cn) = self.decoder_step(&mut g, &[id], &[artist.0], h, c)?;
            out.extend_from_slice(g.value(logits));
            h = hn;
            c = cn;
        }
        Tensor::new(&[inputs.len(), v], out)
    }

    /// Per-token reconstruction NLL in nats at the posterior mean, without word dropout.
    pub fn reconstruction_nll(&self, lines: &[EncodedLine]) -> Result<f64> {
        let mut nats = 0.0;
        let mut tokens = 0;
        for chunk in lines.chunks(self.config.batch_size.max(1)) {
            let batch: Vec<&EncodedLine> = chunk.iter().collect();
            let mut g = Graph::new(&self.store);
            let eps = vec![0.0; batch.len() * self.config.latent_dim];
            let inputs: Vec<Vec<usize>> = batch.iter().map(|l| l.ids[..l.ids.len() - 1].to_vec()).collect();
            let loss = self.loss_with_noise(&mut g, &batch, 0.0, &eps, &inputs)?;
            nats += g.scalar(loss.recon) * batch.len() as f64;
            tokens += loss.tokens;
        }
        if tokens == 0 {
            return Err(Error::EmptyCorpus);
        }
        Ok(nats / tokens as f64)
    }
}

fn masked(g: &mut Graph, new: Var, old: Var, keep: Var, hold: Var) -> Result<Var> {
    let a = g.mul(new, keep)?;
    let b = g.mul(old, hold)?;
    g.add(a, b)
}
