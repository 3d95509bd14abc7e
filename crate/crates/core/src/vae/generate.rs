use rand::Rng;

use super::{standard_normal, VaeModel};
use crate::autodiff::Graph;
use crate::corpus::{decode_ids, ArtistId, BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::nn::seeded;

/// `n` latent vectors from the standard normal prior.
pub fn sample_prior<R: Rng + ?Sized>(n: usize, latent_dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n).map(|_| standard_normal(latent_dim, rng)).collect()
}

/// Samples `n` lines for `artist` from the prior.
///
/// `temperature == 0` decodes greedily; otherwise tokens are drawn from
/// `softmax(logits / temperature)`. Padding, BOS and UNK are never emitted.
pub fn generate(
    model: &VaeModel,
    artist: ArtistId,
    n: usize,
    temperature: f64,
    max_len: usize,
    seed: u64,
) -> Result<Vec<String>> {
    let mut rng = seeded(seed);
    let z = sample_prior(n, model.config.latent_dim, &mut rng);
    generate_from_latents(model, artist, &z, temperature, max_len, &mut rng)
}

pub fn generate_from_latents<R: Rng + ?Sized>(
    model: &VaeModel,
    artist: ArtistId,
    latents: &[Vec<f64>],
    temperature: f64,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<String>> {
    model.check_artist(artist)?;
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidInput(format!("temperature {temperature} must be finite and non-negative")));
    }
    let n = latents.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let l = model.config.latent_dim;
    if latents.iter().any(|z| z.len() != l) {
        return Err(Error::Shape {
            op: "latent",
            lhs: vec![latents[0].len()],
            rhs: vec![l],
        });
    }
    let v = model.vocab.len();
    let mut g = Graph::new(&model.store);
    let z = g.constant_from(&[n, l], latents.concat())?;
    let (mut h, mut c) = model.initial_state(&mut g, z)?;
    let artists = vec![artist.0; n];
    let mut prev = vec![BOS; n];
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut done = vec![false; n];
    for _ in 0..max_len {
        if done.iter().all(|&d| d) {
            break;
        }
        let (logits, hn, cn) = model.decoder_step(&mut g, &prev, &artists, h, c)?;
        h = hn;
        c = cn;
        let values = g.value(logits).to_vec();
        for i in 0..n {
            if done[i] {
                prev[i] = PAD;
                continue;
            }
            let row = &values[i * v..(i + 1) * v];
            let tok = pick(row, temperature, rng);
            if tok == EOS {
                done[i] = true;
                prev[i] = PAD;
            } else {
                out[i].push(tok);
                prev[i] = tok;
            }
        }
    }
    out.iter().map(|ids| decode_ids(ids, &model.vocab)).collect()
}

fn allowed(id: usize) -> bool {
    !matches!(id, PAD | BOS | UNK)
}

fn pick<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    if temperature == 0.0 {
        let mut best = EOS;
        for (i, &x) in logits.iter().enumerate() {
            if allowed(i) && x > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &x)| if allowed(i) { ((x - max) / temperature).exp() } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            if u < *w {
                return i;
            }
            u -= w;
        }
    }
    EOS
}
