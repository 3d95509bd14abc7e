//! Synthetic data for end-to-end runs: two artists with disjoint vocabularies
//! and two tone classes of audio.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::RunConfig;
use crate::corpus::Corpus;
use crate::dsp::{encode_wav, SpectrogramParams, CLIP_SECONDS};
use crate::error::{Error, Result};
use crate::eval::TextCnnConfig;
use crate::nn::seeded;
use crate::spectro::{SpectroCnnConfig, ARTIST_EMBEDDING_DIM};
use crate::vae::VaeConfig;

pub const FIXTURE_WORDS: usize = 30;
pub const FIXTURE_LINES: usize = 200;
pub const FIXTURE_SAMPLE_RATE: u32 = 8000;
pub const FIXTURE_SONGS: usize = 20;
pub const FIXTURE_CLIPS_PER_SONG: usize = 3;

/// `(key, display name, genre, consonants, base frequency)`
const ARTISTS: [(&str, &str, &str, [char; 5], f64); 2] = [
    ("alpha", "Alpha", "Synthpop", ['k', 'l', 'm', 'n', 'p'], 440.0),
    ("beta", "Beta", "Drone", ['t', 'r', 's', 'v', 'w'], 1320.0),
];
const VOWELS: [char; 6] = ['a', 'e', 'i', 'o', 'u', 'y'];

/// The 30 words used by fixture artist `artist` (0 or 1).
pub fn artist_vocabulary(artist: usize) -> Vec<String> {
    let consonants = ARTISTS[artist].3;
    consonants
        .iter()
        .flat_map(|c| VOWELS.iter().map(move |v| format!("{c}{v}")))
        .collect()
}

pub fn artist_vocabulary_set(artist: usize) -> HashSet<String> {
    artist_vocabulary(artist).into_iter().collect()
}

/// Lines of 4–8 words; each word is followed by one of three fixed successors.
fn fixture_lines(artist: usize, seed: u64) -> Vec<String> {
    let words = artist_vocabulary(artist);
    let mut rng = seeded(seed.wrapping_add(artist as u64 * 0x9e37_79b9));
    let successors = |i: usize| [(i * 7 + 1) % FIXTURE_WORDS, (i * 7 + 3) % FIXTURE_WORDS, (i * 11 + 5) % FIXTURE_WORDS];
    (0..FIXTURE_LINES)
        .map(|_| {
            let len = rng.random_range(4..=8);
            let mut w = rng.random_range(0..FIXTURE_WORDS);
            let mut line = Vec::with_capacity(len);
            for _ in 0..len {
                line.push(words[w].as_str());
                w = successors(w)[rng.random_range(0..3)];
            }
            line.join(" ")
        })
        .collect()
}

pub fn fixture_corpus(seed: u64) -> Corpus {
    Corpus::from_raw(ARTISTS.iter().enumerate().map(|(i, (key, name, genre, _, _))| {
        (key.to_string(), name.to_string(), Some(genre.to_string()), fixture_lines(i, seed))
    }))
    .expect("fixture corpus is well formed")
}

/// One song: a detuned tone with its second harmonic, a slow tremolo and white noise.
pub fn tone_song<R: Rng + ?Sized>(base_hz: f64, seconds: usize, sample_rate: u32, rng: &mut R) -> Vec<f64> {
    let f = base_hz * rng.random_range(0.97..1.03);
    let tremolo = rng.random_range(0.2..1.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    let noise = Normal::new(0.0, 0.05).expect("valid std");
    let sr = sample_rate as f64;
    (0..seconds * sample_rate as usize)
        .map(|n| {
            let t = n as f64 / sr;
            let env = 0.75 + 0.25 * (2.0 * PI * tremolo * t).sin();
            let s = (2.0 * PI * f * t + phase).sin() + 0.3 * (4.0 * PI * f * t + phase).sin();
            (0.5 * env * s + noise.sample(rng)).clamp(-1.0, 1.0)
        })
        .collect()
}

/// Writes `artists.tsv`, lyrics and `artists/<key>/audio/song<NN>.wav` under `root`.
pub fn write_fixture(root: &Path, seed: u64) -> Result<Corpus> {
    let corpus = fixture_corpus(seed);
    corpus.save(root)?;
    let mut rng = seeded(seed ^ 0xa0d1_0000);
    for (key, _, _, _, hz) in ARTISTS {
        let dir = root.join("artists").join(key).join("audio");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for song in 0..FIXTURE_SONGS {
            let samples = tone_song(hz, CLIP_SECONDS * FIXTURE_CLIPS_PER_SONG, FIXTURE_SAMPLE_RATE, &mut rng);
            let path = dir.join(format!("song{song:02}.wav"));
            let bytes = encode_wav(&samples, FIXTURE_SAMPLE_RATE, 1)?;
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(corpus)
}

/// Small-model configuration sized for the fixture; `runs` seeds starting at 1.
pub fn fixture_config(runs: usize, vae_steps: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.corpus_dir = "corpus".into();
    c.output_dir = "runs".into();
    c.audio.spectrogram = SpectrogramParams {
        n_fft: 512,
        hop: 512,
        n_mels: 32,
        ..SpectrogramParams::default()
    };
    c.spectro = SpectroCnnConfig {
        conv_channels: vec![4, 8, 8],
        head: vec![32, ARTIST_EMBEDDING_DIM],
        dropout: 0.1,
        epochs: 6,
        batch_size: 8,
        learning_rate: 3e-3,
    };
    c.vae = VaeConfig {
        word_emb_dim: 32,
        encoder_hidden: 32,
        latent_dim: 16,
        decoder_hidden: 64,
        artist_emb_dim: ARTIST_EMBEDDING_DIM,
        steps: vae_steps,
        learning_rate: 3e-3,
        ..VaeConfig::default()
    };
    c.evaluation.text_cnn = TextCnnConfig {
        filter_widths: vec![2, 3],
        feature_maps: 16,
        embedding_dim: 16,
        epochs: 8,
        learning_rate: 5e-3,
        ..TextCnnConfig::default()
    };
    c.evaluation.lines_per_artist = 100;
    c.seeds = (1..=runs as u64).collect();
    c.runs = runs;
    c
}
