//! Audio front end: WAV decoding, 10-second clip segmentation, STFT and log-mel spectrograms.

mod mel;
mod stft;
mod wav;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{ArtistId, Split, SplitFractions};
use crate::error::{Error, Result};
use crate::nn::seeded;

pub use mel::{hz_to_mel, mel_to_hz, MelFilterbank};
pub use stft::{frame_count, hann_window, stft_power};
pub use wav::{decode_wav, encode_wav, DecodedAudio};

pub const CLIP_SECONDS: usize = 10;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Identifier of the source recording; every clip cut from one file shares it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SongId(pub String);

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub song_id: SongId,
    pub artist: ArtistId,
    pub clip_index: usize,
}

/// Consecutive non-overlapping 10-second windows; a shorter remainder is dropped.
pub fn segment_clips(samples: &[f64], sample_rate: u32, song_id: &SongId, artist: ArtistId) -> Vec<AudioClip> {
    let len = CLIP_SECONDS * sample_rate as usize;
    if len == 0 {
        return Vec::new();
    }
    samples
        .chunks_exact(len)
        .enumerate()
        .map(|(clip_index, chunk)| AudioClip {
            samples: chunk.to_vec(),
            sample_rate,
            song_id: song_id.clone(),
            artist,
            clip_index,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramParams {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    /// `None` means the Nyquist frequency of the clip.
    pub fmax: Option<f64>,
    pub floor_db: f64,
}

impl Default for SpectrogramParams {
    fn default() -> Self {
        SpectrogramParams {
            n_fft: 2048,
            hop: 512,
            n_mels: 128,
            fmin: 0.0,
            fmax: None,
            floor_db: -80.0,
        }
    }
}

impl SpectrogramParams {
    pub fn filterbank(&self, sample_rate: u32) -> Result<MelFilterbank> {
        let sr = sample_rate as f64;
        MelFilterbank::new(self.n_mels, self.n_fft, sr, self.fmin, self.fmax.unwrap_or(sr / 2.0))
    }

    pub fn frames(&self, sample_rate: u32) -> usize {
        frame_count(CLIP_SECONDS * sample_rate as usize, self.n_fft, self.hop)
    }
}

/// Log-mel spectrogram of one clip, `n_mels × frames`, in dB relative to the clip maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrogram {
    pub values: Matrix,
    pub song_id: SongId,
    pub artist: ArtistId,
    pub clip_index: usize,
    pub sample_rate: u32,
    pub params: SpectrogramParams,
}

impl Spectrogram {
    /// Values mapped linearly from `[floor_db, 0]` to `[0, 1]`.
    pub fn unit_scaled(&self) -> Vec<f64> {
        let floor = self.params.floor_db;
        self.values.data.iter().map(|v| (v - floor) / -floor).collect()
    }
}

/// `10·log10(p / p_max)` clamped below at `floor_db`; all-floor when `p_max == 0`.
pub fn power_to_db(power: &Matrix, floor_db: f64) -> Matrix {
    let max = power.data.iter().cloned().fold(0.0, f64::max);
    let data = power
        .data
        .iter()
        .map(|&p| {
            if max <= 0.0 || p <= 0.0 {
                floor_db
            } else {
                (10.0 * (p / max).log10()).max(floor_db)
            }
        })
        .collect();
    Matrix {
        rows: power.rows,
        cols: power.cols,
        data,
    }
}

/// Linear mel power (`n_mels × frames`) before dB conversion.
pub fn mel_power(samples: &[f64], sample_rate: u32, params: &SpectrogramParams) -> Result<Matrix> {
    let power = stft_power(samples, params.n_fft, params.hop)?;
    params.filterbank(sample_rate)?.apply(&power)
}

pub fn mel_spectrogram(clip: &AudioClip, params: &SpectrogramParams) -> Result<Spectrogram> {
    if clip.samples.len() != CLIP_SECONDS * clip.sample_rate as usize {
        return Err(Error::InvalidInput(format!(
            "clip has {} samples, expected {}",
            clip.samples.len(),
            CLIP_SECONDS * clip.sample_rate as usize
        )));
    }
    if clip.samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("audio clip"));
    }
    let mel = mel_power(&clip.samples, clip.sample_rate, params)?;
    Ok(Spectrogram {
        values: power_to_db(&mel, params.floor_db),
        song_id: clip.song_id.clone(),
        artist: clip.artist,
        clip_index: clip.clip_index,
        sample_rate: clip.sample_rate,
        params: *params,
    })
}

/// Song-level, per-artist stratified split. Each artist needs at least three songs;
/// songs are shuffled with `seed` and dealt so that the clip counts of the validation
/// and test partitions land as close to their targets as whole songs allow.
pub fn grouped_split_by<T, F>(items: &[T], key: F, fractions: SplitFractions, seed: u64) -> Result<Split<T>>
where
    T: Clone,
    F: Fn(&T) -> (ArtistId, &SongId),
{
    fractions.validate()?;
    let mut songs: BTreeMap<ArtistId, BTreeMap<&SongId, usize>> = BTreeMap::new();
    for item in items {
        let (artist, song) = key(item);
        *songs.entry(artist).or_default().entry(song).or_default() += 1;
    }
    let mut rng = seeded(seed);
    // 0 = train, 1 = valid, 2 = test
    let mut assignment: BTreeMap<(ArtistId, &SongId), u8> = BTreeMap::new();
    for (artist, per_song) in &songs {
        if per_song.len() < 3 {
            return Err(Error::CannotGroupSplit(format!(
                "artist {} has {} distinct songs, need at least 3",
                artist.0,
                per_song.len()
            )));
        }
        let total: usize = per_song.values().sum();
        let mut order: Vec<(&SongId, usize)> = per_song.iter().map(|(s, &c)| (*s, c)).collect();
        order.shuffle(&mut rng);
        let targets = [0.0, fractions.valid * total as f64, fractions.test * total as f64];
        let mut clips = [0usize; 3];
        let mut song_counts = [0usize; 3];
        let last = order.len() - 1;
        for (i, (song, c)) in order.into_iter().enumerate() {
            let closer = |part: usize| {
                song_counts[part] == 0
                    || ((clips[part] + c) as f64 - targets[part]).abs() < (clips[part] as f64 - targets[part]).abs()
            };
            let part = if i == last && song_counts[0] == 0 {
                0
            } else if closer(1) && fractions.valid > 0.0 {
                1
            } else if closer(2) && fractions.test > 0.0 {
                2
            } else {
                0
            };
            clips[part] += c;
            song_counts[part] += 1;
            assignment.insert((*artist, song), part as u8);
        }
    }
    let mut split = Split {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for item in items {
        let (artist, song) = key(item);
        match assignment[&(artist, song)] {
            0 => split.train.push(item.clone()),
            1 => split.valid.push(item.clone()),
            _ => split.test.push(item.clone()),
        }
    }
    Ok(split)
}

pub fn grouped_split(spectrograms: &[Spectrogram], fractions: SplitFractions, seed: u64) -> Result<Split<Spectrogram>> {
    grouped_split_by(spectrograms, |s| (s.artist, &s.song_id), fractions, seed)
}

/// Songs present in more than one partition (always empty for [`grouped_split`] output).
pub fn songs_crossing_partitions(split: &Split<Spectrogram>) -> BTreeSet<SongId> {
    let sets: Vec<BTreeSet<&SongId>> = [&split.train, &split.valid, &split.test]
        .iter()
        .map(|part| part.iter().map(|s| &s.song_id).collect())
        .collect();
    let mut crossing = BTreeSet::new();
    for i in 0..3 {
        for j in i + 1..3 {
            crossing.extend(sets[i].intersection(&sets[j]).map(|s| (*s).clone()));
        }
    }
    crossing
}
