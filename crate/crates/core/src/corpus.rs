//! Lyric corpus ingestion, tokenisation, vocabularies and stratified splits.
//!
//! On disk a corpus is a directory holding `artists.tsv` (tab-separated
//! `directory, display name, genre`) and one `artists/<directory>/lyrics.txt`
//! per artist with one lyric line per text line.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::seeded;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

pub const DEFAULT_MIN_COUNT: usize = 2;
pub const DEFAULT_MAX_LINE_LEN: usize = 20;

/// Dense artist index in `[0, K)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArtistId(pub usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artist {
    pub id: ArtistId,
    /// Directory name under `artists/`.
    pub key: String,
    pub name: String,
    pub genre: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Line {
    pub raw: String,
    pub tokens: Vec<String>,
    pub artist: ArtistId,
}

impl Line {
    /// Tokenises `raw`; `None` when nothing survives tokenisation.
    pub fn new(raw: impl Into<String>, artist: ArtistId) -> Option<Self> {
        let raw = raw.into();
        let tokens = tokenize_line(&raw);
        (!tokens.is_empty()).then_some(Line { raw, tokens, artist })
    }
}

/// Lowercase, drop punctuation except apostrophes between two word characters,
/// split on whitespace.
pub fn tokenize_line(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut cleaned = String::with_capacity(text.len());
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            cleaned.extend(c.to_lowercase());
        } else if c.is_whitespace() {
            cleaned.push(' ');
        } else if c == '\'' || c == '\u{2019}' {
            let inner = i > 0
                && i + 1 < chars.len()
                && chars[i - 1].is_alphanumeric()
                && chars[i + 1].is_alphanumeric();
            if inner {
                cleaned.push('\'');
            }
        }
    }
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Tokenised form joined by single spaces; the identity used by the diversity metrics.
pub fn normalize_line(text: &str) -> String {
    tokenize_line(text).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_of: Vec<String>,
    id_of: HashMap<String, usize>,
    pub min_count: usize,
}

impl Vocabulary {
    /// Tokens in id order; the first four are the specials.
    pub fn from_tokens(tokens: Vec<String>, min_count: usize) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len() || tokens[..4].iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b) {
            return Err(Error::InvalidInput("vocabulary must start with the special tokens".into()));
        }
        let id_of: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if id_of.len() != tokens.len() {
            return Err(Error::InvalidInput("duplicate vocabulary token".into()));
        }
        Ok(Vocabulary {
            token_of: tokens,
            id_of,
            min_count,
        })
    }

    pub fn len(&self) -> usize {
        self.token_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_of.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.id_of.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.token_of.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.token_of
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIAL_TOKENS.len()
    }
}

/// Tokens with frequency `>= min_count`, ordered by descending frequency then lexicographically.
pub fn build_vocabulary(lines: &[Line], min_count: usize) -> Result<Vocabulary> {
    if lines.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if min_count == 0 {
        return Err(Error::InvalidInput("min_count must be at least 1".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for line in lines {
        for t in &line.tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(t, _)| t.to_string()))
        .collect();
    Vocabulary::from_tokens(tokens, min_count)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedLine {
    /// `BOS, content…, EOS`
    pub ids: Vec<usize>,
    pub artist: ArtistId,
    /// Content token count, excluding the framing.
    pub length: usize,
}

impl EncodedLine {
    pub fn content(&self) -> &[usize] {
        &self.ids[1..self.ids.len() - 1]
    }
}

pub fn encode_line(line: &Line, vocab: &Vocabulary, max_line_len: usize) -> Result<EncodedLine> {
    encode_tokens(&line.tokens, line.artist, vocab, max_line_len)
}

pub fn encode_tokens(tokens: &[String], artist: ArtistId, vocab: &Vocabulary, max_line_len: usize) -> Result<EncodedLine> {
    if tokens.is_empty() || max_line_len == 0 {
        return Err(Error::EmptyLine);
    }
    let length = tokens.len().min(max_line_len);
    let mut ids = Vec::with_capacity(length + 2);
    ids.push(BOS);
    ids.extend(tokens[..length].iter().map(|t| vocab.id_or_unk(t)));
    ids.push(EOS);
    Ok(EncodedLine { ids, artist, length })
}

/// Drops the four specials and joins the remaining tokens with single spaces.
pub fn decode_ids(ids: &[usize], vocab: &Vocabulary) -> Result<String> {
    let mut out: Vec<&str> = Vec::with_capacity(ids.len());
    for &id in ids {
        let token = vocab.token(id).ok_or(Error::InvalidId { id, size: vocab.len() })?;
        if !Vocabulary::is_special(id) {
            out.push(token);
        }
    }
    Ok(out.join(" "))
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let total = self.train + self.valid + self.test;
        if (total - 1.0).abs() > 1e-9 || self.train < 0.0 || self.valid < 0.0 || self.test < 0.0 {
            return Err(Error::BadFractions(total));
        }
        Ok(())
    }

    /// Item counts for a group of `n`: validation and test are rounded, training takes the rest.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let valid = ((n as f64 * self.valid).round() as usize).min(n);
        let test = ((n as f64 * self.test).round() as usize).min(n - valid);
        (n - valid - test, valid, test)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
}

/// Per-artist stratified, seed-deterministic split of lyric lines.
pub fn split_corpus(lines: &[Line], fractions: SplitFractions, seed: u64) -> Result<Split<Line>> {
    fractions.validate()?;
    let mut by_artist: std::collections::BTreeMap<ArtistId, Vec<&Line>> = Default::default();
    for line in lines {
        by_artist.entry(line.artist).or_default().push(line);
    }
    let mut rng = seeded(seed);
    let mut split = Split {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for (artist, mut group) in by_artist {
        if group.len() < 10 {
            return Err(Error::ArtistTooSmall {
                artist: artist.0.to_string(),
                lines: group.len(),
            });
        }
        group.shuffle(&mut rng);
        let (n_train, n_valid, _) = fractions.counts(group.len());
        for (i, line) in group.into_iter().enumerate() {
            let dst = if i < n_train {
                &mut split.train
            } else if i < n_train + n_valid {
                &mut split.valid
            } else {
                &mut split.test
            };
            dst.push(line.clone());
        }
    }
    Ok(split)
}

/// An artist manifest plus every accepted lyric line.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub artists: Vec<Artist>,
    pub lines: Vec<Line>,
}

impl Corpus {
    /// Build from in-memory text, one `(key, name, genre, raw lines)` entry per artist.
    pub fn from_raw<I, S>(artists: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String, Option<String>, Vec<S>)>,
        S: AsRef<str>,
    {
        let mut out = Corpus {
            artists: Vec::new(),
            lines: Vec::new(),
        };
        for (index, (key, name, genre, raw)) in artists.into_iter().enumerate() {
            let id = ArtistId(index);
            out.artists.push(Artist { id, key, name, genre });
            out.lines.extend(raw.iter().filter_map(|r| Line::new(r.as_ref(), id)));
        }
        if out.artists.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "a corpus needs at least two artists, found {}",
                out.artists.len()
            )));
        }
        if out.lines.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(out)
    }

    /// Load `root/artists.tsv` and `root/artists/<key>/lyrics.txt`.
    pub fn load(root: &Path) -> Result<Self> {
        let artists = read_manifest(root)?;
        let mut entries = Vec::with_capacity(artists.len());
        for (key, name, genre) in artists {
            let path = root.join("artists").join(&key).join("lyrics.txt");
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let lines: Vec<String> = text.lines().map(str::to_string).collect();
            entries.push((key, name, genre, lines));
        }
        Self::from_raw(entries)
    }

    pub fn num_artists(&self) -> usize {
        self.artists.len()
    }

    pub fn artist_by_name(&self, name: &str) -> Option<&Artist> {
        self.artists.iter().find(|a| a.name == name || a.key == name)
    }

    pub fn lines_of(&self, artist: ArtistId) -> impl Iterator<Item = &Line> {
        self.lines.iter().filter(move |l| l.artist == artist)
    }

    /// Write the on-disk layout read by [`Corpus::load`].
    pub fn save(&self, root: &Path) -> Result<()> {
        let mut manifest = String::new();
        for a in &self.artists {
            manifest.push_str(&format!("{}\t{}\t{}\n", a.key, a.name, a.genre.as_deref().unwrap_or("")));
            let dir = root.join("artists").join(&a.key);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let body: String = self.lines_of(a.id).map(|l| format!("{}\n", l.raw)).collect();
            let path = dir.join("lyrics.txt");
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        let path = root.join("artists.tsv");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }
}

/// `(directory key, display name, genre)` rows of `artists.tsv`; `#` starts a comment.
pub fn read_manifest(root: &Path) -> Result<Vec<(String, String, Option<String>)>> {
    let path = root.join("artists.tsv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut rows = Vec::new();
    for (n, row) in text.lines().enumerate() {
        let row = row.trim_end_matches('\r');
        if row.trim().is_empty() || row.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = row.split('\t').collect();
        if fields.len() < 2 || fields[0].is_empty() {
            return Err(Error::InvalidInput(format!("{}:{}: expected `dir<TAB>name[<TAB>genre]`", path.display(), n + 1)));
        }
        let genre = fields.get(2).map(|g| g.trim()).filter(|g| !g.is_empty()).map(str::to_string);
        rows.push((fields[0].to_string(), fields[1].to_string(), genre));
    }
    Ok(rows)
}
