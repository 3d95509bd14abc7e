//! Run configuration (a single JSON document) and run manifests.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{SplitFractions, DEFAULT_MAX_LINE_LEN, DEFAULT_MIN_COUNT};
use crate::dsp::SpectrogramParams;
use crate::error::{Error, Result};
use crate::eval::TextCnnConfig;
use crate::ngram::DISCOUNT;
use crate::spectro::SpectroCnnConfig;
use crate::vae::{ConditioningMode, VaeConfig};

/// Environment variable that overrides the data root.
pub const DATA_DIR_ENV: &str = "LYRA_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub min_count: usize,
    pub max_line_len: usize,
    pub split: SplitFractions,
    pub split_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            min_count: DEFAULT_MIN_COUNT,
            max_line_len: DEFAULT_MAX_LINE_LEN,
            split: SplitFractions::default(),
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AudioConfig {
    pub spectrogram: SpectrogramParams,
    pub split: SplitFractions,
    pub split_seed: u64,
    pub seed: u64,
}

impl Default for AudioConfig {
    fn default() -> Self {
        AudioConfig {
            spectrogram: SpectrogramParams::default(),
            split: SplitFractions::default(),
            split_seed: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NgramConfig {
    pub discount: f64,
}

impl Default for NgramConfig {
    fn default() -> Self {
        NgramConfig { discount: DISCOUNT }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub text_cnn: TextCnnConfig,
    pub classifier_seed: u64,
    pub lines_per_artist: usize,
    pub temperature: f64,
    pub modes: Vec<ConditioningMode>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            text_cnn: TextCnnConfig::default(),
            classifier_seed: 0,
            lines_per_artist: 100,
            temperature: 1.0,
            modes: ConditioningMode::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Directory holding `artists.tsv` and `artists/<key>/`; relative paths resolve against the data root.
    pub corpus_dir: PathBuf,
    /// Root of `artists/<key>/audio/*.wav`; defaults to `corpus_dir`.
    pub audio_dir: Option<PathBuf>,
    /// Where caches, embeddings, checkpoints and reports are written.
    pub output_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub audio: AudioConfig,
    pub spectro: SpectroCnnConfig,
    pub vae: VaeConfig,
    pub ngram: NgramConfig,
    pub evaluation: EvalConfig,
    /// One seed per run instance.
    pub seeds: Vec<u64>,
    pub runs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus_dir: PathBuf::from("corpus"),
            audio_dir: None,
            output_dir: PathBuf::from("runs"),
            corpus: CorpusConfig::default(),
            audio: AudioConfig::default(),
            spectro: SpectroCnnConfig::default(),
            vae: VaeConfig::default(),
            ngram: NgramConfig::default(),
            evaluation: EvalConfig::default(),
            seeds: vec![1, 2, 3, 4, 5],
            runs: 5,
        }
    }
}

/// Absolute locations derived from a config and a data root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPaths {
    pub corpus: PathBuf,
    pub audio: PathBuf,
    pub output: PathBuf,
}

impl RunPaths {
    pub fn spectrogram_cache(&self) -> PathBuf {
        self.output.join("spectrograms.ckpt")
    }

    pub fn embeddings_tsv(&self) -> PathBuf {
        self.output.join("artist_embeddings.tsv")
    }

    pub fn spectro_report(&self) -> PathBuf {
        self.output.join("spectro_report.json")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output.join("checkpoints")
    }

    pub fn checkpoint(&self, mode: ConditioningMode, seed: u64) -> PathBuf {
        self.checkpoint_dir().join(format!("vae-{mode}-seed{seed}.ckpt"))
    }

    pub fn eval_report(&self) -> PathBuf {
        self.output.join("eval_report.json")
    }

    pub fn nll_tsv(&self, mode: ConditioningMode) -> PathBuf {
        self.output.join(format!("nll-{mode}.tsv"))
    }

    pub fn manifest(&self, stage: &str) -> PathBuf {
        self.output.join(format!("manifest-{stage}.json"))
    }
}

/// `env` if set and nonempty, else the config file's directory, else `.`.
pub fn resolve_data_root(env: Option<OsString>, config_dir: Option<&Path>) -> PathBuf {
    match env {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => config_dir.map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 || self.seeds.len() != self.runs {
            return Err(Error::InvalidConfig(format!(
                "{} seeds for {} runs; exactly one seed per run is required",
                self.seeds.len(),
                self.runs
            )));
        }
        if self.corpus.min_count == 0 || self.corpus.max_line_len == 0 {
            return Err(Error::InvalidConfig("min_count and max_line_len must be at least 1".into()));
        }
        self.corpus.split.validate()?;
        self.audio.split.validate()?;
        self.spectro.validate()?;
        self.vae.validate()?;
        self.evaluation.text_cnn.validate()?;
        if !(self.ngram.discount > 0.0 && self.ngram.discount < 1.0) {
            return Err(Error::InvalidConfig(format!("discount {} outside (0, 1)", self.ngram.discount)));
        }
        if self.evaluation.lines_per_artist == 0 {
            return Err(Error::InvalidConfig("lines_per_artist must be at least 1".into()));
        }
        if !(0.0..=2.0).contains(&self.evaluation.temperature) {
            return Err(Error::InvalidConfig("temperature must lie in [0, 2]".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn paths(&self, data_root: &Path) -> RunPaths {
        let corpus = data_root.join(&self.corpus_dir);
        let audio = self.audio_dir.as_ref().map_or_else(|| corpus.clone(), |a| data_root.join(a));
        RunPaths {
            corpus,
            audio,
            output: data_root.join(&self.output_dir),
        }
    }

    /// Git-style content hash: SHA-256 over `"blob <len>\0"` followed by the compact JSON.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        sha256_hex(&[format!("blob {}\0", json.len()).as_bytes(), &json])
    }
}

pub fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&[&bytes]))
}

/// What a pipeline stage consumed and produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    /// Output path (relative to the output directory) → SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
    pub metrics: serde_json::Value,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub version: String,
}

impl RunManifest {
    pub fn new(stage: &str, config: &RunConfig, started_unix: u64) -> Self {
        RunManifest {
            stage: stage.to_string(),
            config_hash: config.content_hash(),
            config: config.clone(),
            seeds: config.seeds.clone(),
            outputs: BTreeMap::new(),
            metrics: serde_json::Value::Null,
            started_unix,
            finished_unix: started_unix,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn record_output(&mut self, output_dir: &Path, path: &Path) -> Result<()> {
        let rel = path.strip_prefix(output_dir).unwrap_or(path);
        self.outputs.insert(rel.to_string_lossy().into_owned(), file_hash(path)?);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: RunManifest = serde_json::from_str(&text)?;
        if m.config.content_hash() != m.config_hash {
            return Err(Error::SchemaMismatch("manifest config does not match its hash".into()));
        }
        Ok(m)
    }
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_losslessly() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json().unwrap(), c.to_json().unwrap());
        assert_eq!(c.runs, 5);
        assert_eq!(c.vae.anneal.total_steps, 3000);
    }

    #[test]
    fn partial_documents_take_defaults() {
        let c = RunConfig::from_json(r#"{"vae": {"mode": "randNT", "latent_dim": 8}, "seeds": [9], "runs": 1}"#).unwrap();
        assert_eq!(c.vae.mode, ConditioningMode::RandomFrozen);
        assert_eq!(c.vae.latent_dim, 8);
        assert_eq!(c.vae.word_dropout, 0.5);
        assert_eq!(c.corpus, CorpusConfig::default());
    }

    #[test]
    fn odd_floats_round_trip() {
        let mut c = RunConfig::default();
        c.vae.learning_rate = 0.1 + 0.2;
        c.audio.spectrogram.fmax = Some(3999.999_999_999_7);
        assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
    }

    #[test]
    fn seeds_must_match_runs() {
        let c = RunConfig {
            seeds: vec![1, 2],
            ..RunConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        assert!(RunConfig::from_json(r#"{"vae": {"mode": "audio"}}"#).is_err());
    }

    #[test]
    fn data_root_resolution() {
        assert_eq!(resolve_data_root(Some("/data".into()), Some(Path::new("/cfg"))), PathBuf::from("/data"));
        assert_eq!(resolve_data_root(Some("".into()), Some(Path::new("/cfg"))), PathBuf::from("/cfg"));
        assert_eq!(resolve_data_root(None, None), PathBuf::from("."));
        let p = RunConfig::default().paths(Path::new("/d"));
        assert_eq!(p.audio, PathBuf::from("/d/corpus"));
        assert_eq!(
            p.checkpoint(ConditioningMode::AudioFrozen, 3),
            PathBuf::from("/d/runs/checkpoints/vae-audioNT-seed3.ckpt")
        );
    }

    #[test]
    fn content_hash_tracks_changes() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.content_hash(), b.content_hash());
        b.vae.steps += 1;
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash().len(), 64);
        assert_eq!(sha256_hex(&[b"abc"]), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("x.txt");
        std::fs::write(&out, "hello").unwrap();
        let mut m = RunManifest::new("evaluate", &RunConfig::default(), 10);
        m.record_output(dir.path(), &out).unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(back, m);
        assert!(back.outputs.contains_key("x.txt"));
    }
}
