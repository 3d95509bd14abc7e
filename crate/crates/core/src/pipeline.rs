//! End-to-end stages: audio preparation, spectrogram classifier, VAE training
//! and evaluation. Every stage writes its outputs under the run's output
//! directory and records them in a manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{spectrograms_from_container, spectrograms_to_container, Container, VaeCheckpoint};
use crate::config::{resolve_data_root, unix_now, RunConfig, RunManifest, RunPaths, DATA_DIR_ENV};
use crate::corpus::{
    build_vocabulary, encode_line, read_manifest, split_corpus, tokenize_line, Artist, ArtistId, Corpus, EncodedLine, Line,
    Split,
};
use crate::dsp::{decode_wav, grouped_split, mel_spectrogram, segment_clips, songs_crossing_partitions, SongId, Spectrogram};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate_runs, embedding_cosine_table, style_accuracy, train_style_classifier, uniqueness, verbatim_copy_rate,
    EvalReport, ModelMetrics, StyleTrainReport, TextCnn,
};
use crate::ngram::{diag_argmin_count, fit_kn_with_discount, nll_matrix, KneserNeyModel};
use crate::spectro::{extract_artist_embeddings, train_spectro_classifier, ArtistEmbeddingMatrix, SpectroTrainReport};
use crate::vae::{generate, train_vae, ConditioningMode, TrainHistory, VaeModel};

/// A validated config bound to a data root.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: RunConfig,
    pub paths: RunPaths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepAudioSummary {
    pub songs: usize,
    pub clips: usize,
    /// Songs shorter than one clip.
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectroSummary {
    pub report: SpectroTrainReport,
    pub partition_sizes: (usize, usize, usize),
    pub crossing_songs: Vec<SongId>,
}

#[derive(Debug, Clone)]
pub struct VaeRun {
    pub seed: u64,
    pub path: PathBuf,
    pub history: TrainHistory,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub aggregate: EvalReport,
    pub runs: Vec<EvalReport>,
    pub classifier: StyleTrainReport,
    /// `(mode, seed)` → generated lines per artist.
    pub generated: Vec<(ConditioningMode, u64, Vec<Vec<String>>)>,
}

/// Seed for the lines generated for `artist` by the run seeded with `seed`.
pub fn generation_seed(seed: u64, artist: ArtistId) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(artist.0 as u64)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

impl Pipeline {
    pub fn new(config: RunConfig, data_root: &Path) -> Result<Self> {
        config.validate()?;
        let paths = config.paths(data_root);
        Ok(Pipeline { config, paths })
    }

    /// Loads a config file; the data root is `$LYRA_DATA_DIR` or the file's directory.
    pub fn from_config_file(path: &Path) -> Result<Self> {
        let config = RunConfig::load(path)?;
        let root = resolve_data_root(std::env::var_os(DATA_DIR_ENV), path.parent());
        Self::new(config, &root)
    }

    pub fn corpus(&self) -> Result<Corpus> {
        Corpus::load(&self.paths.corpus)
    }

    pub fn artist_names(corpus: &Corpus) -> Vec<String> {
        corpus.artists.iter().map(|a| a.name.clone()).collect()
    }

    pub fn split(&self, corpus: &Corpus) -> Result<Split<Line>> {
        split_corpus(&corpus.lines, self.config.corpus.split, self.config.corpus.split_seed)
    }

    fn finish(&self, mut manifest: RunManifest, outputs: &[PathBuf], metrics: serde_json::Value) -> Result<()> {
        for p in outputs {
            manifest.record_output(&self.paths.output, p)?;
        }
        manifest.metrics = metrics;
        manifest.finished_unix = unix_now();
        let path = self.paths.manifest(&manifest.stage);
        write(&path, serde_json::to_string_pretty(&manifest)?)
    }

    /// Decode every `artists/<key>/audio/*.wav`, cut 10-second clips and cache their spectrograms.
    pub fn prep_audio(&self) -> Result<PrepAudioSummary> {
        let manifest = RunManifest::new("prep-audio", &self.config, unix_now());
        let artists = read_manifest(&self.paths.corpus)?;
        let mut spectrograms = Vec::new();
        let mut summary = PrepAudioSummary {
            songs: 0,
            clips: 0,
            skipped: Vec::new(),
        };
        for (index, (key, name, _)) in artists.iter().enumerate() {
            let dir = self.paths.audio.join("artists").join(key).join("audio");
            let files = wav_files(&dir)?;
            if files.is_empty() {
                return Err(Error::InvalidInput(format!("no audio files for artist {name} in {}", dir.display())));
            }
            for file in files {
                let rel = file.strip_prefix(&self.paths.audio).unwrap_or(&file);
                let song = SongId(rel.to_string_lossy().replace('\\', "/"));
                let bytes = std::fs::read(&file).map_err(|e| Error::io(&file, e))?;
                let audio = decode_wav(&bytes)?;
                let clips = segment_clips(&audio.samples, audio.sample_rate, &song, ArtistId(index));
                if clips.is_empty() {
                    summary.skipped.push(song.0);
                    continue;
                }
                summary.songs += 1;
                for clip in &clips {
                    spectrograms.push(mel_spectrogram(clip, &self.config.audio.spectrogram)?);
                }
            }
        }
        summary.clips = spectrograms.len();
        let cache = self.paths.spectrogram_cache();
        spectrograms_to_container(&spectrograms)?.save(&cache)?;
        self.finish(manifest, &[cache], serde_json::to_value(&summary)?)?;
        Ok(summary)
    }

    pub fn load_spectrograms(&self) -> Result<Vec<Spectrogram>> {
        spectrograms_from_container(&Container::load(&self.paths.spectrogram_cache())?)
    }

    /// Train the spectrogram classifier on a song-grouped split and export its artist embeddings.
    pub fn train_spectro(&self) -> Result<(SpectroSummary, ArtistEmbeddingMatrix)> {
        let manifest = RunManifest::new("train-spectro", &self.config, unix_now());
        let names: Vec<String> = read_manifest(&self.paths.corpus)?.into_iter().map(|(_, n, _)| n).collect();
        let spectrograms = self.load_spectrograms()?;
        let split = grouped_split(&spectrograms, self.config.audio.split, self.config.audio.split_seed)?;
        let crossing: Vec<SongId> = songs_crossing_partitions(&split).into_iter().collect();
        if !crossing.is_empty() {
            return Err(Error::CannotGroupSplit(format!("{} songs cross partitions", crossing.len())));
        }
        let (model, report) = train_spectro_classifier(&split, names.len(), &self.config.spectro, self.config.audio.seed)?;
        let embeddings = extract_artist_embeddings(&model, &split.train)?;
        let summary = SpectroSummary {
            report,
            partition_sizes: (split.train.len(), split.valid.len(), split.test.len()),
            crossing_songs: crossing,
        };
        let tsv = self.paths.embeddings_tsv();
        write(&tsv, embeddings.to_tsv(&names)?)?;
        let report_path = self.paths.spectro_report();
        write(&report_path, serde_json::to_string_pretty(&summary)?)?;
        self.finish(manifest, &[tsv, report_path], serde_json::to_value(&summary.report)?)?;
        Ok((summary, embeddings))
    }

    pub fn load_embeddings(&self, names: &[String]) -> Result<ArtistEmbeddingMatrix> {
        let path = self.paths.embeddings_tsv();
        if !path.exists() {
            return Err(Error::AudioEmbeddingsRequired);
        }
        ArtistEmbeddingMatrix::load_tsv(&path, names)
    }

    /// Training lines encoded against the training vocabulary.
    pub fn training_data(&self, corpus: &Corpus) -> Result<(crate::corpus::Vocabulary, Vec<EncodedLine>)> {
        let split = self.split(corpus)?;
        let vocab = build_vocabulary(&split.train, self.config.corpus.min_count)?;
        let encoded = split
            .train
            .iter()
            .map(|l| encode_line(l, &vocab, self.config.corpus.max_line_len))
            .collect::<Result<Vec<_>>>()?;
        Ok((vocab, encoded))
    }

    /// One checkpoint per configured seed, weights rounded to their stored precision.
    pub fn train_vae(&self, mode: ConditioningMode) -> Result<Vec<VaeRun>> {
        let mut manifest = RunManifest::new(&format!("train-vae-{mode}"), &self.config, unix_now());
        let corpus = self.corpus()?;
        let names = Self::artist_names(&corpus);
        let embeddings = if mode.needs_audio() {
            Some(self.load_embeddings(&names)?)
        } else {
            None
        };
        let (vocab, lines) = self.training_data(&corpus)?;
        let config = crate::vae::VaeConfig {
            mode,
            ..self.config.vae.clone()
        };
        let mut runs = Vec::with_capacity(self.config.seeds.len());
        for &seed in &self.config.seeds {
            let mut model = VaeModel::new(config.clone(), vocab.clone(), names.len(), embeddings.as_ref(), seed)?;
            let history = train_vae(&mut model, &lines, seed)?;
            model.store.round_to_f32();
            let path = self.paths.checkpoint(mode, seed);
            VaeCheckpoint {
                model,
                artists: corpus.artists.clone(),
                seed,
            }
            .save(&path)?;
            runs.push(VaeRun { seed, path, history });
        }
        let outputs: Vec<PathBuf> = runs.iter().map(|r| r.path.clone()).collect();
        let metrics: Vec<serde_json::Value> = runs
            .iter()
            .map(|r| {
                serde_json::json!({
                    "seed": r.seed,
                    "final_recon": r.history.tail_mean(50, |s| s.recon),
                    "final_kl": r.history.tail_mean(50, |s| s.kl),
                })
            })
            .collect();
        manifest.seeds = self.config.seeds.clone();
        self.finish(manifest, &outputs, serde_json::Value::Array(metrics))?;
        Ok(runs)
    }

    pub fn load_checkpoint(&self, mode: ConditioningMode, seed: u64) -> Result<VaeCheckpoint> {
        VaeCheckpoint::load(&self.paths.checkpoint(mode, seed))
    }

    /// Score every configured mode and seed, then average over seeds.
    pub fn evaluate(&self) -> Result<Evaluation> {
        let manifest = RunManifest::new("evaluate", &self.config, unix_now());
        let corpus = self.corpus()?;
        let names = Self::artist_names(&corpus);
        let split = self.split(&corpus)?;
        let ev = &self.config.evaluation;
        let (classifier, classifier_report) =
            train_style_classifier(&split, names.len(), ev.text_cnn.clone(), ev.classifier_seed)?;
        let lms = self.artist_language_models(&split, names.len())?;
        let training_raw: Vec<&str> = split.train.iter().map(|l| l.raw.as_str()).collect();
        let cosine = match self.load_embeddings(&names) {
            Ok(e) => Some(embedding_cosine_table(&e)?),
            Err(Error::AudioEmbeddingsRequired) => None,
            Err(e) => return Err(e),
        };

        let mut runs = Vec::with_capacity(self.config.seeds.len());
        let mut generated_all = Vec::new();
        for &seed in &self.config.seeds {
            let mut models = Vec::with_capacity(ev.modes.len());
            for &mode in &ev.modes {
                let ckpt = self.load_checkpoint(mode, seed)?;
                if ckpt.artists.iter().map(|a| &a.name).ne(names.iter()) {
                    return Err(Error::SchemaMismatch(format!("checkpoint {mode}/seed {seed} has a different artist manifest")));
                }
                let generated = generate_per_artist(&ckpt.model, names.len(), ev.lines_per_artist, ev.temperature, seed)?;
                models.push(score_model(mode, &names, &generated, &classifier, &lms, &training_raw)?);
                generated_all.push((mode, seed, generated));
            }
            runs.push(EvalReport {
                artists: names.clone(),
                models,
                classifier_test_accuracy: classifier_report.test_accuracy,
                classifier_majority_baseline: classifier_report.majority_baseline,
                cosine: cosine.clone(),
                seeds: vec![seed],
                aggregation: "single".into(),
            });
        }
        let mut aggregate = aggregate_runs(&runs)?;
        aggregate.aggregation = if runs.len() == 1 { "single".into() } else { "mean".into() };
        aggregate.validate()?;

        let mut outputs = Vec::new();
        let report_path = self.paths.eval_report();
        write(&report_path, aggregate.to_json()?)?;
        outputs.push(report_path);
        let runs_path = self.paths.output.join("eval_runs.json");
        write(&runs_path, serde_json::to_string_pretty(&runs)?)?;
        outputs.push(runs_path);
        for m in &aggregate.models {
            let p = self.paths.nll_tsv(m.mode);
            write(&p, m.nll.to_tsv())?;
            outputs.push(p);
        }
        self.finish(manifest, &outputs, serde_json::to_value(&aggregate)?)?;
        Ok(Evaluation {
            aggregate,
            runs,
            classifier: classifier_report,
            generated: generated_all,
        })
    }

    /// One Kneser-Ney trigram model per artist over its training lines.
    pub fn artist_language_models(&self, split: &Split<Line>, artists: usize) -> Result<Vec<KneserNeyModel>> {
        (0..artists)
            .map(|a| {
                let lines: Vec<&Vec<String>> = split.train.iter().filter(|l| l.artist.0 == a).map(|l| &l.tokens).collect();
                if lines.is_empty() {
                    return Err(Error::MissingArtist(a.to_string()));
                }
                let owned: Vec<Vec<String>> = lines.into_iter().cloned().collect();
                fit_kn_with_discount(&owned, self.config.ngram.discount)
            })
            .collect()
    }
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    Ok(files)
}

/// `n` lines for each artist, each artist with its own derived seed.
pub fn generate_per_artist(
    model: &VaeModel,
    artists: usize,
    n: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<Vec<String>>> {
    (0..artists)
        .map(|a| {
            let artist = ArtistId(a);
            generate(model, artist, n, temperature, model.config.max_decode_len, generation_seed(seed, artist))
        })
        .collect()
}

/// Metrics of one model's generated lines. Empty lines count for style accuracy
/// and uniqueness but are not scored by the language models.
pub fn score_model(
    mode: ConditioningMode,
    names: &[String],
    generated: &[Vec<String>],
    classifier: &TextCnn,
    lms: &[KneserNeyModel],
    training_raw: &[&str],
) -> Result<ModelMetrics> {
    let labelled: Vec<(String, ArtistId)> = generated
        .iter()
        .enumerate()
        .flat_map(|(a, lines)| lines.iter().map(move |l| (l.clone(), ArtistId(a))))
        .collect();
    let flat: Vec<&str> = labelled.iter().map(|(l, _)| l.as_str()).collect();
    let tokenized: Vec<Vec<Vec<String>>> = generated
        .iter()
        .map(|lines| lines.iter().map(|l| tokenize_line(l)).filter(|t| !t.is_empty()).collect())
        .collect();
    let nll = nll_matrix(names, &tokenized, lms)?;
    Ok(ModelMetrics {
        mode,
        style_accuracy: style_accuracy(classifier, &labelled)?,
        diag_argmin_count: diag_argmin_count(&nll) as f64,
        nll,
        uniqueness: uniqueness(&flat)?,
        verbatim_copy_rate: verbatim_copy_rate(&flat, training_raw)?,
    })
}

/// Resolves an artist by display name or directory key.
pub fn find_artist<'a>(artists: &'a [Artist], name: &str) -> Result<&'a Artist> {
    artists
        .iter()
        .find(|a| a.name == name || a.key == name)
        .ok_or_else(|| Error::InvalidArtist(name.to_string()))
}
