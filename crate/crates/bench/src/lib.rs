//! Workloads shared by the benchmarks.

use lyra_core::corpus::{build_vocabulary, encode_line, EncodedLine};
use lyra_core::dsp::{AudioClip, SongId, CLIP_SECONDS};
use lyra_core::fixtures::{fixture_config, fixture_corpus, tone_song, FIXTURE_SAMPLE_RATE};
use lyra_core::nn::seeded;
use lyra_core::{ArtistId, VaeModel};

/// A 10-second fixture tone at the fixture sample rate.
pub fn tone_clip() -> AudioClip {
    let samples = tone_song(440.0, CLIP_SECONDS, FIXTURE_SAMPLE_RATE, &mut seeded(0));
    AudioClip {
        samples,
        sample_rate: FIXTURE_SAMPLE_RATE,
        song_id: SongId("bench".into()),
        artist: ArtistId(0),
        clip_index: 0,
    }
}

/// Tokenised fixture lines of artist 0 and artist 1.
pub fn fixture_token_lines() -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let corpus = fixture_corpus(0);
    let of = |a| corpus.lines_of(ArtistId(a)).map(|l| l.tokens.clone()).collect();
    (of(0), of(1))
}

/// An untrained fixture-sized onehot VAE and its encoded training lines.
pub fn fixture_vae() -> (VaeModel, Vec<EncodedLine>) {
    let corpus = fixture_corpus(0);
    let config = fixture_config(1, 1);
    let vocab = build_vocabulary(&corpus.lines, config.corpus.min_count).expect("fixture vocabulary");
    let lines = corpus
        .lines
        .iter()
        .map(|l| encode_line(l, &vocab, config.corpus.max_line_len).expect("fixture line"))
        .collect();
    let vae = lyra_core::VaeConfig {
        mode: lyra_core::ConditioningMode::OneHot,
        ..config.vae
    };
    (VaeModel::new(vae, vocab, 2, None, 0).expect("fixture model"), lines)
}
