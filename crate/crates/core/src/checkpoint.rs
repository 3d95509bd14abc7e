//! Binary container for model parameters and cached spectrograms.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic          8 bytes   "LYRACKPT"
//! version        u32       FORMAT_VERSION
//! meta_len       u64
//! metadata       meta_len bytes of UTF-8 JSON
//! tensor_count   u32
//! per tensor:
//!   name_len     u32
//!   name         name_len bytes of UTF-8
//!   trainable    u8        0 or 1
//!   ndim         u32
//!   dims         ndim × u64
//!   data         product(dims) × f32
//! ```
//!
//! Nothing may follow the last tensor. Values are stored as `f32`; loading
//! widens them back to `f64`, so a saved model reloads to its `f32`-rounded self.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::corpus::{Artist, Vocabulary};
use crate::dsp::{Matrix, SongId, Spectrogram, SpectrogramParams};
use crate::corpus::ArtistId;
use crate::error::{Error, Result};
use crate::spectro::{ArtistEmbeddingMatrix, EmbeddingProvenance};
use crate::vae::{VaeConfig, VaeModel};

pub const MAGIC: &[u8; 8] = b"LYRACKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Metadata plus named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub metadata: serde_json::Value,
    pub tensors: ParamStore,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidCheckpoint(msg.into())
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.metadata)?;
        let mut out = Vec::with_capacity(meta.len() + 64 + self.tensors.num_scalars() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.tensors.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(u8::from(t.requires_grad));
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported version {version}, expected {FORMAT_VERSION}")));
        }
        let meta_len = usize::try_from(r.u64()?).map_err(|_| bad("metadata too large"))?;
        let metadata: serde_json::Value =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| bad(format!("metadata: {e}")))?;
        let count = r.u32()?;
        let mut tensors = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| bad("tensor name is not UTF-8"))?.to_string();
            let trainable = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(bad(format!("bad trainable flag {b}"))),
            };
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(usize::try_from(r.u64()?).map_err(|_| bad("dimension too large"))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| bad("tensor too large"))?;
            let data: Vec<f64> = r
                .take(n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if tensors.id(&name).is_some() {
                return Err(bad(format!("duplicate tensor {name}")));
            }
            let mut t = Tensor::new(&shape, data)?;
            t.requires_grad = trainable;
            tensors.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Container { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub const VAE_KIND: &str = "vae";
pub const SPECTROGRAM_KIND: &str = "spectrograms";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeMetadata {
    pub kind: String,
    pub config: VaeConfig,
    pub vocabulary: Vec<String>,
    pub min_count: usize,
    pub artists: Vec<Artist>,
    pub provenance: EmbeddingProvenance,
    pub seed: u64,
}

/// A VAE together with the artist manifest it was trained on.
#[derive(Debug, Clone)]
pub struct VaeCheckpoint {
    pub model: VaeModel,
    pub artists: Vec<Artist>,
    pub seed: u64,
}

impl VaeCheckpoint {
    pub fn to_container(&self) -> Container {
        let m = &self.model;
        let meta = VaeMetadata {
            kind: VAE_KIND.into(),
            config: m.config.clone(),
            vocabulary: m.vocab.tokens().to_vec(),
            min_count: m.vocab.min_count,
            artists: self.artists.clone(),
            provenance: m.provenance,
            seed: self.seed,
        };
        Container {
            metadata: serde_json::to_value(meta).expect("metadata serializes"),
            tensors: m.store.clone(),
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let meta: VaeMetadata =
            serde_json::from_value(c.metadata).map_err(|e| bad(format!("VAE metadata: {e}")))?;
        if meta.kind != VAE_KIND {
            return Err(bad(format!("expected a {VAE_KIND} checkpoint, found {}", meta.kind)));
        }
        let vocab = Vocabulary::from_tokens(meta.vocabulary, meta.min_count)?;
        let model = VaeModel::from_store(meta.config, vocab, meta.artists.len(), c.tensors, meta.provenance)?;
        Ok(VaeCheckpoint {
            model,
            artists: meta.artists,
            seed: meta.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClipMeta {
    song_id: SongId,
    artist: ArtistId,
    clip_index: usize,
    sample_rate: u32,
    params: SpectrogramParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SpectrogramMetadata {
    kind: String,
    clips: Vec<ClipMeta>,
}

/// Cache of clip spectrograms; tensor `clip/<i>` holds clip `i`.
pub fn spectrograms_to_container(items: &[Spectrogram]) -> Result<Container> {
    let mut tensors = ParamStore::new();
    let mut clips = Vec::with_capacity(items.len());
    for (i, s) in items.iter().enumerate() {
        let t = Tensor::new(&[s.values.rows, s.values.cols], s.values.data.clone())?.frozen();
        tensors.insert(format!("clip/{i}"), t);
        clips.push(ClipMeta {
            song_id: s.song_id.clone(),
            artist: s.artist,
            clip_index: s.clip_index,
            sample_rate: s.sample_rate,
            params: s.params,
        });
    }
    let meta = SpectrogramMetadata {
        kind: SPECTROGRAM_KIND.into(),
        clips,
    };
    Ok(Container {
        metadata: serde_json::to_value(meta)?,
        tensors,
    })
}

pub fn spectrograms_from_container(c: &Container) -> Result<Vec<Spectrogram>> {
    let meta: SpectrogramMetadata =
        serde_json::from_value(c.metadata.clone()).map_err(|e| bad(format!("spectrogram metadata: {e}")))?;
    if meta.kind != SPECTROGRAM_KIND {
        return Err(bad(format!("expected a {SPECTROGRAM_KIND} container, found {}", meta.kind)));
    }
    let mut out = Vec::with_capacity(meta.clips.len());
    for (i, clip) in meta.clips.into_iter().enumerate() {
        let t = c.tensors.by_name(&format!("clip/{i}")).ok_or_else(|| bad(format!("missing clip/{i}")))?;
        let &[rows, cols] = t.shape() else {
            return Err(bad(format!("clip/{i} is not 2-D")));
        };
        out.push(Spectrogram {
            values: Matrix {
                rows,
                cols,
                data: t.data().to_vec(),
            },
            song_id: clip.song_id,
            artist: clip.artist,
            clip_index: clip.clip_index,
            sample_rate: clip.sample_rate,
            params: clip.params,
        });
    }
    Ok(out)
}

/// Artist embeddings as a single-tensor container.
pub fn embeddings_to_container(e: &ArtistEmbeddingMatrix, names: &[String]) -> Container {
    let mut tensors = ParamStore::new();
    tensors.insert("artist_embedding", e.matrix.clone());
    Container {
        metadata: serde_json::json!({ "kind": "artist_embedding", "provenance": e.provenance, "artists": names }),
        tensors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SPECIAL_TOKENS;
    use crate::nn::seeded;
    use crate::vae::{generate, ConditioningMode};

    fn checkpoint() -> VaeCheckpoint {
        let tokens = SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain((0..10).map(|i| format!("w{i}"))).collect();
        let vocab = Vocabulary::from_tokens(tokens, 2).unwrap();
        let config = VaeConfig {
            word_emb_dim: 6,
            encoder_hidden: 5,
            latent_dim: 4,
            decoder_hidden: 7,
            artist_emb_dim: 3,
            mode: ConditioningMode::RandomFrozen,
            ..VaeConfig::default()
        };
        let mut model = VaeModel::new(config, vocab, 2, None, 1).unwrap();
        model.store.round_to_f32();
        let artists = (0..2)
            .map(|i| Artist {
                id: ArtistId(i),
                key: format!("a{i}"),
                name: format!("Artist {i}"),
                genre: (i == 0).then(|| "Rock".to_string()),
            })
            .collect();
        VaeCheckpoint { model, artists, seed: 5 }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = checkpoint();
        let bytes = ck.to_container().to_bytes().unwrap();
        let back = VaeCheckpoint::from_container(Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.model.store, ck.model.store);
        assert_eq!(back.artists, ck.artists);
        assert_eq!(back.to_container().to_bytes().unwrap(), bytes);
        assert!(!back.model.artist_embeddings().requires_grad);
    }

    #[test]
    fn generation_survives_round_trip() {
        let ck = checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = VaeCheckpoint::load(&path).unwrap();
        for temp in [0.0, 1.0] {
            assert_eq!(
                generate(&ck.model, ArtistId(1), 6, temp, 10, 7).unwrap(),
                generate(&back.model, ArtistId(1), 6, temp, 10, 7).unwrap()
            );
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = checkpoint().to_container().to_bytes().unwrap();
        for cut in [0, 4, 11, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = Container::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(err.to_string().starts_with("invalid checkpoint"), "{err}");
        }
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Container::from_bytes(&magic), Err(Error::InvalidCheckpoint(_))));
        let mut version = bytes.clone();
        version[8] = 9;
        assert!(Container::from_bytes(&version).unwrap_err().to_string().contains("version"));
        let mut extra = bytes;
        extra.push(0);
        assert!(Container::from_bytes(&extra).is_err());
    }

    #[test]
    fn spectrogram_cache_round_trip() {
        let mut rng = seeded(0);
        let items: Vec<Spectrogram> = (0..3)
            .map(|i| {
                let t = Tensor::uniform(&[4, 5], 80.0, &mut rng);
                let mut data = t.into_data();
                for v in &mut data {
                    *v = (*v as f32) as f64;
                }
                Spectrogram {
                    values: Matrix { rows: 4, cols: 5, data },
                    song_id: SongId(format!("s{i}.wav")),
                    artist: ArtistId(i % 2),
                    clip_index: i,
                    sample_rate: 8000,
                    params: SpectrogramParams::default(),
                }
            })
            .collect();
        let c = spectrograms_to_container(&items).unwrap();
        let back = spectrograms_from_container(&Container::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, items);
    }
}
