//! JSON generation service over a directory of VAE checkpoints.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lyra_core::checkpoint::{Container, VaeCheckpoint, VAE_KIND};
use lyra_core::corpus::{Artist, ArtistId};
use lyra_core::nn::{seeded, SeededRng};
use lyra_core::vae::{generate, ConditioningMode};
use lyra_core::VaeModel;
use rand::Rng;
use serde::Serialize;
use serde_json::{json, Map, Value};

pub const MAX_COUNT: u64 = 100;
pub const MAX_TEMPERATURE: f64 = 2.0;

struct LoadedModel {
    checkpoint_id: String,
    model: Arc<VaeModel>,
}

/// Checkpoints loaded at startup. Models are never mutated afterwards.
pub struct Service {
    artists: Vec<Artist>,
    models: BTreeMap<ConditioningMode, LoadedModel>,
    seeds: Mutex<SeededRng>,
}

#[derive(Debug, Serialize)]
struct ArtistView<'a> {
    id: usize,
    name: &'a str,
    genre: Option<&'a str>,
}

#[derive(Debug, Serialize)]
struct ModelView<'a> {
    mode: ConditioningMode,
    checkpoint_id: &'a str,
}

#[derive(Debug, Serialize)]
pub struct GenerateResponse {
    pub lines: Vec<String>,
    pub seed_used: u64,
}

struct GenerateRequest {
    artist: ArtistId,
    mode: ConditioningMode,
    count: usize,
    temperature: f64,
    seed: Option<u64>,
}

#[derive(Debug)]
pub enum ApiError {
    Invalid(BTreeMap<String, String>),
    NotFound(String),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::Invalid(fields) => (StatusCode::BAD_REQUEST, json!({ "error": "validation failed", "fields": fields })),
            ApiError::NotFound(what) => (StatusCode::NOT_FOUND, json!({ "error": what })),
            ApiError::Internal(msg) => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": msg })),
        };
        (status, Json(body)).into_response()
    }
}

impl Service {
    /// Loads every VAE checkpoint (`*.ckpt`) in `dir`. When a mode has several,
    /// the first by file name is served.
    pub fn load_dir(dir: &Path, seed_source: u64) -> anyhow::Result<Self> {
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| anyhow::anyhow!("{}: {e}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
            .collect();
        files.sort();
        let mut checkpoints = Vec::new();
        for path in files {
            let container = Container::load(&path)?;
            if container.metadata.get("kind").and_then(Value::as_str) != Some(VAE_KIND) {
                continue;
            }
            let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            checkpoints.push((id, VaeCheckpoint::from_container(container)?));
        }
        Self::from_checkpoints(checkpoints, seed_source)
    }

    pub fn from_checkpoints(checkpoints: Vec<(String, VaeCheckpoint)>, seed_source: u64) -> anyhow::Result<Self> {
        let mut artists: Option<Vec<Artist>> = None;
        let mut models = BTreeMap::new();
        for (checkpoint_id, ckpt) in checkpoints {
            match &artists {
                None => artists = Some(ckpt.artists.clone()),
                Some(a) if *a != ckpt.artists => {
                    anyhow::bail!("checkpoint {checkpoint_id} was trained on a different artist manifest")
                }
                Some(_) => {}
            }
            models.entry(ckpt.model.config.mode).or_insert(LoadedModel {
                checkpoint_id,
                model: Arc::new(ckpt.model),
            });
        }
        let artists = artists.ok_or_else(|| anyhow::anyhow!("no VAE checkpoints found"))?;
        Ok(Service {
            artists,
            models,
            seeds: Mutex::new(seeded(seed_source)),
        })
    }

    fn next_seed(&self) -> u64 {
        // a poisoned lock still holds a usable generator
        let mut rng = self.seeds.lock().unwrap_or_else(|e| e.into_inner());
        rng.random()
    }

    fn validate(&self, body: &[u8]) -> Result<GenerateRequest, ApiError> {
        let mut errors = BTreeMap::new();
        let value: Value = match serde_json::from_slice(body) {
            Ok(v) => v,
            Err(e) => {
                errors.insert("body".to_string(), format!("invalid JSON: {e}"));
                return Err(ApiError::Invalid(errors));
            }
        };
        let Some(obj) = value.as_object() else {
            errors.insert("body".to_string(), "expected a JSON object".to_string());
            return Err(ApiError::Invalid(errors));
        };
        let artist = uint_field(obj, "artist_id", &mut errors);
        let mode = match obj.get("mode") {
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => {
                errors.insert("mode".into(), "must be a string".into());
                None
            }
            None => {
                errors.insert("mode".into(), "is required".into());
                None
            }
        };
        let count = uint_field(obj, "count", &mut errors);
        if let Some(c) = count {
            if !(1..=MAX_COUNT).contains(&c) {
                errors.insert("count".into(), format!("must be between 1 and {MAX_COUNT}"));
            }
        }
        let temperature = match obj.get("temperature") {
            None | Some(Value::Null) => Some(1.0),
            Some(v) => match v.as_f64() {
                Some(t) if (0.0..=MAX_TEMPERATURE).contains(&t) => Some(t),
                _ => {
                    errors.insert("temperature".into(), format!("must be a number in [0, {MAX_TEMPERATURE}]"));
                    None
                }
            },
        };
        let seed = match obj.get("seed") {
            None | Some(Value::Null) => None,
            Some(v) => match v.as_u64() {
                Some(s) => Some(s),
                None => {
                    errors.insert("seed".into(), "must be a non-negative integer".into());
                    None
                }
            },
        };
        if !errors.is_empty() {
            return Err(ApiError::Invalid(errors));
        }
        let (artist, mode, count, temperature) = (artist.unwrap(), mode.unwrap(), count.unwrap(), temperature.unwrap());
        if artist as usize >= self.artists.len() {
            return Err(ApiError::NotFound(format!("unknown artist {artist}")));
        }
        let mode: ConditioningMode = mode.parse().map_err(|_| ApiError::NotFound(format!("unknown mode {mode}")))?;
        if !self.models.contains_key(&mode) {
            return Err(ApiError::NotFound(format!("no model loaded for mode {mode}")));
        }
        Ok(GenerateRequest {
            artist: ArtistId(artist as usize),
            mode,
            count: count as usize,
            temperature,
            seed,
        })
    }
}

fn uint_field(obj: &Map<String, Value>, name: &str, errors: &mut BTreeMap<String, String>) -> Option<u64> {
    match obj.get(name) {
        None | Some(Value::Null) => {
            errors.insert(name.into(), "is required".into());
            None
        }
        Some(v) => {
            let n = v.as_u64();
            if n.is_none() {
                errors.insert(name.into(), "must be a non-negative integer".into());
            }
            n
        }
    }
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn artists(State(s): State<Arc<Service>>) -> Json<Value> {
    let list: Vec<ArtistView> = s
        .artists
        .iter()
        .map(|a| ArtistView {
            id: a.id.0,
            name: &a.name,
            genre: a.genre.as_deref(),
        })
        .collect();
    Json(json!(list))
}

async fn models(State(s): State<Arc<Service>>) -> Json<Value> {
    let list: Vec<ModelView> = s
        .models
        .iter()
        .map(|(&mode, m)| ModelView {
            mode,
            checkpoint_id: &m.checkpoint_id,
        })
        .collect();
    Json(json!(list))
}

async fn generate_lines(State(s): State<Arc<Service>>, body: axum::body::Bytes) -> Result<Json<GenerateResponse>, ApiError> {
    let req = s.validate(&body)?;
    let seed_used = req.seed.unwrap_or_else(|| s.next_seed());
    let model = Arc::clone(&s.models[&req.mode].model);
    let lines = tokio::task::spawn_blocking(move || {
        let max_len = model.config.max_decode_len;
        generate(&model, req.artist, req.count, req.temperature, max_len, seed_used)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?
    .map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(Json(GenerateResponse { lines, seed_used }))
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/artists", get(artists))
        .route("/api/models", get(models))
        .route("/api/generate", post(generate_lines))
        .with_state(service)
}
