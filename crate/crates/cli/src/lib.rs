//! `lyra` command line: pipeline stages, one-off generation and the HTTP service.

pub mod server;

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand};
use lyra_core::config::DATA_DIR_ENV;
use lyra_core::pipeline::{find_artist, Pipeline};
use lyra_core::vae::{generate, ConditioningMode};
use lyra_core::VaeCheckpoint;

#[derive(Debug, Parser)]
#[command(name = "lyra", version, about = "Artist-conditioned lyric line generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decode WAV files, cut 10-second clips and cache their spectrograms.
    PrepAudio { config: PathBuf },
    /// Train the spectrogram classifier and export artist embeddings.
    TrainSpectro { config: PathBuf },
    /// Train one VAE checkpoint per configured seed.
    TrainVae {
        config: PathBuf,
        /// onehot, randT, randNT, audioT or audioNT.
        #[arg(long)]
        mode: ConditioningMode,
    },
    /// Print generated lines for one artist.
    Generate {
        checkpoint: PathBuf,
        /// Display name or directory key.
        #[arg(long)]
        artist: String,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// Drawn from the clock and reported on stderr when omitted.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score every configured mode and seed; prints the aggregated report.
    Evaluate { config: PathBuf },
    /// Serve the checkpoints in a directory over HTTP.
    Serve {
        dir: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

/// Relative paths resolve against `$LYRA_DATA_DIR` when it is set.
pub fn data_path(path: &Path) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) if !root.is_empty() && path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn clock_seed() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_nanos() as u64)
}

pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> anyhow::Result<()> {
    match cli.command {
        Command::PrepAudio { config } => {
            let summary = Pipeline::from_config_file(&config)?.prep_audio()?;
            writeln!(out, "{}", serde_json::to_string_pretty(&summary)?)?;
        }
        Command::TrainSpectro { config } => {
            let (summary, _) = Pipeline::from_config_file(&config)?.train_spectro()?;
            writeln!(out, "{}", serde_json::to_string_pretty(&summary)?)?;
        }
        Command::TrainVae { config, mode } => {
            for run in Pipeline::from_config_file(&config)?.train_vae(mode)? {
                writeln!(out, "{}", run.path.display())?;
            }
        }
        Command::Generate {
            checkpoint,
            artist,
            n,
            temperature,
            seed,
        } => {
            let path = data_path(&checkpoint);
            let ckpt = VaeCheckpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
            let artist = find_artist(&ckpt.artists, &artist)?;
            let seed = seed.unwrap_or_else(|| {
                let s = clock_seed();
                let _ = writeln!(err, "seed: {s}");
                s
            });
            let max_len = ckpt.model.config.max_decode_len;
            for line in generate(&ckpt.model, artist.id, n, temperature, max_len, seed)? {
                writeln!(out, "{line}")?;
            }
        }
        Command::Evaluate { config } => {
            let evaluation = Pipeline::from_config_file(&config)?.evaluate()?;
            writeln!(out, "{}", evaluation.aggregate.to_json()?)?;
        }
        Command::Serve { dir, port, host } => {
            let dir = data_path(&dir);
            let service = server::Service::load_dir(&dir, clock_seed())?;
            let addr: SocketAddr = format!("{host}:{port}").parse().context("invalid --host/--port")?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                let _ = writeln!(err, "listening on http://{}", listener.local_addr()?);
                axum::serve(listener, server::router(Arc::new(service)))
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}
