//! HTTP JSON service for single-pass composite editing.
//!
//! Endpoints: `GET /health`, `GET /tasks`, `GET /samples?n=`, `POST /edit`.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device};
use funedit_core::diffusion::{load_checkpoint, read_checkpoint_header};

pub mod app;
pub mod wire;

pub use app::{router, AppState, MAX_BODY_BYTES, MAX_PENDING, MAX_SAMPLES};
pub use wire::{EditRequestWire, EditResponseWire, MAX_STEPS};

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] funedit_core::Error),
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServeOptions {
    pub checkpoint: PathBuf,
    pub host: String,
    pub port: u16,
    /// Seed for `/samples` and for edits that carry no seed.
    pub seed: u64,
    pub cors_origin: Option<String>,
}

/// Validates the checkpoint header, binds the port, loads the model in the
/// background (`/health` answers 503 meanwhile) and serves until Ctrl-C.
pub fn serve_blocking(opts: ServeOptions) -> Result<(), ServeError> {
    let header = read_checkpoint_header(&opts.checkpoint)?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let addr = format!("{}:{}", opts.host, opts.port);
        let listener =
            tokio::net::TcpListener::bind(&addr).await.map_err(|source| ServeError::Bind { addr: addr.clone(), source })?;
        let state = AppState::new(opts.seed);
        let (failed_tx, failed_rx) = tokio::sync::oneshot::channel::<funedit_core::Error>();
        let loader = state.clone();
        let path = opts.checkpoint.clone();
        let version = header.format_version.clone();
        tokio::task::spawn_blocking(move || match load_checkpoint(&path, DType::F32, &Device::Cpu) {
            Ok(ckpt) => {
                loader.set_model(ckpt.model, version);
                eprintln!("model loaded from {}", path.display());
            }
            Err(e) => {
                let _ = failed_tx.send(e);
            }
        });
        eprintln!("listening on http://{}", listener.local_addr()?);
        let failure = Arc::new(Mutex::new(None));
        let slot = failure.clone();
        axum::serve(listener, router(state, opts.cors_origin.as_deref()))
            .with_graceful_shutdown(async move {
                tokio::select! {
                    Ok(e) = failed_rx => *slot.lock().expect("failure slot") = Some(e),
                    _ = tokio::signal::ctrl_c() => {}
                }
            })
            .await?;
        eprintln!("shut down");
        let failed = failure.lock().expect("failure slot").take();
        failed.map_or(Ok(()), |e| Err(ServeError::Checkpoint(e)))
    })
}
