//! Sampling backends and the worker pool that drains the job queue.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use inpaintkit_core::io::encode_png;
use inpaintkit_core::vocab::Tokenizer;
use inpaintkit_core::{ImageBuffer, MaskBuffer};
use inpaintkit_models::denoiser::ConditioningInput;
use inpaintkit_models::registry::{load_cascade, Cascade};
use inpaintkit_models::sampler::{sample, SampleRequest};
use tokio::sync::mpsc;

use crate::error::{Result, ServiceError};
use crate::job::{EditParams, Provenance};
use crate::AppState;

pub struct EditInput {
    pub image: ImageBuffer,
    pub mask: MaskBuffer,
    pub prompt: String,
    pub params: EditParams,
}

pub struct EditOutput {
    pub images: Vec<ImageBuffer>,
    pub provenance: Provenance,
}

pub trait EditBackend: Send + Sync {
    /// Required input `(height, width)` for `model`, when known.
    fn input_shape(&self, model: Option<&str>) -> Option<(usize, usize)>;
    fn run(&self, input: &EditInput) -> Result<EditOutput>;
}

/// Samples with inpainting cascades from a checkpoint directory.
pub struct CascadeBackend {
    dir: Option<PathBuf>,
    default_id: Option<String>,
    loaded: Mutex<HashMap<String, Arc<Cascade>>>,
}

impl CascadeBackend {
    /// Backend over the cascades indexed in `dir`, loaded on first use.
    pub fn open(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            default_id: None,
            loaded: Mutex::new(HashMap::new()),
        }
    }

    /// Backend serving a single in-memory cascade.
    pub fn from_cascade(cascade: Cascade) -> Self {
        let id = cascade.id.clone();
        Self {
            dir: None,
            default_id: Some(id.clone()),
            loaded: Mutex::new(HashMap::from([(id, Arc::new(cascade))])),
        }
    }

    fn cascade(&self, model: Option<&str>) -> Result<Arc<Cascade>> {
        let key = model.or(self.default_id.as_deref()).unwrap_or("").to_string();
        let mut loaded = self.loaded.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(c) = loaded.get(&key) {
            return Ok(c.clone());
        }
        let dir = self
            .dir
            .as_ref()
            .ok_or_else(|| ServiceError::bad_request("unknown_model", format!("no model {key:?}")))?;
        let c = Arc::new(load_cascade(dir, model)?);
        loaded.insert(key, c.clone());
        Ok(c)
    }
}

impl EditBackend for CascadeBackend {
    fn input_shape(&self, model: Option<&str>) -> Option<(usize, usize)> {
        let r = self.cascade(model).ok()?.sr.resolution();
        Some((r, r))
    }

    fn run(&self, input: &EditInput) -> Result<EditOutput> {
        let cascade = self.cascade(input.params.model.as_deref())?;
        let tokenizer = Tokenizer::new(cascade.base.config().max_len);
        let tokens = if input.params.unconditional {
            tokenizer.null_sequence()
        } else {
            tokenizer.encode(&input.prompt)
        };
        let guidance = input.params.schedule()?;
        let req = SampleRequest {
            cond: ConditioningInput::new(&input.image, &input.mask, tokens)?,
            n_samples: input.params.n,
            steps: input.params.steps,
            sr_steps: input.params.sr_steps,
            seed: input.params.seed,
            guidance: guidance.clone(),
        };
        let images = sample(&req, Some(&cascade.base), Some(&cascade.sr))?;
        Ok(EditOutput {
            images,
            provenance: Provenance {
                seed: req.seed,
                guidance_spec: guidance.to_string(),
                guidance,
                model: cascade.id.clone(),
                checkpoint_hash: cascade.checkpoint_hash(),
                steps: req.steps,
                sr_steps: req.sr_steps,
            },
        })
    }
}

pub type JobQueue = mpsc::UnboundedSender<String>;

pub(crate) fn spawn_workers(state: Arc<AppState>, rx: mpsc::UnboundedReceiver<String>, workers: usize) {
    let rx = Arc::new(tokio::sync::Mutex::new(rx));
    for _ in 0..workers.max(1) {
        let state = state.clone();
        let rx = rx.clone();
        tokio::spawn(async move {
            loop {
                let next = rx.lock().await.recv().await;
                let Some(id) = next else { break };
                if let Err(e) = process(&state, &id).await {
                    log::warn!("job {id} failed: {e}");
                    if let Err(e) = state.jobs.mark_failed(&id, &e.to_string()) {
                        log::error!("job {id}: cannot record failure: {e}");
                    }
                }
            }
        });
    }
}

async fn process(state: &Arc<AppState>, id: &str) -> Result<()> {
    state.jobs.mark_running(id)?;
    let job = state.jobs.get(id)?;
    let input = EditInput {
        image: inpaintkit_core::io::decode_png(&state.blobs.get(&job.request.image)?)?,
        mask: crate::api::decode_mask(&state.blobs.get(&job.request.mask)?)?,
        prompt: job.request.prompt.clone(),
        params: job.request.params.clone(),
    };
    let backend = state.backend.clone();
    let out = tokio::task::spawn_blocking(move || backend.run(&input))
        .await
        .map_err(|e| ServiceError::State(format!("worker panicked: {e}")))??;
    if out.images.len() != job.request.params.n {
        return Err(ServiceError::State(format!(
            "backend returned {} samples for n = {}",
            out.images.len(),
            job.request.params.n
        )));
    }
    let hashes = out
        .images
        .iter()
        .map(|img| state.blobs.put(&encode_png(img)?))
        .collect::<Result<Vec<_>>>()?;
    state.jobs.mark_done(id, &hashes, &out.provenance)
}
