//! Joint text-image embedding interface shared by the metrics and the
//! judge, plus a label-driven oracle embedder for exact tests.

use std::collections::HashMap;
use std::sync::RwLock;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::ImageBuffer;
use crate::rng::RngStream;
use crate::vocab::{AttributePair, Prompt};

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Normalizes `v`; a zero vector is a domain error.
    pub fn new(v: Vec<f32>) -> Result<Self> {
        let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Domain("cannot normalize a zero or non-finite vector".into()));
        }
        Ok(Self(v.into_iter().map(|x| (x as f64 / norm) as f32).collect()))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Cosine similarity, clamped into `[-1, 1]`.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        let dot: f64 = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum();
        dot.clamp(-1.0, 1.0)
    }
}

/// A frozen joint embedding space.
pub trait Embedder: Send + Sync {
    fn embed_image(&self, image: &ImageBuffer) -> Result<Embedding>;
    fn embed_text(&self, prompt: &Prompt) -> Result<Embedding>;
    /// Identifies the frozen weights; recorded in every report.
    fn fingerprint(&self) -> String;
}

pub fn image_hash(image: &ImageBuffer) -> String {
    let mut h = Sha256::new();
    h.update((image.height() as u64).to_le_bytes());
    h.update((image.width() as u64).to_le_bytes());
    for v in image.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn gaussian_vector(seed_label: &str, dim: usize) -> Vec<f32> {
    let mut rng = RngStream::new(0, seed_label).rng();
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Embedder computed from ground-truth labels.
///
/// Text maps to the normalized sum of fixed Gaussian vectors, one per
/// attribute-object pair. Images must be registered with their labels (or
/// an explicit embedding); unregistered images map to a pseudo-random
/// vector derived from their content hash, nearly orthogonal to everything.
pub struct OracleEmbedder {
    dim: usize,
    images: RwLock<HashMap<String, Embedding>>,
}

impl OracleEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            images: RwLock::new(HashMap::new()),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_pairs(&self, pairs: &[AttributePair]) -> Result<Embedding> {
        let mut acc = vec![0.0f32; self.dim];
        for p in pairs {
            let v = gaussian_vector(&format!("pair/{}/{}", p.attribute, p.object), self.dim);
            for (a, b) in acc.iter_mut().zip(v) {
                *a += b;
            }
        }
        Embedding::new(acc)
    }

    pub fn register(&self, image: &ImageBuffer, pairs: &[AttributePair]) -> Result<()> {
        let e = self.embed_pairs(pairs)?;
        self.register_embedding(image, e);
        Ok(())
    }

    pub fn register_embedding(&self, image: &ImageBuffer, embedding: Embedding) {
        self.images
            .write()
            .expect("registry lock")
            .insert(image_hash(image), embedding);
    }
}

impl Embedder for OracleEmbedder {
    fn embed_image(&self, image: &ImageBuffer) -> Result<Embedding> {
        let hash = image_hash(image);
        if let Some(e) = self.images.read().expect("registry lock").get(&hash) {
            return Ok(e.clone());
        }
        Embedding::new(gaussian_vector(&format!("image/{hash}"), self.dim))
    }

    fn embed_text(&self, prompt: &Prompt) -> Result<Embedding> {
        self.embed_pairs(&prompt.pairs)
    }

    fn fingerprint(&self) -> String {
        format!("oracle-d{}", self.dim)
    }
}

/// Placeholder for a learned aesthetic-quality predictor; always unavailable.
#[derive(Debug, Default, Clone, Copy)]
pub struct NimaStub;

impl NimaStub {
    pub fn score(&self, _image: &ImageBuffer) -> Result<f64> {
        Err(Error::State("NIMA quality predictor unavailable".into()))
    }
}
