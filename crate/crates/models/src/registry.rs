//! Checkpoint directory layout: checkpoints under content-derived names plus
//! a `models.json` index naming the active ones.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{content_hash, Checkpoint};
use crate::denoiser::{Denoiser, Stage};
use crate::embedder::TrainedEmbedder;
use crate::error::{ModelError, Result};

pub const INDEX_FILE: &str = "models.json";
/// Environment variable naming the checkpoint directory.
pub const CHECKPOINT_DIR_ENV: &str = "INPAINTKIT_CHECKPOINT_DIR";

/// Named inpainting cascades plus the embedder.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelIndex {
    /// Model id -> checkpoint file names.
    #[serde(default)]
    pub cascades: BTreeMap<String, CascadeFiles>,
    /// Cascade used when none is named.
    #[serde(default)]
    pub default_cascade: Option<String>,
    #[serde(default)]
    pub embedder: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeFiles {
    pub base: String,
    pub sr: String,
}

impl ModelIndex {
    /// The index in `dir`, or an empty one if the file does not exist.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(INDEX_FILE), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn cascade<'a>(&'a self, id: Option<&'a str>) -> Result<(&'a str, &'a CascadeFiles)> {
        let id = id
            .or(self.default_cascade.as_deref())
            .or_else(|| self.cascades.keys().next().map(String::as_str))
            .ok_or_else(|| ModelError::Request("no inpainting model has been trained".into()))?;
        let files = self
            .cascades
            .get(id)
            .ok_or_else(|| ModelError::Request(format!("unknown model {id}")))?;
        Ok((id, files))
    }
}

/// A loaded cascade with the hashes of its checkpoint files.
pub struct Cascade {
    pub id: String,
    pub base: Denoiser,
    pub sr: Denoiser,
    pub base_hash: String,
    pub sr_hash: String,
}

impl Cascade {
    /// `base:sr` content hashes, recorded in provenance.
    pub fn checkpoint_hash(&self) -> String {
        format!("{}:{}", self.base_hash, self.sr_hash)
    }
}

fn read_hashed(path: &Path) -> Result<(Checkpoint, String)> {
    let bytes = std::fs::read(path)
        .map_err(|e| ModelError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    Ok((Checkpoint::from_bytes(&bytes)?, content_hash(&bytes)))
}

pub fn load_denoiser(path: &Path, stage: Stage) -> Result<(Denoiser, String)> {
    let (ckpt, hash) = read_hashed(path)?;
    let model = Denoiser::from_checkpoint(&ckpt, DType::F32)?;
    if model.stage() != stage || !model.is_conditioned() {
        return Err(ModelError::Checkpoint(format!(
            "{} is not an inpainting {} checkpoint",
            path.display(),
            stage.as_str()
        )));
    }
    Ok((model, hash))
}

pub fn load_cascade(dir: &Path, id: Option<&str>) -> Result<Cascade> {
    let index = ModelIndex::load(dir)?;
    let (id, files) = index.cascade(id)?;
    let (base, base_hash) = load_denoiser(&dir.join(&files.base), Stage::Base)?;
    let (sr, sr_hash) = load_denoiser(&dir.join(&files.sr), Stage::Sr)?;
    Ok(Cascade {
        id: id.to_string(),
        base,
        sr,
        base_hash,
        sr_hash,
    })
}

pub fn load_embedder(dir: &Path) -> Result<TrainedEmbedder> {
    let index = ModelIndex::load(dir)?;
    let file = index
        .embedder
        .ok_or_else(|| ModelError::State("no embedder has been trained".into()))?;
    TrainedEmbedder::from_checkpoint(&read_hashed(&dir.join(file))?.0)
}

/// Saves `ckpt` under `name` in `dir` and returns its path and hash.
pub fn store(dir: &Path, name: &str, ckpt: &Checkpoint) -> Result<(PathBuf, String)> {
    let path = dir.join(name);
    let hash = ckpt.save(&path)?;
    Ok((path, hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use inpaintkit_core::RngStream;

    #[test]
    fn cascade_round_trip_through_index() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_cascade(dir.path(), None).is_err());
        let cfg = DenoiserConfig::tiny();
        let base = Denoiser::new(&cfg, Stage::Base, true, DType::F32, &RngStream::new(1, "b")).unwrap();
        let sr = Denoiser::new(&cfg, Stage::Sr, true, DType::F32, &RngStream::new(1, "s")).unwrap();
        let (_, bh) = store(dir.path(), "b.ckpt", &base.to_checkpoint().unwrap()).unwrap();
        store(dir.path(), "s.ckpt", &sr.to_checkpoint().unwrap()).unwrap();
        let mut index = ModelIndex::default();
        index.cascades.insert(
            "im".into(),
            CascadeFiles {
                base: "b.ckpt".into(),
                sr: "s.ckpt".into(),
            },
        );
        index.save(dir.path()).unwrap();
        let c = load_cascade(dir.path(), None).unwrap();
        assert_eq!(c.id, "im");
        assert_eq!(c.base_hash, bh);
        assert!(load_cascade(dir.path(), Some("other")).is_err());
        index.cascades.get_mut("im").unwrap().sr = "b.ckpt".into();
        index.save(dir.path()).unwrap();
        assert!(matches!(load_cascade(dir.path(), None), Err(ModelError::Checkpoint(_))));
    }
}
