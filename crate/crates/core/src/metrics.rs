//! Text-image and image-image alignment scores in a frozen joint space,
//! computed on the full image or on a crop around the edit region.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::embed::{Embedder, Embedding};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::raster::{ImageBuffer, MaskBuffer};
use crate::scenegen::BenchItem;
use crate::vocab::{Prompt, PromptKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    T2I,
    I2I,
    T2IPlusI2I,
    RPrecision,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::T2I, Metric::I2I, Metric::T2IPlusI2I, Metric::RPrecision];

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::T2I => "T2I",
            Metric::I2I => "I2I",
            Metric::T2IPlusI2I => "T2I+I2I",
            Metric::RPrecision => "R-Prec",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    Full,
    Crop,
}

impl Region {
    pub const ALL: [Region; 2] = [Region::Full, Region::Crop];

    pub fn as_str(&self) -> &'static str {
        match self {
            Region::Full => "Full",
            Region::Crop => "Crop",
        }
    }

    /// The region matching what a prompt describes.
    pub fn aligned_with(kind: PromptKind) -> Self {
        if kind.is_mask() {
            Region::Crop
        } else {
            Region::Full
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MetricSpec {
    pub metric: Metric,
    pub region: Region,
}

/// Key of one generated sample.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleKey {
    pub item_id: String,
    pub prompt_kind: PromptKind,
    pub model_id: String,
    pub sample_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub item_id: String,
    pub prompt_kind: PromptKind,
    pub model_id: String,
    pub sample_index: usize,
    pub score: f64,
}

impl ScoredSample {
    pub fn key(&self) -> SampleKey {
        SampleKey {
            item_id: self.item_id.clone(),
            prompt_kind: self.prompt_kind,
            model_id: self.model_id.clone(),
            sample_index: self.sample_index,
        }
    }
}

/// A model output for one benchmark prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    pub key: SampleKey,
    pub image: ImageBuffer,
}

/// Tight box around the edit region, without resizing.
pub fn crop_to_mask_bbox(image: &ImageBuffer, mask: &MaskBuffer) -> Result<ImageBuffer> {
    if image.shape() != mask.shape() {
        return Err(Error::Shape(format!("image {:?} vs mask {:?}", image.shape(), mask.shape())));
    }
    let bbox = mask
        .bbox()
        .ok_or_else(|| Error::Region("cannot crop around an empty mask".into()))?;
    image.crop(&bbox)
}

/// The image region a score is computed on. Embedders resize to their own
/// input size.
pub fn region_image(image: &ImageBuffer, mask: &MaskBuffer, region: Region) -> Result<ImageBuffer> {
    match region {
        Region::Full => Ok(image.clone()),
        Region::Crop => crop_to_mask_bbox(image, mask),
    }
}

/// `100 * max(0, cos)`.
pub fn clip_score(cosine: f64) -> f64 {
    100.0 * cosine.max(0.0)
}

pub fn t2i(
    embedder: &dyn Embedder,
    image: &ImageBuffer,
    mask: &MaskBuffer,
    prompt: &Prompt,
    region: Region,
) -> Result<f64> {
    let img = embedder.embed_image(&region_image(image, mask, region)?)?;
    Ok(clip_score(img.cosine(&embedder.embed_text(prompt)?)))
}

pub fn i2i(
    embedder: &dyn Embedder,
    image: &ImageBuffer,
    reference: &ImageBuffer,
    mask: &MaskBuffer,
    region: Region,
) -> Result<f64> {
    let a = embedder.embed_image(&region_image(image, mask, region)?)?;
    let b = embedder.embed_image(&region_image(reference, mask, region)?)?;
    Ok(clip_score(a.cosine(&b)))
}

/// Unweighted mean of the two scores.
pub fn combine_t2i_i2i(t2i: f64, i2i: f64) -> f64 {
    0.5 * (t2i + i2i)
}

/// 1 when the true prompt is strictly the most similar, 0 otherwise (ties
/// count as failure).
pub fn r_precision_from(image: &Embedding, truth: &Embedding, distractors: &[Embedding]) -> Result<u8> {
    if distractors.is_empty() {
        return Err(Error::Config("R-precision needs at least one distractor".into()));
    }
    let target = image.cosine(truth);
    Ok(distractors.iter().all(|d| image.cosine(d) < target) as u8)
}

pub fn r_precision(
    embedder: &dyn Embedder,
    image: &ImageBuffer,
    mask: &MaskBuffer,
    prompt: &Prompt,
    distractors: &[Prompt],
    region: Region,
) -> Result<u8> {
    if distractors.iter().any(|d| d.kind != prompt.kind) {
        return Err(Error::Config("distractors must share the prompt kind".into()));
    }
    let img = embedder.embed_image(&region_image(image, mask, region)?)?;
    let truth = embedder.embed_text(prompt)?;
    let others = distractors
        .iter()
        .filter(|d| d.text != prompt.text)
        .map(|d| embedder.embed_text(d))
        .collect::<Result<Vec<_>>>()?;
    r_precision_from(&img, &truth, &others)
}

/// Per-sample values of every metric, for one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub key: SampleKey,
    pub region: Region,
    pub t2i: f64,
    pub i2i: f64,
    pub t2i_plus_i2i: f64,
    pub r_precision: f64,
}

impl SampleScores {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::T2I => self.t2i,
            Metric::I2I => self.i2i,
            Metric::T2IPlusI2I => self.t2i_plus_i2i,
            Metric::RPrecision => self.r_precision,
        }
    }

    pub fn scored(&self, metric: Metric) -> ScoredSample {
        ScoredSample {
            item_id: self.key.item_id.clone(),
            prompt_kind: self.key.prompt_kind,
            model_id: self.key.model_id.clone(),
            sample_index: self.key.sample_index,
            score: self.get(metric),
        }
    }
}

/// Precomputed prompt and reference embeddings for scoring many samples
/// against one benchmark.
pub struct MetricContext<'a> {
    embedder: &'a dyn Embedder,
    items: HashMap<String, &'a BenchItem>,
    prompts: HashMap<(String, PromptKind), Embedding>,
    by_kind: HashMap<PromptKind, Vec<(String, Embedding)>>,
    references: HashMap<(String, Region), Embedding>,
}

impl<'a> MetricContext<'a> {
    pub fn new(embedder: &'a dyn Embedder, items: &'a [BenchItem]) -> Result<Self> {
        let mut prompts = HashMap::new();
        let mut by_kind: HashMap<PromptKind, Vec<(String, Embedding)>> = HashMap::new();
        let mut references = HashMap::new();
        for item in items {
            for kind in PromptKind::ALL {
                let e = embedder.embed_text(item.prompts.get(kind))?;
                by_kind.entry(kind).or_default().push((item.id.clone(), e.clone()));
                prompts.insert((item.id.clone(), kind), e);
            }
            for region in Region::ALL {
                let r = embedder.embed_image(&region_image(&item.image, &item.mask, region)?)?;
                references.insert((item.id.clone(), region), r);
            }
        }
        Ok(Self {
            embedder,
            items: items.iter().map(|i| (i.id.clone(), i)).collect(),
            prompts,
            by_kind,
            references,
        })
    }

    pub fn fingerprint(&self) -> String {
        self.embedder.fingerprint()
    }

    fn item(&self, id: &str) -> Result<&'a BenchItem> {
        self.items
            .get(id)
            .copied()
            .ok_or_else(|| Error::Data(format!("unknown benchmark item {id}")))
    }

    pub fn score(&self, key: &SampleKey, image: &ImageBuffer, region: Region) -> Result<SampleScores> {
        let item = self.item(&key.item_id)?;
        let img = self.embedder.embed_image(&region_image(image, &item.mask, region)?)?;
        let truth = &self.prompts[&(key.item_id.clone(), key.prompt_kind)];
        let reference = &self.references[&(key.item_id.clone(), region)];
        let t2i = clip_score(img.cosine(truth));
        let i2i = clip_score(img.cosine(reference));
        let truth_text = &item.prompts.get(key.prompt_kind).text;
        let distractors: Vec<Embedding> = self.by_kind[&key.prompt_kind]
            .iter()
            .filter(|(id, _)| {
                id != &key.item_id
                    && &self.item(id).map(|i| i.prompts.get(key.prompt_kind).text.clone()).unwrap_or_default() != truth_text
            })
            .map(|(_, e)| e.clone())
            .collect();
        let rp = if distractors.is_empty() {
            return Err(Error::Config("benchmark has no distractor prompts".into()));
        } else {
            r_precision_from(&img, truth, &distractors)?
        };
        Ok(SampleScores {
            key: key.clone(),
            region,
            t2i,
            i2i,
            t2i_plus_i2i: combine_t2i_i2i(t2i, i2i),
            r_precision: rp as f64,
        })
    }

    pub fn score_all(&self, samples: &[GeneratedSample], region: Region, exec: Exec) -> Result<Vec<SampleScores>> {
        exec.map_slice(samples, |s| self.score(&s.key, &s.image, region))
            .into_iter()
            .collect()
    }
}

/// Mean of each metric per model and prompt kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model_id: String,
    pub prompt_kind: PromptKind,
    pub region: Region,
    pub n: usize,
    pub t2i: f64,
    pub i2i: f64,
    pub t2i_plus_i2i: f64,
    pub r_precision: f64,
}

pub fn aggregate(scores: &[SampleScores]) -> Vec<MetricRow> {
    let mut groups: BTreeMap<(String, PromptKind, Region), Vec<&SampleScores>> = BTreeMap::new();
    for s in scores {
        groups
            .entry((s.key.model_id.clone(), s.key.prompt_kind, s.region))
            .or_default()
            .push(s);
    }
    groups
        .into_iter()
        .map(|((model_id, prompt_kind, region), v)| {
            let n = v.len();
            let mean = |m: Metric| v.iter().map(|s| s.get(m)).sum::<f64>() / n as f64;
            MetricRow {
                model_id,
                prompt_kind,
                region,
                n,
                t2i: mean(Metric::T2I),
                i2i: mean(Metric::I2I),
                t2i_plus_i2i: mean(Metric::T2IPlusI2I),
                // reported as a percentage
                r_precision: 100.0 * mean(Metric::RPrecision),
            }
        })
        .collect()
}

pub fn metric_rows_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("model,prompt,image,n,T2I,I2I,T2I+I2I,R-Prec\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.1},{:.1},{:.1},{:.1}\n",
            r.model_id,
            r.prompt_kind.as_str(),
            r.region.as_str(),
            r.n,
            r.t2i,
            r.i2i,
            r.t2i_plus_i2i,
            r.r_precision
        ));
    }
    out
}

pub fn metric_rows_markdown(rows: &[MetricRow]) -> String {
    let mut out = String::from("| Model | Prompt | Image | T2I | I2I | T2I+I2I | R-Prec |\n|---|---|---|---|---|---|---|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {:.1} | {:.1} | {:.1} | {:.1} |\n",
            r.model_id,
            r.prompt_kind.as_str(),
            r.region.as_str(),
            r.t2i,
            r.i2i,
            r.t2i_plus_i2i,
            r.r_precision
        ));
    }
    out
}
