//! Question schemas for single-image and side-by-side evaluation, and a
//! simulated judge that answers them from the rendered pixels.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::glyphs;
use crate::metrics::{region_image, Region, SampleKey};
use crate::par::Exec;
use crate::raster::{rgb_to_hsv, BoundingBox, ImageBuffer, MaskBuffer};
use crate::rng::RngStream;
use crate::scenegen::{material_dark, BenchItem, SHAPE_STRETCH, SIZE_AREAS};
use crate::vocab::{
    self, count_value, noun_phrase, AttributeCategory, AttributePair, Prompt, PromptKind, COLORS,
    COUNT_WORDS, MATERIALS, SHAPES, SIZES,
};

pub const OVERALL_QUESTION: &str = "Does the image match the caption?";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionTag {
    ObjectPresent,
    AttributePresent,
    BindingCorrect,
    OverallMatch,
    AlignmentWinner,
    RealismWinner,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub tag: QuestionTag,
    pub pair_index: Option<usize>,
    pub text: String,
}

pub fn questions_for(prompt: &Prompt) -> Vec<Question> {
    if prompt.kind == PromptKind::Full {
        return vec![Question {
            tag: QuestionTag::OverallMatch,
            pair_index: None,
            text: OVERALL_QUESTION.to_string(),
        }];
    }
    let mut out = Vec::with_capacity(3 * prompt.pairs.len());
    for (i, p) in prompt.pairs.iter().enumerate() {
        out.push(Question {
            tag: QuestionTag::ObjectPresent,
            pair_index: Some(i),
            text: format!("Is the object ({}) rendered?", p.object),
        });
        out.push(Question {
            tag: QuestionTag::AttributePresent,
            pair_index: Some(i),
            text: format!("Is the attribute ({}) present?", p.attribute),
        });
        out.push(Question {
            tag: QuestionTag::BindingCorrect,
            pair_index: Some(i),
            text: format!(
                "Is the attribute ({}) applied to the correct object ({})?",
                p.attribute, p.object
            ),
        });
    }
    out
}

pub fn side_by_side_questions() -> [Question; 2] {
    [
        Question {
            tag: QuestionTag::RealismWinner,
            pair_index: None,
            text: "Which image is more realistic?".into(),
        },
        Question {
            tag: QuestionTag::AlignmentWinner,
            pair_index: None,
            text: "Which image matches with the caption better?".into(),
        },
    ]
}

/// One binary answer. For side-by-side questions `Some(true)` credits the
/// first image, `Some(false)` the second and `None` is an abstention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub tag: QuestionTag,
    pub pair_index: Option<usize>,
    pub value: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub item_id: String,
    pub prompt_kind: PromptKind,
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_b: Option<String>,
    pub sample_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_index_b: Option<usize>,
    pub answers: Vec<Answer>,
    pub annotator_id: String,
}

impl RatingRecord {
    pub fn is_side_by_side(&self) -> bool {
        self.model_b.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let expected = if self.is_side_by_side() {
            2
        } else {
            match self.prompt_kind {
                PromptKind::Full => 1,
                PromptKind::MaskSimple => 3,
                PromptKind::MaskRich => 9,
            }
        };
        if self.answers.len() != expected {
            return Err(Error::Data(format!(
                "{} record for {} has {} answers, expected {expected}",
                self.prompt_kind.as_str(),
                self.item_id,
                self.answers.len()
            )));
        }
        if !self.is_side_by_side() && self.answers.iter().any(|a| a.value.is_none()) {
            return Err(Error::Data(format!("single record for {} has an abstention", self.item_id)));
        }
        Ok(())
    }

    pub fn sample_key(&self) -> SampleKey {
        SampleKey {
            item_id: self.item_id.clone(),
            prompt_kind: self.prompt_kind,
            model_id: self.model_id.clone(),
            sample_index: self.sample_index,
        }
    }

    /// Fraction of positive answers.
    pub fn score(&self) -> f64 {
        if self.answers.is_empty() {
            return 0.0;
        }
        self.answers.iter().filter(|a| a.value == Some(true)).count() as f64 / self.answers.len() as f64
    }

    /// Every answer positive.
    pub fn correct_overall(&self) -> bool {
        !self.answers.is_empty() && self.answers.iter().all(|a| a.value == Some(true))
    }

    pub fn answer(&self, tag: QuestionTag) -> Option<bool> {
        self.answers.iter().find(|a| a.tag == tag).and_then(|a| a.value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JudgeMode {
    GroundTruthAnalytic,
    TrainedClassifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeConfig {
    pub mode: JudgeMode,
    /// Max distance in degrees between measured hue and the named color.
    pub color_tolerance: f32,
    /// Min template agreement for a component to count as an object.
    pub object_threshold: f64,
    /// Min fraction of pixels matching a material's dark pattern.
    pub material_threshold: f64,
    /// Aspect ratio (relative to the template) separating regular from
    /// tall/wide.
    pub shape_split: f64,
    /// Instance-area fractions separating small/medium and medium/large.
    pub size_splits: (f64, f64),
    /// Components smaller than this many pixels are ignored.
    pub min_component: usize,
    pub foreground_saturation: f32,
    pub foreground_value: f32,
    /// Values below this are the dark half of a material pattern.
    pub dark_value: f32,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        let a = SIZE_AREAS;
        Self {
            mode: JudgeMode::GroundTruthAnalytic,
            color_tolerance: 14.0,
            object_threshold: 0.85,
            material_threshold: 0.8,
            shape_split: SHAPE_STRETCH.sqrt(),
            size_splits: ((a[0].1 * a[1].1).sqrt(), (a[1].1 * a[2].1).sqrt()),
            min_component: 4,
            foreground_saturation: 0.45,
            foreground_value: 0.25,
            dark_value: 0.775,
        }
    }
}

impl JudgeConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.color_tolerance > 0.0
            && self.color_tolerance < 180.0
            && (0.0..=1.0).contains(&self.object_threshold)
            && (0.0..=1.0).contains(&self.material_threshold)
            && self.shape_split > 1.0
            && 0.0 < self.size_splits.0
            && self.size_splits.0 < self.size_splits.1
            && self.size_splits.1 < 1.0
            && (0.0..=1.0).contains(&self.foreground_saturation)
            && (0.0..=1.0).contains(&self.foreground_value)
            && (0.0..=1.0).contains(&self.dark_value);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid judge thresholds: {self:?}")))
        }
    }
}

/// A configured judge; one instance plays one annotator.
#[derive(Clone)]
pub struct Judge {
    pub cfg: JudgeConfig,
    pub annotator_id: String,
    embedder: Option<Arc<dyn Embedder>>,
}

impl std::fmt::Debug for Judge {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Judge")
            .field("cfg", &self.cfg)
            .field("annotator_id", &self.annotator_id)
            .field("embedder", &self.embedder.as_ref().map(|e| e.fingerprint()))
            .finish()
    }
}

impl Judge {
    pub fn new(cfg: JudgeConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            annotator_id: "sim-0".into(),
            embedder: None,
        })
    }

    pub fn with_embedder(mut self, embedder: Arc<dyn Embedder>) -> Self {
        self.embedder = Some(embedder);
        self
    }

    /// The `k`-th simulated annotator: same judge with slightly jittered
    /// tolerances.
    pub fn annotator(&self, k: usize) -> Self {
        const JITTER: [f64; 3] = [1.0, 0.85, 1.15];
        let j = JITTER[k % JITTER.len()];
        let mut cfg = self.cfg.clone();
        cfg.color_tolerance = (cfg.color_tolerance as f64 * j) as f32;
        cfg.object_threshold = (cfg.object_threshold * (2.0 - j)).clamp(0.5, 1.0);
        cfg.material_threshold = (cfg.material_threshold * (2.0 - j)).clamp(0.5, 1.0);
        Self {
            cfg,
            annotator_id: format!("sim-{k}"),
            embedder: self.embedder.clone(),
        }
    }

    fn answers(&self, image: &ImageBuffer, item: &BenchItem, prompt: &Prompt) -> Result<Vec<Answer>> {
        check_vocabulary(prompt)?;
        if image.shape() != item.mask.shape() {
            return Err(Error::Shape(format!(
                "image {:?} vs benchmark mask {:?}",
                image.shape(),
                item.mask.shape()
            )));
        }
        match self.cfg.mode {
            JudgeMode::GroundTruthAnalytic => Ok(analytic_answers(image, &item.mask, prompt, &self.cfg)),
            JudgeMode::TrainedClassifier => {
                let e = self
                    .embedder
                    .as_deref()
                    .ok_or_else(|| Error::State("classifier judge has no embedder".into()))?;
                classifier_answers(e, image, &item.mask, prompt)
            }
        }
    }

    pub fn judge_single(
        &self,
        image: &ImageBuffer,
        item: &BenchItem,
        prompt: &Prompt,
        model_id: &str,
        sample_index: usize,
    ) -> Result<RatingRecord> {
        Ok(RatingRecord {
            item_id: item.id.clone(),
            prompt_kind: prompt.kind,
            model_id: model_id.to_string(),
            model_b: None,
            sample_index,
            sample_index_b: None,
            answers: self.answers(image, item, prompt)?,
            annotator_id: self.annotator_id.clone(),
        })
    }

    /// Alignment: more positive single-image answers wins, equal counts
    /// abstain. Realism: lower artifact score in the edit region wins.
    #[allow(clippy::too_many_arguments)]
    pub fn judge_side_by_side(
        &self,
        a: &ImageBuffer,
        b: &ImageBuffer,
        item: &BenchItem,
        prompt: &Prompt,
        models: (&str, &str),
        samples: (usize, usize),
    ) -> Result<RatingRecord> {
        let positives = |img| -> Result<usize> {
            Ok(self.answers(img, item, prompt)?.iter().filter(|x| x.value == Some(true)).count())
        };
        let (pa, pb) = (positives(a)?, positives(b)?);
        let (ra, rb) = (artifact_score(a, &item.mask)?, artifact_score(b, &item.mask)?);
        let realism = if (ra - rb).abs() <= 1e-9 { None } else { Some(ra < rb) };
        let alignment = if pa == pb { None } else { Some(pa > pb) };
        Ok(RatingRecord {
            item_id: item.id.clone(),
            prompt_kind: prompt.kind,
            model_id: models.0.to_string(),
            model_b: Some(models.1.to_string()),
            sample_index: samples.0,
            sample_index_b: Some(samples.1),
            answers: vec![
                Answer {
                    tag: QuestionTag::RealismWinner,
                    pair_index: None,
                    value: realism,
                },
                Answer {
                    tag: QuestionTag::AlignmentWinner,
                    pair_index: None,
                    value: alignment,
                },
            ],
            annotator_id: self.annotator_id.clone(),
        })
    }
}

/// Winner of a side-by-side question across annotators: `Some(true)` for
/// the first model, `None` on a tie or when everyone abstains.
pub fn majority(records: &[RatingRecord], tag: QuestionTag) -> Option<bool> {
    let (mut a, mut b) = (0, 0);
    for r in records {
        match r.answer(tag) {
            Some(true) => a += 1,
            Some(false) => b += 1,
            None => {}
        }
    }
    match a.cmp(&b) {
        std::cmp::Ordering::Greater => Some(true),
        std::cmp::Ordering::Less => Some(false),
        std::cmp::Ordering::Equal => None,
    }
}

fn check_vocabulary(prompt: &Prompt) -> Result<()> {
    for p in &prompt.pairs {
        if glyphs::template(&p.object).is_none() || vocab::attribute_category(&p.attribute).is_none() {
            return Err(Error::Config(format!("unknown vocabulary in pair {} {}", p.attribute, p.object)));
        }
    }
    Ok(())
}

/// Measured properties of one connected foreground region.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentInfo {
    pub bbox: BoundingBox,
    pub pixels: usize,
    pub object: Option<String>,
    pub object_agreement: f64,
    pub color: Option<String>,
    pub material_scores: Vec<(String, f64)>,
    pub shape: String,
    pub size: String,
}

impl ComponentInfo {
    fn has_material(&self, material: &str, threshold: f64) -> bool {
        let best = self.material_scores.iter().map(|(_, s)| *s).fold(0.0, f64::max);
        self.material_scores
            .iter()
            .any(|(m, s)| m == material && *s >= threshold && *s >= best)
    }

    fn carries(&self, attribute: &str, category: AttributeCategory, cfg: &JudgeConfig) -> bool {
        match category {
            AttributeCategory::Color => self.color.as_deref() == Some(attribute),
            AttributeCategory::Material => self.has_material(attribute, cfg.material_threshold),
            AttributeCategory::Shape => self.shape == attribute,
            AttributeCategory::Size => self.size == attribute,
            AttributeCategory::Count => true,
        }
    }
}

fn circular_distance(a: f32, b: f32) -> f32 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Foreground components (8-connected) inside `region`, or the whole image.
pub fn components(image: &ImageBuffer, region: Option<&MaskBuffer>, cfg: &JudgeConfig) -> Vec<ComponentInfo> {
    let (h, w) = image.shape();
    let hsv: Vec<[f32; 3]> = (0..h * w).map(|i| rgb_to_hsv(image.get(i / w, i % w))).collect();
    let fg: Vec<bool> = (0..h * w)
        .map(|i| {
            region.is_none_or(|m| m.get(i / w, i % w))
                && hsv[i][1] >= cfg.foreground_saturation
                && hsv[i][2] >= cfg.foreground_value
        })
        .collect();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if !fg[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut pixels = Vec::new();
        while let Some(i) = stack.pop() {
            pixels.push(i);
            let (y, x) = (i / w, i % w);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if fg[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        if pixels.len() >= cfg.min_component {
            out.push(describe(&pixels, &hsv, (h, w), cfg));
        }
    }
    out
}

fn describe(pixels: &[usize], hsv: &[[f32; 3]], (h, w): (usize, usize), cfg: &JudgeConfig) -> ComponentInfo {
    let ys = pixels.iter().map(|i| i / w);
    let xs = pixels.iter().map(|i| i % w);
    let bbox = BoundingBox {
        y0: ys.clone().min().unwrap_or(0),
        y1: ys.max().unwrap_or(0) + 1,
        x0: xs.clone().min().unwrap_or(0),
        x1: xs.max().unwrap_or(0) + 1,
    };
    let (bh, bw) = (bbox.height(), bbox.width());
    let mut raster = vec![false; bh * bw];
    for &i in pixels {
        raster[(i / w - bbox.y0) * bw + (i % w - bbox.x0)] = true;
    }
    let (best_name, best_t, best_agree) = glyphs::all_objects()
        .map(|(name, t)| (name, t, t.agreement(&raster, bh, bw)))
        .max_by(|a, b| a.2.total_cmp(&b.2))
        .expect("templates exist");
    let object = (best_agree >= cfg.object_threshold).then(|| best_name.to_string());

    let (s, c) = pixels.iter().fold((0.0f64, 0.0f64), |(s, c), &i| {
        let rad = (hsv[i][0] as f64).to_radians();
        (s + rad.sin(), c + rad.cos())
    });
    let mean_hue = s.atan2(c).to_degrees().rem_euclid(360.0) as f32;
    let color = COLORS
        .iter()
        .map(|(name, hue)| (*name, circular_distance(mean_hue, *hue)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .filter(|(_, d)| *d <= cfg.color_tolerance)
        .map(|(n, _)| n.to_string());

    let material_scores = MATERIALS
        .iter()
        .map(|&m| {
            let agree = pixels
                .iter()
                .filter(|&&i| (hsv[i][2] < cfg.dark_value) == material_dark(m, i / w, i % w))
                .count();
            (m.to_string(), agree as f64 / pixels.len() as f64)
        })
        .collect();

    let rel = (bw as f64 / bh as f64) / best_t.aspect();
    let shape = if rel > cfg.shape_split {
        "wide"
    } else if rel < 1.0 / cfg.shape_split {
        "tall"
    } else {
        "regular"
    };
    let area = (bh * bw) as f64 / (h * w) as f64;
    let size = if area < cfg.size_splits.0 {
        SIZES[0]
    } else if area < cfg.size_splits.1 {
        SIZES[1]
    } else {
        SIZES[2]
    };
    ComponentInfo {
        bbox,
        pixels: pixels.len(),
        object,
        object_agreement: best_agree,
        color,
        material_scores,
        shape: shape.to_string(),
        size: size.to_string(),
    }
}

fn pair_answers(comps: &[ComponentInfo], pair: &AttributePair, cfg: &JudgeConfig) -> [bool; 3] {
    let is_obj = |c: &&ComponentInfo| c.object.as_deref() == Some(pair.object.as_str());
    let object = comps.iter().any(|c| is_obj(&c));
    let (attribute, binding) = if pair.attribute_category == AttributeCategory::Count {
        let n = count_value(&pair.attribute).unwrap_or(0) as usize;
        (comps.len() == n, comps.iter().filter(is_obj).count() == n)
    } else {
        let carries = |c: &ComponentInfo| c.carries(&pair.attribute, pair.attribute_category, cfg);
        (
            comps.iter().any(carries),
            comps.iter().filter(is_obj).any(carries),
        )
    };
    [object, attribute, binding]
}

/// Splits a caption's pairs into one group per described object: a new
/// group starts when the object changes or a category repeats.
pub fn phrase_groups(pairs: &[AttributePair]) -> Vec<&[AttributePair]> {
    let mut groups = Vec::new();
    let mut start = 0;
    let mut cats = BTreeSet::new();
    for (i, p) in pairs.iter().enumerate() {
        let fresh = i > start && (p.object != pairs[start].object || cats.contains(&p.attribute_category));
        if fresh {
            groups.push(&pairs[start..i]);
            start = i;
            cats.clear();
        }
        cats.insert(p.attribute_category);
    }
    if start < pairs.len() {
        groups.push(&pairs[start..]);
    }
    groups
}

fn group_matches(comps: &[ComponentInfo], group: &[AttributePair], cfg: &JudgeConfig) -> bool {
    let object = &group[0].object;
    let matching = comps
        .iter()
        .filter(|c| c.object.as_deref() == Some(object.as_str()))
        .filter(|c| {
            group
                .iter()
                .all(|p| c.carries(&p.attribute, p.attribute_category, cfg))
        })
        .count();
    match group
        .iter()
        .find(|p| p.attribute_category == AttributeCategory::Count)
    {
        Some(p) => count_value(&p.attribute).is_some_and(|n| matching == n as usize),
        None => matching >= 1,
    }
}

fn analytic_answers(image: &ImageBuffer, mask: &MaskBuffer, prompt: &Prompt, cfg: &JudgeConfig) -> Vec<Answer> {
    if prompt.kind == PromptKind::Full {
        let comps = components(image, None, cfg);
        let ok = phrase_groups(&prompt.pairs)
            .iter()
            .all(|g| group_matches(&comps, g, cfg));
        return vec![Answer {
            tag: QuestionTag::OverallMatch,
            pair_index: None,
            value: Some(ok),
        }];
    }
    let comps = components(image, Some(mask), cfg);
    to_answers(prompt.pairs.iter().map(|p| pair_answers(&comps, p, cfg)))
}

fn to_answers(per_pair: impl Iterator<Item = [bool; 3]>) -> Vec<Answer> {
    let tags = [
        QuestionTag::ObjectPresent,
        QuestionTag::AttributePresent,
        QuestionTag::BindingCorrect,
    ];
    per_pair
        .enumerate()
        .flat_map(|(i, vals)| {
            tags.into_iter().zip(vals).map(move |(tag, v)| Answer {
                tag,
                pair_index: Some(i),
                value: Some(v),
            })
        })
        .collect()
}

fn alternatives(category: AttributeCategory) -> Vec<&'static str> {
    match category {
        AttributeCategory::Material => MATERIALS.to_vec(),
        AttributeCategory::Color => COLORS.iter().map(|(c, _)| *c).collect(),
        AttributeCategory::Shape => SHAPES.to_vec(),
        AttributeCategory::Size => SIZES.to_vec(),
        AttributeCategory::Count => COUNT_WORDS.iter().map(|(w, _)| *w).collect(),
    }
}

fn pair_prompt(attribute: &str, object: &str) -> Result<Prompt> {
    let pair = AttributePair::new(attribute, object)?;
    let text = noun_phrase(object, &[(pair.attribute_category, attribute.to_string())]);
    Prompt::new(PromptKind::MaskSimple, text, vec![pair])
}

/// Zero-shot answers: the named object (resp. attribute) must be the most
/// similar among all objects (resp. attributes of the same category).
fn classifier_answers(
    embedder: &dyn Embedder,
    image: &ImageBuffer,
    mask: &MaskBuffer,
    prompt: &Prompt,
) -> Result<Vec<Answer>> {
    let region = Region::aligned_with(prompt.kind);
    let img = embedder.embed_image(&region_image(image, mask, region)?)?;
    let sim = |attribute: &str, object: &str| -> Result<f64> {
        Ok(img.cosine(&embedder.embed_text(&pair_prompt(attribute, object)?)?))
    };
    let argmax_is = |cands: Vec<(&str, f64)>, want: &str| {
        let best = cands.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        cands.iter().any(|(n, s)| *n == want && *s >= best)
            && cands.iter().filter(|(_, s)| *s >= best).count() == 1
    };
    let mut per_pair = Vec::new();
    for p in &prompt.pairs {
        let objects = glyphs::all_objects()
            .map(|(o, _)| Ok((o, sim(&p.attribute, o)?)))
            .collect::<Result<Vec<_>>>()?;
        let attrs = alternatives(p.attribute_category)
            .into_iter()
            .map(|a| Ok((a, sim(a, &p.object)?)))
            .collect::<Result<Vec<_>>>()?;
        let object = argmax_is(objects, &p.object);
        let attribute = argmax_is(attrs, &p.attribute);
        per_pair.push([object, attribute, object && attribute]);
    }
    if prompt.kind == PromptKind::Full {
        let ok = per_pair.iter().all(|v| v[2]);
        return Ok(vec![Answer {
            tag: QuestionTag::OverallMatch,
            pair_index: None,
            value: Some(ok),
        }]);
    }
    Ok(to_answers(per_pair.into_iter()))
}

/// No-reference artifact score on the edit region (lower looks cleaner):
/// mean absolute Laplacian of luminance inside the mask plus the mean
/// luminance jump across the mask boundary.
pub fn artifact_score(image: &ImageBuffer, mask: &MaskBuffer) -> Result<f64> {
    if image.shape() != mask.shape() {
        return Err(Error::Shape(format!("image {:?} vs mask {:?}", image.shape(), mask.shape())));
    }
    let (h, w) = image.shape();
    let lum = |y: usize, x: usize| {
        let [r, g, b] = image.get(y, x);
        (0.299 * r + 0.587 * g + 0.114 * b) as f64
    };
    let (mut lap, mut n_lap, mut edge, mut n_edge) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            if y > 0 && x > 0 && y + 1 < h && x + 1 < w {
                let l = 4.0 * lum(y, x) - lum(y - 1, x) - lum(y + 1, x) - lum(y, x - 1) - lum(y, x + 1);
                lap += l.abs();
                n_lap += 1;
            }
            let neighbors = [
                (y.wrapping_sub(1), x),
                (y + 1, x),
                (y, x.wrapping_sub(1)),
                (y, x + 1),
            ];
            for (ny, nx) in neighbors {
                if ny < h && nx < w && !mask.get(ny, nx) {
                    edge += (lum(y, x) - lum(ny, nx)).abs();
                    n_edge += 1;
                }
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(mean(lap, n_lap) + mean(edge, n_edge))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub models: Vec<String>,
    pub samples_per_prompt: usize,
    pub annotators: usize,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            models: Vec::new(),
            samples_per_prompt: 4,
            annotators: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProtocolOutput {
    pub single: Vec<RatingRecord>,
    pub side_by_side: Vec<RatingRecord>,
}

impl ProtocolOutput {
    pub fn all(&self) -> impl Iterator<Item = &RatingRecord> {
        self.single.iter().chain(&self.side_by_side)
    }
}

/// Number of single-image records the protocol emits.
pub fn expected_single_records(n_items: usize, n_models: usize, samples: usize) -> usize {
    n_items * PromptKind::ALL.len() * n_models * samples
}

/// Number of side-by-side records: the first model against each other one,
/// on rich mask prompts only, one record per annotator.
pub fn expected_side_by_side_records(n_items: usize, n_models: usize, annotators: usize) -> usize {
    n_items * n_models.saturating_sub(1) * annotators
}

/// Judges every sample of every model on every prompt, then runs the
/// side-by-side comparisons of the first model against the others.
pub fn run_protocol(
    items: &[BenchItem],
    samples: &HashMap<SampleKey, ImageBuffer>,
    cfg: &ProtocolConfig,
    judge: &Judge,
    exec: Exec,
) -> Result<ProtocolOutput> {
    if cfg.models.is_empty() || cfg.samples_per_prompt == 0 || cfg.annotators == 0 {
        return Err(Error::Config("protocol needs models, samples and annotators".into()));
    }
    let mut keys = Vec::new();
    for item in items {
        for kind in PromptKind::ALL {
            for m in &cfg.models {
                for s in 0..cfg.samples_per_prompt {
                    keys.push(SampleKey {
                        item_id: item.id.clone(),
                        prompt_kind: kind,
                        model_id: m.clone(),
                        sample_index: s,
                    });
                }
            }
        }
    }
    let missing: Vec<String> = keys
        .iter()
        .filter(|k| !samples.contains_key(k))
        .map(|k| format!("{}/{}/{}#{}", k.item_id, k.prompt_kind.as_str(), k.model_id, k.sample_index))
        .collect();
    if !missing.is_empty() {
        let shown: Vec<&str> = missing.iter().take(10).map(String::as_str).collect();
        return Err(Error::Protocol(format!(
            "{} samples missing: {}{}",
            missing.len(),
            shown.join(", "),
            if missing.len() > shown.len() { ", ..." } else { "" }
        )));
    }
    let by_id: HashMap<&str, &BenchItem> = items.iter().map(|i| (i.id.as_str(), i)).collect();
    let single = exec
        .map_slice(&keys, |k| {
            let item = by_id[k.item_id.as_str()];
            judge.judge_single(&samples[k], item, item.prompts.get(k.prompt_kind), &k.model_id, k.sample_index)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let mut jobs = Vec::new();
    for item in items {
        for other in cfg.models.iter().skip(1) {
            for a in 0..cfg.annotators {
                jobs.push((item, other, a));
            }
        }
    }
    let stream = RngStream::new(cfg.seed, "side-by-side");
    let side_by_side = exec
        .map(jobs.len(), |j| {
            let (item, other, a) = jobs[j];
            let mut r = stream.rng_at(j as u64);
            let sa = r.random_range(0..cfg.samples_per_prompt);
            let sb = r.random_range(0..cfg.samples_per_prompt);
            let key = |m: &str, s| SampleKey {
                item_id: item.id.clone(),
                prompt_kind: PromptKind::MaskRich,
                model_id: m.to_string(),
                sample_index: s,
            };
            let first = &cfg.models[0];
            judge.annotator(a).judge_side_by_side(
                &samples[&key(first, sa)],
                &samples[&key(other, sb)],
                item,
                &item.prompts.mask_rich,
                (first, other),
                (sa, sb),
            )
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(ProtocolOutput { single, side_by_side })
}

pub fn write_ratings(path: &Path, records: &[RatingRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads RatingRecord JSONL, as written by the judge or collected from
/// human annotators.
pub fn read_ratings(path: &Path) -> Result<Vec<RatingRecord>> {
    parse_ratings(&std::fs::read_to_string(path)?)
}

pub fn parse_ratings(text: &str) -> Result<Vec<RatingRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let r: RatingRecord = serde_json::from_str(l)
                .map_err(|e| Error::Data(format!("line {}: {e}", n + 1)))?;
            r.validate()?;
            Ok(r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{build_benchmark, render_scene, SceneSpec};
    use crate::vocab::SceneTag;

    fn bench(n: usize) -> Vec<BenchItem> {
        build_benchmark(n, &RngStream::new(11, "judge-bench"), Exec::default()).unwrap()
    }

    fn blank_mask_region(item: &BenchItem) -> ImageBuffer {
        let gray = ImageBuffer::filled(64, 64, [0.5; 3]).unwrap();
        crate::raster::composite(&item.image, &gray, &item.mask).unwrap()
    }

    #[test]
    fn schema_sizes() {
        let items = bench(1);
        let p = &items[0].prompts;
        let full = questions_for(&p.full);
        assert_eq!(full.len(), 1);
        assert_eq!(full[0].text, "Does the image match the caption?");
        assert_eq!(questions_for(&p.mask_simple).len(), 3);
        assert_eq!(questions_for(&p.mask_rich).len(), 9);
        assert_eq!(side_by_side_questions().len(), 2);
    }

    #[test]
    fn reference_images_are_judged_correct() {
        let items = bench(60);
        let judge = Judge::new(JudgeConfig::default()).unwrap();
        let (mut pos, mut total) = (0, 0);
        for item in &items {
            for kind in PromptKind::ALL {
                let r = judge.judge_single(&item.image, item, item.prompts.get(kind), "ref", 0).unwrap();
                r.validate().unwrap();
                pos += r.answers.iter().filter(|a| a.value == Some(true)).count();
                total += r.answers.len();
                if !r.correct_overall() {
                    eprintln!("{} {:?} {:?}", item.id, kind, item.prompts.get(kind).text);
                }
            }
        }
        assert_eq!(pos, total);
    }

    #[test]
    fn blanked_region_has_no_object() {
        let judge = Judge::new(JudgeConfig::default()).unwrap();
        for item in bench(10) {
            let r = judge
                .judge_single(&blank_mask_region(&item), &item, &item.prompts.mask_simple, "blank", 0)
                .unwrap();
            assert_eq!(r.answer(QuestionTag::ObjectPresent), Some(false));
        }
    }

    #[test]
    fn wrong_color_breaks_attribute_and_binding() {
        let item = bench(1).remove(0);
        let mut scene = SceneSpec {
            canvas: (64, 64),
            background: SceneTag::Indoor,
            objects: vec![item.target.clone()],
        };
        scene.objects[0].color = "red".into();
        let red = render_scene(&scene, &RngStream::new(1, "r")).unwrap();
        scene.objects[0].color = "blue".into();
        let blue = render_scene(&scene, &RngStream::new(1, "r")).unwrap();
        let pair = AttributePair::new("red", &item.target.object).unwrap();
        let prompt = Prompt::new(PromptKind::MaskSimple, "a red thing".into(), vec![pair]).unwrap();
        let judge = Judge::new(JudgeConfig::default()).unwrap();
        let ok = judge.judge_single(&red, &item, &prompt, "m", 0).unwrap();
        assert!(ok.correct_overall());
        let bad = judge.judge_single(&blue, &item, &prompt, "m", 0).unwrap();
        let vals: Vec<Option<bool>> = bad.answers.iter().map(|a| a.value).collect();
        assert_eq!(vals, vec![Some(true), Some(false), Some(false)]);
    }

    #[test]
    fn side_by_side_dominance_and_symmetry() {
        let item = bench(1).remove(0);
        let judge = Judge::new(JudgeConfig::default()).unwrap();
        let blank = blank_mask_region(&item);
        let p = &item.prompts.mask_rich;
        let r = judge.judge_side_by_side(&item.image, &blank, &item, p, ("a", "b"), (0, 0)).unwrap();
        assert_eq!(r.answer(QuestionTag::AlignmentWinner), Some(true));
        let same = judge.judge_side_by_side(&item.image, &item.image, &item, p, ("a", "b"), (0, 0)).unwrap();
        assert_eq!(same.answers[1].value, None);
        assert_eq!(same.answers[0].value, None);
    }

    #[test]
    fn majority_of_three() {
        let rec = |v: Option<bool>| RatingRecord {
            item_id: "i".into(),
            prompt_kind: PromptKind::MaskRich,
            model_id: "a".into(),
            model_b: Some("b".into()),
            sample_index: 0,
            sample_index_b: Some(0),
            answers: vec![
                Answer { tag: QuestionTag::RealismWinner, pair_index: None, value: None },
                Answer { tag: QuestionTag::AlignmentWinner, pair_index: None, value: v },
            ],
            annotator_id: "x".into(),
        };
        let t = QuestionTag::AlignmentWinner;
        assert_eq!(majority(&[rec(Some(true)), rec(Some(true)), rec(Some(false))], t), Some(true));
        assert_eq!(majority(&[rec(Some(false)), rec(Some(true)), rec(Some(false))], t), Some(false));
        assert_eq!(majority(&[rec(Some(true)), rec(None), rec(Some(false))], t), None);
    }

    #[test]
    fn phrase_groups_split_on_repeats() {
        let p = |a: &str, o: &str| AttributePair::new(a, o).unwrap();
        let pairs = vec![
            p("small", "cat"),
            p("red", "cat"),
            p("large", "cat"),
            p("blue", "cat"),
            p("two", "cup"),
        ];
        let g = phrase_groups(&pairs);
        assert_eq!(g.iter().map(|g| g.len()).collect::<Vec<_>>(), vec![2, 2, 1]);
    }

    #[test]
    fn protocol_counts_and_gaps() {
        let items = bench(1);
        let models: Vec<String> = ["m0", "m1", "m2", "m3"].map(String::from).to_vec();
        let mut samples = HashMap::new();
        for item in &items {
            for kind in PromptKind::ALL {
                for m in &models {
                    for s in 0..4 {
                        let key = SampleKey {
                            item_id: item.id.clone(),
                            prompt_kind: kind,
                            model_id: m.clone(),
                            sample_index: s,
                        };
                        samples.insert(key, item.image.clone());
                    }
                }
            }
        }
        let judge = Judge::new(JudgeConfig::default()).unwrap();
        let one = ProtocolConfig {
            models: vec!["m0".into()],
            ..Default::default()
        };
        let out = run_protocol(&items, &samples, &one, &judge, Exec::Sequential).unwrap();
        assert_eq!(out.single.len(), 12);
        assert_eq!(out.side_by_side.len(), 0);

        let cfg = ProtocolConfig {
            models: models.clone(),
            ..Default::default()
        };
        let out = run_protocol(&items, &samples, &cfg, &judge, Exec::default()).unwrap();
        assert_eq!(out.single.len(), expected_single_records(1, 4, 4));
        assert_eq!(out.side_by_side.len(), expected_side_by_side_records(1, 4, 3));
        assert_eq!(expected_single_records(240, 4, 4), 11_520);
        assert_eq!(expected_side_by_side_records(240, 4, 3), 2_160);

        samples.retain(|k, _| k.sample_index != 3 || k.model_id != "m2");
        match run_protocol(&items, &samples, &cfg, &judge, Exec::Sequential) {
            Err(Error::Protocol(msg)) => assert!(msg.starts_with("3 samples missing"), "{msg}"),
            other => panic!("expected protocol error, got {other:?}"),
        }
    }

    #[test]
    fn ratings_round_trip_and_reject_bad_counts() {
        let item = bench(1).remove(0);
        let judge = Judge::new(JudgeConfig::default()).unwrap();
        let r = judge.judge_single(&item.image, &item, &item.prompts.mask_rich, "m", 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ratings.jsonl");
        write_ratings(&path, std::slice::from_ref(&r)).unwrap();
        assert_eq!(read_ratings(&path).unwrap(), vec![r.clone()]);
        let mut bad = r;
        bad.answers.pop();
        let line = serde_json::to_string(&bad).unwrap();
        assert!(parse_ratings(&line).is_err());
    }

    #[test]
    fn classifier_mode_needs_embedder() {
        let item = bench(1).remove(0);
        let cfg = JudgeConfig {
            mode: JudgeMode::TrainedClassifier,
            ..Default::default()
        };
        let judge = Judge::new(cfg).unwrap();
        assert!(matches!(
            judge.judge_single(&item.image, &item, &item.prompts.mask_simple, "m", 0),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn unknown_vocabulary_is_a_config_error() {
        let item = bench(1).remove(0);
        let mut p = item.prompts.mask_simple.clone();
        p.pairs[0].object = "dragon".into();
        let judge = Judge::new(JudgeConfig::default()).unwrap();
        assert!(matches!(judge.judge_single(&item.image, &item, &p, "m", 0), Err(Error::Config(_))));
    }
}
