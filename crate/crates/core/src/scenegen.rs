//! Procedural synthetic scenes with exact ground truth, free-form edit masks,
//! prompt construction and the balanced inpainting benchmark.

use std::io::Write;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glyphs::{self, Template};
use crate::io;
use crate::par::Exec;
use crate::raster::{
    hsv_to_rgb, mask_area_ratio, size_bucket, BoundingBox, ImageBuffer, MaskBuffer, SizeBucket,
    SMALL_MIN,
};
use crate::rng::RngStream;
use crate::vocab::{
    self, count_word, noun_phrase, scene_caption, AttributeCategory, AttributePair,
    ObjectCategory, Prompt, PromptKind, SceneTag, COLORS, MATERIALS, SHAPES, SIZES,
};

pub const CANVAS: usize = 64;
pub const MAX_OBJECTS: usize = 6;
pub const MANIFEST_SCHEMA: u32 = 1;

/// Instance area as a fraction of the canvas, per size word.
pub const SIZE_AREAS: [(&str, f64); 3] = [("small", 0.04), ("medium", 0.09), ("large", 0.18)];
/// Aspect multiplier applied to the template for `tall` / `wide`.
pub const SHAPE_STRETCH: f64 = 1.6;
/// Empty pixels kept between objects and between instances of one object.
pub const GAP: usize = 2;

pub const OBJECT_SATURATION: f32 = 0.85;
pub const LIGHT_VALUE: f32 = 0.95;
pub const DARK_VALUE: f32 = 0.6;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub object: String,
    pub object_category: ObjectCategory,
    pub material: String,
    pub color: String,
    pub shape: String,
    pub size: String,
    pub count: u32,
    /// Union of all instance boxes.
    pub bbox: BoundingBox,
    pub instances: Vec<BoundingBox>,
}

impl ObjectSpec {
    pub fn attribute(&self, category: AttributeCategory) -> String {
        match category {
            AttributeCategory::Material => self.material.clone(),
            AttributeCategory::Color => self.color.clone(),
            AttributeCategory::Shape => self.shape.clone(),
            AttributeCategory::Size => self.size.clone(),
            AttributeCategory::Count => count_word(self.count).unwrap_or("one").to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub canvas: (usize, usize),
    pub background: SceneTag,
    pub objects: Vec<ObjectSpec>,
}

impl SceneSpec {
    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.objects.iter().map(|o| o.bbox).collect()
    }
}

/// Attribute draw for one object, before layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectAttrs {
    pub object: String,
    pub material: String,
    pub color: String,
    pub shape: String,
    pub size: String,
    pub count: u32,
}

pub fn size_area(size: &str) -> Option<f64> {
    SIZE_AREAS.iter().find(|(s, _)| *s == size).map(|(_, a)| *a)
}

pub fn shape_factor(shape: &str) -> Option<f64> {
    match shape {
        "regular" => Some(1.0),
        "tall" => Some(1.0 / SHAPE_STRETCH),
        "wide" => Some(SHAPE_STRETCH),
        _ => None,
    }
}

/// Rendered `(height, width)` of one instance, `None` when the combination
/// would shrink the silhouette below its template resolution.
pub fn instance_dims(attrs: &ObjectAttrs, canvas: (usize, usize)) -> Option<(usize, usize)> {
    let t = glyphs::template(&attrs.object)?;
    let aspect = t.aspect() * shape_factor(&attrs.shape)?;
    let area = size_area(&attrs.size)? * (canvas.0 * canvas.1) as f64;
    let w = (area * aspect).sqrt().round() as usize;
    let h = (area / aspect).sqrt().round() as usize;
    (w >= t.width && h >= t.height && w + 2 <= canvas.1 && h + 2 <= canvas.0).then_some((h, w))
}

/// Whether `count` instances fit on the canvas in one row or column.
pub fn fits(attrs: &ObjectAttrs, canvas: (usize, usize)) -> bool {
    let Some((h, w)) = instance_dims(attrs, canvas) else {
        return false;
    };
    let n = attrs.count as usize;
    let total = size_area(&attrs.size).unwrap_or(1.0) * n as f64;
    let row = n * w + (n - 1) * GAP + 2 <= canvas.1;
    let col = n * h + (n - 1) * GAP + 2 <= canvas.0;
    total <= 0.45 && (row || col)
}

fn draw_count(rng: &mut ChaCha8Rng) -> u32 {
    match rng.random_range(0..10) {
        0..=6 => 1,
        7 | 8 => 2,
        _ => 3,
    }
}

/// Random attribute draw. `object_category` / `count` pin those fields.
pub fn random_attrs(
    rng: &mut ChaCha8Rng,
    object_category: Option<ObjectCategory>,
    count: Option<u32>,
    canvas: (usize, usize),
) -> ObjectAttrs {
    loop {
        let cat = object_category
            .unwrap_or_else(|| *ObjectCategory::ALL.choose(rng).expect("nonempty"));
        let attrs = ObjectAttrs {
            object: cat.objects().choose(rng).expect("nonempty").to_string(),
            material: MATERIALS.choose(rng).expect("nonempty").to_string(),
            color: COLORS.choose(rng).expect("nonempty").0.to_string(),
            shape: SHAPES.choose(rng).expect("nonempty").to_string(),
            size: SIZES.choose(rng).expect("nonempty").to_string(),
            count: count.unwrap_or_else(|| draw_count(rng)),
        };
        if fits(&attrs, canvas) {
            return attrs;
        }
    }
}

/// Places all instances of `attrs` in a row (or column) at a random free
/// position. `blocked` boxes and `avoid` mask pixels are kept `GAP` away.
pub fn place_object(
    attrs: &ObjectAttrs,
    canvas: (usize, usize),
    blocked: &[BoundingBox],
    avoid: Option<&MaskBuffer>,
    rng: &mut ChaCha8Rng,
) -> Option<ObjectSpec> {
    let (h, w) = instance_dims(attrs, canvas)?;
    let n = attrs.count as usize;
    let row_w = n * w + (n - 1) * GAP;
    let col_h = n * h + (n - 1) * GAP;
    let mut layouts = Vec::new();
    if row_w + 2 <= canvas.1 {
        layouts.push(true);
    }
    if col_h + 2 <= canvas.0 {
        layouts.push(false);
    }
    let horizontal = *layouts.choose(rng)?;
    let (gh, gw) = if horizontal { (h, row_w) } else { (col_h, w) };
    for _ in 0..64 {
        let y0 = rng.random_range(1..=canvas.0 - gh - 1);
        let x0 = rng.random_range(1..=canvas.1 - gw - 1);
        let group = BoundingBox {
            x0,
            y0,
            x1: x0 + gw,
            y1: y0 + gh,
        };
        let halo = group.expand(GAP, canvas.0, canvas.1);
        if blocked.iter().any(|b| b.overlaps(&halo)) {
            continue;
        }
        if avoid.is_some_and(|m| m.intersects_box(&halo)) {
            continue;
        }
        let instances = (0..n)
            .map(|i| {
                let (oy, ox) = if horizontal {
                    (0, i * (w + GAP))
                } else {
                    (i * (h + GAP), 0)
                };
                BoundingBox {
                    x0: x0 + ox,
                    y0: y0 + oy,
                    x1: x0 + ox + w,
                    y1: y0 + oy + h,
                }
            })
            .collect();
        return Some(ObjectSpec {
            object: attrs.object.clone(),
            object_category: vocab::object_category(&attrs.object)?,
            material: attrs.material.clone(),
            color: attrs.color.clone(),
            shape: attrs.shape.clone(),
            size: attrs.size.clone(),
            count: attrs.count,
            bbox: group,
            instances,
        });
    }
    None
}

/// A random scene of 1..=`MAX_OBJECTS` objects, as used for training.
pub fn random_scene(canvas: (usize, usize), rng: &mut ChaCha8Rng) -> SceneSpec {
    let background = *SceneTag::ALL.choose(rng).expect("nonempty");
    let wanted = rng.random_range(1..=MAX_OBJECTS);
    let mut objects: Vec<ObjectSpec> = Vec::new();
    let mut attempts = 0;
    while objects.len() < wanted && attempts < 4 * MAX_OBJECTS {
        attempts += 1;
        let attrs = random_attrs(rng, None, None, canvas);
        let blocked: Vec<BoundingBox> = objects.iter().map(|o| o.bbox).collect();
        if let Some(spec) = place_object(&attrs, canvas, &blocked, None, rng) {
            objects.push(spec);
        }
    }
    SceneSpec {
        canvas,
        background,
        objects,
    }
}

pub fn material_dark(material: &str, y: usize, x: usize) -> bool {
    match material {
        "metal" => (x + y) % 4 < 2,
        "wood" => y % 3 == 0,
        "stone" => ((x / 2) + (y / 2)) % 2 == 0,
        "fabric" => x % 3 == 1 && y % 3 == 1,
        _ => false,
    }
}

fn background_pixel(tag: SceneTag, y: usize, x: usize, h: usize, noise: f32, blotch_hue: f32) -> [f32; 3] {
    match tag {
        SceneTag::Indoor => {
            let v = if x % 6 < 3 { 0.78 } else { 0.72 };
            hsv_to_rgb([35.0, 0.15, v])
        }
        SceneTag::Outdoor => {
            if y < h / 2 {
                hsv_to_rgb([205.0, 0.18, 0.92])
            } else {
                hsv_to_rgb([95.0, 0.2, 0.62])
            }
        }
        SceneTag::Realistic => hsv_to_rgb([30.0, 0.06, 0.5 + noise]),
        SceneTag::Painting => hsv_to_rgb([blotch_hue, 0.2, 0.85]),
    }
}

fn check_layout(spec: &SceneSpec) -> Result<()> {
    let (h, w) = spec.canvas;
    if spec.objects.len() > MAX_OBJECTS {
        return Err(Error::Layout(format!("{} objects exceed {MAX_OBJECTS}", spec.objects.len())));
    }
    for o in &spec.objects {
        if o.instances.len() != o.count as usize {
            return Err(Error::Layout(format!(
                "{} declares count {} but has {} instances",
                o.object,
                o.count,
                o.instances.len()
            )));
        }
        if glyphs::template(&o.object).is_none() || vocab::color_hue(&o.color).is_none() {
            return Err(Error::Layout(format!("unknown object or color in {o:?}")));
        }
        for b in o.instances.iter().chain(std::iter::once(&o.bbox)) {
            b.validate(h, w)
                .map_err(|_| Error::Layout(format!("{} box {b:?} leaves the canvas", o.object)))?;
        }
    }
    Ok(())
}

fn draw_instance(img: &mut ImageBuffer, t: &Template, b: &BoundingBox, hue: f32, material: &str) {
    let (h, w) = (b.height(), b.width());
    for py in 0..h {
        for px in 0..w {
            if t.sample(py, px, h, w) {
                let (y, x) = (b.y0 + py, b.x0 + px);
                let v = if material_dark(material, y, x) { DARK_VALUE } else { LIGHT_VALUE };
                img.set(y, x, hsv_to_rgb([hue, OBJECT_SATURATION, v]));
            }
        }
    }
}

/// Renders a scene: textured low-saturation background, then each object
/// instance as its silhouette filled with the object's hue and material
/// pattern.
pub fn render_scene(spec: &SceneSpec, rng: &RngStream) -> Result<ImageBuffer> {
    check_layout(spec)?;
    let (h, w) = spec.canvas;
    let mut r = rng.rng();
    let blotches: Vec<(f32, f32, f32)> = (0..6)
        .map(|_| {
            (
                r.random_range(0.0..h as f32),
                r.random_range(0.0..w as f32),
                r.random_range(0.0..360.0),
            )
        })
        .collect();
    let mut img = ImageBuffer::filled(h, w, [0.0; 3])?;
    for y in 0..h {
        for x in 0..w {
            let noise = r.random_range(-0.12f32..0.12);
            let hue = blotches
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - y as f32).powi(2) + (a.1 - x as f32).powi(2);
                    let db = (b.0 - y as f32).powi(2) + (b.1 - x as f32).powi(2);
                    da.total_cmp(&db)
                })
                .map_or(0.0, |b| b.2);
            img.set(y, x, background_pixel(spec.background, y, x, h, noise, hue));
        }
    }
    for o in &spec.objects {
        let t = glyphs::template(&o.object).expect("checked");
        let hue = vocab::color_hue(&o.color).expect("checked");
        for b in &o.instances {
            draw_instance(&mut img, t, b, hue, &o.material);
        }
    }
    // 8-bit levels so PNG storage is exact
    Ok(img.quantized())
}

/// Free-form mask around `target`: the box grown by a random radius whose
/// reach wobbles with direction (low-frequency angular noise), unioned with
/// the box itself so coverage is guaranteed. The radius is raised until the
/// mask reaches the smallest observed bucket ratio.
pub fn make_free_form_mask(target: &BoundingBox, canvas: (usize, usize), rng: &RngStream) -> Result<MaskBuffer> {
    let (h, w) = canvas;
    target.validate(h, w)?;
    let mut r = rng.rng();
    let mut radius: f64 = r.random_range(2.0..18.0);
    let harmonics: Vec<(f64, f64)> = (1..=3)
        .map(|_| (r.random_range(-0.15..0.15), r.random_range(0.0..std::f64::consts::TAU)))
        .collect();
    let cy = (target.y0 + target.y1) as f64 / 2.0;
    let cx = (target.x0 + target.x1) as f64 / 2.0;
    loop {
        let mut mask = MaskBuffer::from_box(h, w, target)?;
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let dy = (target.y0 as f64 - py).max(py - target.y1 as f64).max(0.0);
                let dx = (target.x0 as f64 - px).max(px - target.x1 as f64).max(0.0);
                let dist = (dy * dy + dx * dx).sqrt();
                let theta = (py - cy).atan2(px - cx);
                let wobble: f64 = harmonics
                    .iter()
                    .enumerate()
                    .map(|(k, (a, phase))| a * ((k as f64 + 1.0) * theta + phase).sin())
                    .sum();
                if dist > 0.0 && dist <= radius * (1.0 + wobble) {
                    mask.set(y, x, true);
                }
            }
        }
        let full = mask.count_ones() == h * w;
        if mask_area_ratio(&mask) >= SMALL_MIN || full {
            return Ok(mask);
        }
        radius += 1.0;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSet {
    pub full: Prompt,
    pub mask_simple: Prompt,
    pub mask_rich: Prompt,
}

impl PromptSet {
    pub fn get(&self, kind: PromptKind) -> &Prompt {
        match kind {
            PromptKind::Full => &self.full,
            PromptKind::MaskSimple => &self.mask_simple,
            PromptKind::MaskRich => &self.mask_rich,
        }
    }
}

/// Attribute categories named in the whole-scene caption for one object.
pub fn caption_attributes(o: &ObjectSpec) -> Vec<AttributeCategory> {
    let mut cats = vec![
        AttributeCategory::Size,
        AttributeCategory::Shape,
        AttributeCategory::Color,
        AttributeCategory::Material,
    ];
    if o.count > 1 {
        cats.push(AttributeCategory::Count);
    }
    cats
}

fn pairs_for(o: &ObjectSpec, cats: &[AttributeCategory]) -> Result<(String, Vec<AttributePair>)> {
    let mut cats = cats.to_vec();
    cats.sort_by_key(|c| c.phrase_order());
    let attrs: Vec<(AttributeCategory, String)> = cats.iter().map(|&c| (c, o.attribute(c))).collect();
    let pairs = attrs
        .iter()
        .map(|(_, a)| AttributePair::new(a, &o.object))
        .collect::<Result<Vec<_>>>()?;
    Ok((noun_phrase(&o.object, &attrs), pairs))
}

/// Whole-scene caption, as used for training and for Full prompts.
pub fn full_prompt(scene: &SceneSpec) -> Result<Prompt> {
    let mut phrases = Vec::new();
    let mut pairs = Vec::new();
    for o in &scene.objects {
        let (phrase, p) = pairs_for(o, &caption_attributes(o))?;
        phrases.push(phrase);
        pairs.extend(p);
    }
    Prompt::new(PromptKind::Full, scene_caption(scene.background, &phrases), pairs)
}

/// Qualifier categories for the rich prompt: the probed one plus the next
/// two of material, color, shape, size (cyclically).
pub fn rich_categories(probe: AttributeCategory) -> [AttributeCategory; 3] {
    const CYCLE: [AttributeCategory; 4] = [
        AttributeCategory::Material,
        AttributeCategory::Color,
        AttributeCategory::Shape,
        AttributeCategory::Size,
    ];
    let start = CYCLE.iter().position(|&c| c == probe).map_or(0, |i| i + 1);
    let pick = |k: usize| CYCLE[(start + k) % CYCLE.len()];
    if probe == AttributeCategory::Count {
        [probe, CYCLE[1], CYCLE[0]]
    } else {
        [probe, pick(0), pick(1)]
    }
}

/// The three prompts for a benchmark target probing `probe`.
pub fn make_prompts(target: &ObjectSpec, scene: &SceneSpec, probe: AttributeCategory) -> Result<PromptSet> {
    if probe == AttributeCategory::Count && target.count < 2 {
        return Err(Error::Config("count probe needs at least two instances".into()));
    }
    let (simple_text, simple_pairs) = pairs_for(target, &[probe])?;
    let (rich_text, rich_pairs) = pairs_for(target, &rich_categories(probe))?;
    Ok(PromptSet {
        full: full_prompt(scene)?,
        mask_simple: Prompt::new(PromptKind::MaskSimple, simple_text, simple_pairs)?,
        mask_rich: Prompt::new(PromptKind::MaskRich, rich_text, rich_pairs)?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Categories {
    pub attribute_category: AttributeCategory,
    pub object_category: ObjectCategory,
    pub scene: SceneTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchItem {
    pub id: String,
    pub image: ImageBuffer,
    pub mask: MaskBuffer,
    pub prompts: PromptSet,
    pub target: ObjectSpec,
    pub scene: SceneSpec,
    pub mask_ratio: f64,
    pub size_bucket: SizeBucket,
    pub categories: Categories,
}

/// Category triple of the `index`-th item under round-robin allocation over
/// attribute categories x object categories x scenes.
pub fn round_robin_categories(index: usize) -> Categories {
    let a = AttributeCategory::ALL.len();
    let o = ObjectCategory::ALL.len();
    let s = SceneTag::ALL.len();
    let combo = index % (a * o * s);
    Categories {
        attribute_category: AttributeCategory::ALL[combo % a],
        object_category: ObjectCategory::ALL[(combo / a) % o],
        scene: SceneTag::ALL[(combo / (a * o)) % s],
    }
}

pub fn build_item(index: usize, categories: Categories, rng: &RngStream) -> Result<BenchItem> {
    let canvas = (CANVAS, CANVAS);
    for attempt in 0..200u64 {
        let stream = rng.child_index(attempt);
        let mut r = stream.child("layout").rng();
        let count = (categories.attribute_category == AttributeCategory::Count)
            .then(|| r.random_range(2..=3))
            .or(Some(1));
        let attrs = random_attrs(&mut r, Some(categories.object_category), count, canvas);
        let Some(target) = place_object(&attrs, canvas, &[], None, &mut r) else {
            continue;
        };
        let mask = make_free_form_mask(&target.bbox, canvas, &stream.child("mask"))?;
        if mask.is_degenerate() {
            continue;
        }
        let mut objects = vec![target.clone()];
        let extra = r.random_range(0..=3);
        for _ in 0..extra {
            let other = random_attrs(&mut r, None, None, canvas);
            let blocked: Vec<BoundingBox> = objects.iter().map(|o| o.bbox).collect();
            if let Some(spec) = place_object(&other, canvas, &blocked, Some(&mask), &mut r) {
                objects.push(spec);
            }
        }
        let scene = SceneSpec {
            canvas,
            background: categories.scene,
            objects,
        };
        let image = render_scene(&scene, &stream.child("render"))?;
        let prompts = make_prompts(&target, &scene, categories.attribute_category)?;
        let mask_ratio = mask_area_ratio(&mask);
        return Ok(BenchItem {
            id: format!("item-{index:04}"),
            image,
            mask,
            prompts,
            target,
            scene,
            mask_ratio,
            size_bucket: size_bucket(mask_ratio)?,
            categories,
        });
    }
    Err(Error::Layout(format!("could not lay out benchmark item {index}")))
}

pub const DEFAULT_BENCH_ITEMS: usize = 240;

pub fn build_benchmark(n_items: usize, rng: &RngStream, exec: Exec) -> Result<Vec<BenchItem>> {
    if n_items == 0 {
        return Err(Error::Config("benchmark needs at least one item".into()));
    }
    exec.map(n_items, |i| build_item(i, round_robin_categories(i), &rng.child_index(i as u64)))
        .into_iter()
        .collect()
}

/// One manifest line; rasters live next to the manifest as PNG files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub schema_version: u32,
    pub id: String,
    pub image: String,
    pub mask: String,
    pub prompts: PromptSet,
    pub target: ObjectSpec,
    pub scene: SceneSpec,
    pub mask_ratio: f64,
    pub size_bucket: SizeBucket,
    pub categories: Categories,
}

impl ManifestEntry {
    pub fn from_item(item: &BenchItem) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA,
            id: item.id.clone(),
            image: format!("images/{}.png", item.id),
            mask: format!("masks/{}.png", item.id),
            prompts: item.prompts.clone(),
            target: item.target.clone(),
            scene: item.scene.clone(),
            mask_ratio: item.mask_ratio,
            size_bucket: item.size_bucket,
            categories: item.categories.clone(),
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

pub fn write_benchmark(dir: &Path, items: &[BenchItem]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(dir.join(MANIFEST_FILE))?);
    for item in items {
        let entry = ManifestEntry::from_item(item);
        io::save_image(&dir.join(&entry.image), &item.image)?;
        io::save_mask(&dir.join(&entry.mask), &item.mask)?;
        serde_json::to_writer(&mut manifest, &entry)?;
        manifest.write_all(b"\n")?;
    }
    manifest.flush()?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let e: ManifestEntry = serde_json::from_str(l)?;
            if e.schema_version != MANIFEST_SCHEMA {
                return Err(Error::Config(format!("unsupported manifest schema {}", e.schema_version)));
            }
            Ok(e)
        })
        .collect()
}

pub fn load_benchmark(dir: &Path) -> Result<Vec<BenchItem>> {
    read_manifest(dir)?
        .into_iter()
        .map(|e| {
            Ok(BenchItem {
                image: io::load_image(&dir.join(&e.image))?,
                mask: io::load_mask(&dir.join(&e.mask))?,
                id: e.id,
                prompts: e.prompts,
                target: e.target,
                scene: e.scene,
                mask_ratio: e.mask_ratio,
                size_bucket: e.size_bucket,
                categories: e.categories,
            })
        })
        .collect()
}

/// A training example: a rendered random scene with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub image: ImageBuffer,
    pub scene: Option<SceneSpec>,
}

/// The `index`-th scene of the corpus identified by `rng`; regenerated on
/// demand rather than stored.
pub fn corpus_sample(index: u64, rng: &RngStream) -> Result<TrainingSample> {
    let stream = rng.child_index(index);
    let scene = random_scene((CANVAS, CANVAS), &mut stream.child("layout").rng());
    let image = render_scene(&scene, &stream.child("render"))?;
    Ok(TrainingSample {
        image,
        scene: Some(scene),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_object_scene(attrs: ObjectAttrs) -> SceneSpec {
        let mut r = RngStream::new(1, "t").rng();
        let spec = place_object(&attrs, (CANVAS, CANVAS), &[], None, &mut r).unwrap();
        SceneSpec {
            canvas: (CANVAS, CANVAS),
            background: SceneTag::Indoor,
            objects: vec![spec],
        }
    }

    fn attrs(object: &str, color: &str, count: u32) -> ObjectAttrs {
        ObjectAttrs {
            object: object.into(),
            material: "plastic".into(),
            color: color.into(),
            shape: "regular".into(),
            size: "small".into(),
            count,
        }
    }

    /// 8-connected components of pixels whose hue is within 10 degrees of
    /// `hue` and saturation is high.
    fn hue_components(img: &ImageBuffer, hue: f32) -> usize {
        let (h, w) = img.shape();
        let on: Vec<bool> = (0..h * w)
            .map(|i| {
                let [hh, s, _] = crate::raster::rgb_to_hsv(img.get(i / w, i % w));
                let d = (hh - hue).rem_euclid(360.0);
                s > 0.5 && d.min(360.0 - d) < 10.0
            })
            .collect();
        let mut seen = vec![false; h * w];
        let mut n = 0;
        for s in 0..h * w {
            if !on[s] || seen[s] {
                continue;
            }
            n += 1;
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(i) = stack.pop() {
                let (y, x) = ((i / w) as i64, (i % w) as i64);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny >= 0 && nx >= 0 && ny < h as i64 && nx < w as i64 {
                            let j = ny as usize * w + nx as usize;
                            if on[j] && !seen[j] {
                                seen[j] = true;
                                stack.push(j);
                            }
                        }
                    }
                }
            }
        }
        n
    }

    #[test]
    fn render_is_deterministic() {
        let scene = one_object_scene(attrs("cup", "red", 1));
        let rng = RngStream::new(5, "render");
        assert_eq!(render_scene(&scene, &rng).unwrap(), render_scene(&scene, &rng).unwrap());
    }

    #[test]
    fn count_three_renders_three_components() {
        let scene = one_object_scene(attrs("tree", "blue", 3));
        let img = render_scene(&scene, &RngStream::new(2, "r")).unwrap();
        assert_eq!(hue_components(&img, 230.0), 3);
    }

    #[test]
    fn empty_scene_is_background_only() {
        let scene = SceneSpec {
            canvas: (CANVAS, CANVAS),
            background: SceneTag::Outdoor,
            objects: vec![],
        };
        let img = render_scene(&scene, &RngStream::new(2, "r")).unwrap();
        for y in 0..CANVAS {
            for x in 0..CANVAS {
                assert!(crate::raster::rgb_to_hsv(img.get(y, x))[1] < 0.25);
            }
        }
    }

    #[test]
    fn out_of_canvas_object_is_layout_error() {
        let mut scene = one_object_scene(attrs("cat", "red", 1));
        scene.objects[0].instances[0].x1 = CANVAS + 4;
        assert!(matches!(render_scene(&scene, &RngStream::new(1, "r")), Err(Error::Layout(_))));
    }

    #[test]
    fn mask_of_full_canvas_box_is_full() {
        let b = BoundingBox::new(0, 0, CANVAS, CANVAS).unwrap();
        let m = make_free_form_mask(&b, (CANVAS, CANVAS), &RngStream::new(1, "m")).unwrap();
        assert_eq!(m.count_ones(), CANVAS * CANVAS);
    }

    #[test]
    fn tiny_box_mask_reaches_small_minimum() {
        // 0.05 of the canvas
        let b = BoundingBox::new(20, 20, 36, 32).unwrap();
        assert!((b.area() as f64 / 4096.0 - 0.046875).abs() < 1e-9);
        for s in 0..50 {
            let m = make_free_form_mask(&b, (CANVAS, CANVAS), &RngStream::new(s, "m")).unwrap();
            assert!(mask_area_ratio(&m) >= SMALL_MIN);
            assert!(m.covers_box(&b));
            assert_ne!(m, MaskBuffer::from_box(CANVAS, CANVAS, &b).unwrap());
        }
    }

    #[test]
    fn mask_batch_spans_all_buckets() {
        let mut seen = std::collections::BTreeSet::new();
        let mut r = RngStream::new(9, "boxes").rng();
        for i in 0..1000 {
            let w = r.random_range(6..30);
            let h = r.random_range(6..30);
            let x0 = r.random_range(0..CANVAS - w);
            let y0 = r.random_range(0..CANVAS - h);
            let b = BoundingBox::new(x0, y0, x0 + w, y0 + h).unwrap();
            let m = make_free_form_mask(&b, (CANVAS, CANVAS), &RngStream::new(i, "m")).unwrap();
            assert!(m.covers_box(&b));
            seen.insert(size_bucket(mask_area_ratio(&m)).unwrap());
        }
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn prompts_follow_grammar_and_ground_truth() {
        let mut a = attrs("cat", "red", 1);
        a.material = "metal".into();
        let scene = one_object_scene(a);
        let p = make_prompts(&scene.objects[0], &scene, AttributeCategory::Material).unwrap();
        assert!(p.mask_simple.text.contains("metal") && p.mask_simple.text.contains("cat"));
        assert_eq!(p.mask_rich.pairs.len(), 3);
        for prompt in [&p.full, &p.mask_simple, &p.mask_rich] {
            assert_eq!(vocab::parse_pairs(&prompt.text).unwrap(), prompt.pairs);
        }
        let again = make_prompts(&scene.objects[0], &scene, AttributeCategory::Material).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn round_robin_is_balanced() {
        let mut counts = std::collections::HashMap::new();
        for i in 0..60 {
            *counts.entry(round_robin_categories(i).attribute_category).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 5);
        assert!(counts.values().all(|&c| c == 12));
    }

    #[test]
    fn single_item_benchmark() {
        let items = build_benchmark(1, &RngStream::new(3, "bench"), Exec::Sequential).unwrap();
        assert_eq!(items.len(), 1);
        let item = &items[0];
        assert!(item.mask.covers_box(&item.target.bbox));
        for o in &item.scene.objects[1..] {
            assert!(!item.mask.intersects_box(&o.bbox));
        }
        assert!(build_benchmark(0, &RngStream::new(3, "bench"), Exec::Sequential).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let items = build_benchmark(3, &RngStream::new(4, "bench"), Exec::Sequential).unwrap();
        let dir = std::env::temp_dir().join(format!("inpaintkit-bench-{}", std::process::id()));
        write_benchmark(&dir, &items).unwrap();
        let back = load_benchmark(&dir).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in items.iter().zip(&back) {
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.image, b.image);
            assert_eq!(a.prompts, b.prompts);
        }
        std::fs::remove_dir_all(dir).ok();
    }
}
