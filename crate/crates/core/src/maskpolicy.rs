//! Training-time mask generators.
//!
//! `Random` is the box-and-stroke policy: a union of random rectangles and
//! thick random-walk polylines. `ObjectUnion` adds one object bounding box,
//! chosen uniformly, to a random mask, so the whole object is always hidden.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BoundingBox, ImageBuffer, MaskBuffer};
use crate::rng::RngStream;
use crate::scenegen::TrainingSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    Random,
    ObjectUnion,
}

impl MaskPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskPolicy::Random => "random",
            MaskPolicy::ObjectUnion => "object_union",
        }
    }
}

/// Inclusive ranges for every knob of the random policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskPolicyConfig {
    pub policy: MaskPolicy,
    pub random_box_count_range: (u32, u32),
    pub random_stroke_count_range: (u32, u32),
    pub stroke_width_range: (u32, u32),
    pub stroke_vertex_range: (u32, u32),
    pub stroke_step_range: (f64, f64),
    pub box_area_fraction_range: (f64, f64),
    pub box_aspect_range: (f64, f64),
}

impl Default for MaskPolicyConfig {
    fn default() -> Self {
        Self {
            policy: MaskPolicy::ObjectUnion,
            random_box_count_range: (0, 2),
            random_stroke_count_range: (1, 3),
            stroke_width_range: (3, 7),
            stroke_vertex_range: (4, 12),
            stroke_step_range: (4.0, 12.0),
            box_area_fraction_range: (0.02, 0.12),
            box_aspect_range: (0.5, 2.0),
        }
    }
}

impl MaskPolicyConfig {
    pub fn with_policy(policy: MaskPolicy) -> Self {
        Self {
            policy,
            ..Self::default()
        }
    }

    pub fn validate(&self, canvas: (usize, usize)) -> Result<()> {
        fn ordered<T: PartialOrd + std::fmt::Debug>(name: &str, (lo, hi): (T, T)) -> Result<()> {
            if lo > hi {
                return Err(Error::Config(format!("{name} range {lo:?}..={hi:?} is empty")));
            }
            Ok(())
        }
        ordered("box count", self.random_box_count_range)?;
        ordered("stroke count", self.random_stroke_count_range)?;
        ordered("stroke width", self.stroke_width_range)?;
        ordered("stroke vertices", self.stroke_vertex_range)?;
        ordered("stroke step", self.stroke_step_range)?;
        ordered("box area", self.box_area_fraction_range)?;
        ordered("box aspect", self.box_aspect_range)?;
        let (alo, ahi) = self.box_area_fraction_range;
        if alo <= 0.0 || ahi > 1.0 {
            return Err(Error::Config("box area fractions must lie in (0, 1]".into()));
        }
        if self.box_aspect_range.0 <= 0.0 {
            return Err(Error::Config("box aspect must be positive".into()));
        }
        if self.stroke_vertex_range.0 < 2 {
            return Err(Error::Config("strokes need at least two vertices".into()));
        }
        if self.stroke_width_range.1 as usize > canvas.0.min(canvas.1) {
            return Err(Error::Config("stroke width exceeds canvas".into()));
        }
        Ok(())
    }
}

/// A generated mask plus what the policy did to produce it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSample {
    pub mask: MaskBuffer,
    pub chosen_box: Option<BoundingBox>,
    /// Set when `ObjectUnion` had no box and fell back to a random mask.
    pub fallback: bool,
}

fn random_box(canvas: (usize, usize), cfg: &MaskPolicyConfig, rng: &mut ChaCha8Rng) -> BoundingBox {
    let (h, w) = canvas;
    let area = rng.random_range(cfg.box_area_fraction_range.0..=cfg.box_area_fraction_range.1)
        * (h * w) as f64;
    let aspect = rng.random_range(cfg.box_aspect_range.0..=cfg.box_aspect_range.1);
    let bw = ((area * aspect).sqrt().round() as usize).clamp(1, w);
    let bh = ((area / aspect).sqrt().round() as usize).clamp(1, h);
    let x0 = rng.random_range(0..=w - bw);
    let y0 = rng.random_range(0..=h - bh);
    BoundingBox {
        x0,
        y0,
        x1: x0 + bw,
        y1: y0 + bh,
    }
}

/// Marks every pixel whose center lies within `width / 2` of segment `a-b`.
pub fn draw_thick_segment(mask: &mut MaskBuffer, a: (f64, f64), b: (f64, f64), width: f64) {
    let (h, w) = mask.shape();
    let r = width / 2.0;
    let ymin = (a.0.min(b.0) - r).floor().max(0.0) as usize;
    let ymax = ((a.0.max(b.0) + r).ceil() as usize).min(h);
    let xmin = (a.1.min(b.1) - r).floor().max(0.0) as usize;
    let xmax = ((a.1.max(b.1) + r).ceil() as usize).min(w);
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    for y in ymin..ymax {
        for x in xmin..xmax {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let t = if len2 == 0.0 {
                0.0
            } else {
                (((py - a.0) * dy + (px - a.1) * dx) / len2).clamp(0.0, 1.0)
            };
            let (cy, cx) = (a.0 + t * dy, a.1 + t * dx);
            if (py - cy).powi(2) + (px - cx).powi(2) <= r * r {
                mask.set(y, x, true);
            }
        }
    }
}

fn random_stroke(mask: &mut MaskBuffer, cfg: &MaskPolicyConfig, rng: &mut ChaCha8Rng) {
    let (h, w) = mask.shape();
    let vertices = rng.random_range(cfg.stroke_vertex_range.0..=cfg.stroke_vertex_range.1);
    let width = rng.random_range(cfg.stroke_width_range.0..=cfg.stroke_width_range.1) as f64;
    let mut p = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
    let mut heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    for _ in 1..vertices {
        heading += rng.random_range(-1.2..1.2);
        let step = rng.random_range(cfg.stroke_step_range.0..=cfg.stroke_step_range.1);
        let next = (
            (p.0 + step * heading.sin()).clamp(0.0, h as f64),
            (p.1 + step * heading.cos()).clamp(0.0, w as f64),
        );
        draw_thick_segment(mask, p, next, width);
        p = next;
    }
}

fn random_mask_from(canvas: (usize, usize), cfg: &MaskPolicyConfig, rng: &mut ChaCha8Rng) -> MaskBuffer {
    let mut mask = MaskBuffer::zeros(canvas.0, canvas.1);
    let boxes = rng.random_range(cfg.random_box_count_range.0..=cfg.random_box_count_range.1);
    for _ in 0..boxes {
        let b = random_box(canvas, cfg, rng);
        mask.fill_box(&b).expect("box is drawn inside the canvas");
    }
    let strokes = rng.random_range(cfg.random_stroke_count_range.0..=cfg.random_stroke_count_range.1);
    for _ in 0..strokes {
        random_stroke(&mut mask, cfg, rng);
    }
    mask
}

pub fn random_mask(canvas: (usize, usize), cfg: &MaskPolicyConfig, rng: &RngStream) -> Result<MaskBuffer> {
    cfg.validate(canvas)?;
    Ok(random_mask_from(canvas, cfg, &mut rng.rng()))
}

/// Random mask unioned with one uniformly chosen box. Without boxes the
/// random mask is returned alone and the sample is flagged.
pub fn object_union_mask(
    canvas: (usize, usize),
    boxes: &[BoundingBox],
    cfg: &MaskPolicyConfig,
    rng: &RngStream,
) -> Result<MaskSample> {
    cfg.validate(canvas)?;
    let mut r = rng.rng();
    let random = random_mask_from(canvas, cfg, &mut r);
    if boxes.is_empty() {
        return Ok(MaskSample {
            mask: random,
            chosen_box: None,
            fallback: true,
        });
    }
    let chosen = boxes[r.random_range(0..boxes.len())];
    let mut mask = random;
    mask.fill_box(&chosen)?;
    Ok(MaskSample {
        mask,
        chosen_box: Some(chosen),
        fallback: false,
    })
}

/// Applies whichever policy `cfg` selects.
pub fn sample_mask(
    canvas: (usize, usize),
    boxes: &[BoundingBox],
    cfg: &MaskPolicyConfig,
    rng: &RngStream,
) -> Result<MaskSample> {
    match cfg.policy {
        MaskPolicy::Random => Ok(MaskSample {
            mask: random_mask(canvas, cfg, rng)?,
            chosen_box: None,
            fallback: false,
        }),
        MaskPolicy::ObjectUnion => object_union_mask(canvas, boxes, cfg, rng),
    }
}

#[derive(Debug, thiserror::Error)]
#[error("detector failed: {0}")]
pub struct DetectorError(pub String);

/// Pluggable object detector used when a sample has no ground truth.
pub trait Detector: Send + Sync {
    fn detect(&self, image: &ImageBuffer) -> std::result::Result<Vec<BoundingBox>, DetectorError>;
}

/// Ground-truth boxes when the sample carries a scene, otherwise the
/// detector's boxes; detector failures yield an empty list.
pub fn boxes_for_image(sample: &TrainingSample, detector: Option<&dyn Detector>) -> Vec<BoundingBox> {
    if let Some(scene) = &sample.scene {
        return scene.boxes();
    }
    match detector {
        Some(d) => d.detect(&sample.image).unwrap_or_else(|e| {
            log::warn!("{e}; continuing without boxes");
            Vec::new()
        }),
        None => Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::mask_area_ratio;
    use crate::scenegen::{corpus_sample, CANVAS};

    const C: (usize, usize) = (CANVAS, CANVAS);

    fn boxes_only(k: u32, area: (f64, f64)) -> MaskPolicyConfig {
        MaskPolicyConfig {
            random_box_count_range: (k, k),
            random_stroke_count_range: (0, 0),
            box_area_fraction_range: area,
            ..MaskPolicyConfig::default()
        }
    }

    #[test]
    fn zero_ranges_give_empty_mask() {
        let m = random_mask(C, &boxes_only(0, (0.1, 0.1)), &RngStream::new(1, "m")).unwrap();
        assert_eq!(m.count_ones(), 0);
    }

    #[test]
    fn single_box_is_a_rectangle() {
        let m = random_mask(C, &boxes_only(1, (0.1, 0.1)), &RngStream::new(1, "m")).unwrap();
        let b = m.bbox().unwrap();
        assert_eq!(m, MaskBuffer::from_box(CANVAS, CANVAS, &b).unwrap());
    }

    #[test]
    fn mean_box_area_matches_configured_band() {
        // box areas are uniform on [0.04, 0.10]; rounding of sides adds a
        // little noise but the Monte-Carlo mean must sit at the midpoint
        let cfg = boxes_only(1, (0.04, 0.10));
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|i| mask_area_ratio(&random_mask(C, &cfg, &RngStream::new(i, "m")).unwrap()))
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.07).abs() < 0.002, "mean {mean}");
    }

    #[test]
    fn union_with_empty_random_part_is_the_box() {
        let cfg = boxes_only(0, (0.1, 0.1));
        let b = BoundingBox::new(2, 2, 6, 6).unwrap();
        let s = object_union_mask((8, 8), &[b], &cfg, &RngStream::new(1, "m")).unwrap();
        assert_eq!(s.mask.count_ones(), 16);
        assert_eq!(s.mask, MaskBuffer::from_box(8, 8, &b).unwrap());
    }

    #[test]
    fn full_random_mask_absorbs_box() {
        let cfg = boxes_only(1, (1.0, 1.0));
        let cfg = MaskPolicyConfig {
            box_aspect_range: (1.0, 1.0),
            ..cfg
        };
        let b = BoundingBox::new(2, 2, 6, 6).unwrap();
        let s = object_union_mask((8, 8), &[b], &cfg, &RngStream::new(1, "m")).unwrap();
        assert_eq!(s.mask.count_ones(), 64);
    }

    #[test]
    fn disjoint_box_and_stroke_areas_add() {
        let mut stroke = MaskBuffer::zeros(32, 32);
        draw_thick_segment(&mut stroke, (20.5, 4.0), (20.5, 28.0), 3.0);
        // pixel-count oracle: centers within 1.5 of the horizontal line y=20.5
        // between x=4 and x=28 (plus round caps)
        let mut oracle = 0;
        for y in 0..32 {
            for x in 0..32 {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let cx = px.clamp(4.0, 28.0);
                if (py - 20.5).powi(2) + (px - cx).powi(2) <= 2.25 {
                    oracle += 1;
                }
            }
        }
        assert_eq!(stroke.count_ones(), oracle);
        let b = BoundingBox::new(2, 2, 10, 8).unwrap();
        let union = stroke.union(&MaskBuffer::from_box(32, 32, &b).unwrap()).unwrap();
        assert_eq!(union.count_ones(), oracle + 48);
    }

    #[test]
    fn empty_box_list_falls_back() {
        let s = object_union_mask(C, &[], &MaskPolicyConfig::default(), &RngStream::new(1, "m")).unwrap();
        assert!(s.fallback && s.chosen_box.is_none());
    }

    #[test]
    fn policies_are_deterministic() {
        let cfg = MaskPolicyConfig::default();
        let rng = RngStream::new(11, "m");
        let b = [BoundingBox::new(3, 3, 20, 20).unwrap()];
        assert_eq!(random_mask(C, &cfg, &rng).unwrap(), random_mask(C, &cfg, &rng).unwrap());
        assert_eq!(
            object_union_mask(C, &b, &cfg, &rng).unwrap(),
            object_union_mask(C, &b, &cfg, &rng).unwrap()
        );
    }

    #[test]
    fn invalid_ranges_rejected() {
        let cfg = MaskPolicyConfig {
            stroke_width_range: (5, 2),
            ..MaskPolicyConfig::default()
        };
        assert!(matches!(random_mask(C, &cfg, &RngStream::new(1, "m")), Err(Error::Config(_))));
    }

    struct FixedDetector(BoundingBox);
    impl Detector for FixedDetector {
        fn detect(&self, _: &ImageBuffer) -> std::result::Result<Vec<BoundingBox>, DetectorError> {
            Ok(vec![self.0])
        }
    }
    struct BrokenDetector;
    impl Detector for BrokenDetector {
        fn detect(&self, _: &ImageBuffer) -> std::result::Result<Vec<BoundingBox>, DetectorError> {
            Err(DetectorError("offline".into()))
        }
    }

    #[test]
    fn boxes_come_from_ground_truth_or_detector() {
        let sample = corpus_sample(0, &RngStream::new(2, "corpus")).unwrap();
        let scene = sample.scene.clone().unwrap();
        assert_eq!(boxes_for_image(&sample, None), scene.boxes());

        let mut empty = sample.clone();
        empty.scene.as_mut().unwrap().objects.clear();
        assert!(boxes_for_image(&empty, None).is_empty());

        let bare = TrainingSample {
            image: sample.image.clone(),
            scene: None,
        };
        let fixed = BoundingBox::new(1, 1, 9, 9).unwrap();
        assert_eq!(boxes_for_image(&bare, Some(&FixedDetector(fixed))), vec![fixed]);
        assert!(boxes_for_image(&bare, Some(&BrokenDetector)).is_empty());
    }
}
