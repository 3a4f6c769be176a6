//! Raster primitives: RGB images, binary edit masks and boxes.
//!
//! Mask polarity is fixed crate-wide: `1` marks a pixel to be edited, `0` a
//! context pixel that must survive unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_SIDE: usize = 8;
pub const CHANNELS: usize = 3;

/// Row-major, channel-interleaved RGB image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::Shape(format!(
                "image {height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::Shape(format!(
                "expected {} values for {height}x{width}x{CHANNELS}, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel value {bad} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    /// Builds an image, clamping every value into `[0, 1]` first.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in data.iter_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        CHANNELS
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        for c in 0..CHANNELS {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|v| (v * 255.0).round() / 255.0)
                .collect(),
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    pub fn crop(&self, bbox: &BoundingBox) -> Result<Self> {
        bbox.validate(self.height, self.width)?;
        let mut data = Vec::with_capacity(bbox.area() * CHANNELS);
        for y in bbox.y0..bbox.y1 {
            let start = (y * self.width + bbox.x0) * CHANNELS;
            let end = (y * self.width + bbox.x1) * CHANNELS;
            data.extend_from_slice(&self.data[start..end]);
        }
        // crops may be thinner than MIN_SIDE, so skip the public constructor
        Ok(Self {
            height: bbox.height(),
            width: bbox.width(),
            data,
        })
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Self> {
        if (height, width) == self.shape() {
            return Ok(self.clone());
        }
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                let (a, b, c, d) = (
                    self.get(y0, x0),
                    self.get(y0, x1),
                    self.get(y1, x0),
                    self.get(y1, x1),
                );
                for ch in 0..CHANNELS {
                    let top = a[ch] * (1.0 - wx) + b[ch] * wx;
                    let bottom = c[ch] * (1.0 - wx) + d[ch] * wx;
                    data.push((top * (1.0 - wy) + bottom * wy).clamp(0.0, 1.0));
                }
            }
        }
        Self::new(height, width, data)
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample_area(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Shape(format!(
                "{}x{} is not divisible by {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let norm = 1.0 / (factor * factor) as f32;
        let mut data = vec![0.0f32; h * w * CHANNELS];
        for y in 0..self.height {
            for x in 0..self.width {
                let px = self.get(y, x);
                let o = ((y / factor) * w + x / factor) * CHANNELS;
                for c in 0..CHANNELS {
                    data[o + c] += px[c] * norm;
                }
            }
        }
        Self::from_clamped(h, w, data)
    }

    pub fn upsample_nearest(&self, factor: usize) -> Result<Self> {
        let (h, w) = (self.height * factor, self.width * factor);
        let mut data = Vec::with_capacity(h * w * CHANNELS);
        for y in 0..h {
            for x in 0..w {
                data.extend_from_slice(&self.get(y / factor, x / factor));
            }
        }
        Self::new(h, w, data)
    }

    /// Copy of the image with every edit-region pixel set to zero.
    pub fn masked(&self, mask: &MaskBuffer) -> Result<Self> {
        check_shape(self, mask)?;
        let mut out = self.clone();
        for (i, &m) in mask.data().iter().enumerate() {
            if m == 1 {
                out.data[i * CHANNELS..(i + 1) * CHANNELS].fill(0.0);
            }
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Binary mask, `1` = edit region.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskBuffer {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl MaskBuffer {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "expected {} mask values for {height}x{width}, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Domain(format!("mask value {bad} is not binary")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_box(height: usize, width: usize, bbox: &BoundingBox) -> Result<Self> {
        let mut mask = Self::zeros(height, width);
        mask.fill_box(bbox)?;
        Ok(mask)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn fill_box(&mut self, bbox: &BoundingBox) -> Result<()> {
        bbox.validate(self.height, self.width)?;
        for y in bbox.y0..bbox.y1 {
            self.data[y * self.width + bbox.x0..y * self.width + bbox.x1].fill(1);
        }
        Ok(())
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// True when the mask is all-zero or all-one.
    pub fn is_degenerate(&self) -> bool {
        let ones = self.count_ones();
        ones == 0 || ones == self.data.len()
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "mask union {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect(),
        })
    }

    /// Whether every pixel of `bbox` is marked for editing.
    pub fn covers_box(&self, bbox: &BoundingBox) -> bool {
        (bbox.y0..bbox.y1).all(|y| (bbox.x0..bbox.x1).all(|x| self.get(y, x)))
    }

    pub fn intersects_box(&self, bbox: &BoundingBox) -> bool {
        (bbox.y0..bbox.y1).any(|y| (bbox.x0..bbox.x1).any(|x| self.get(y, x)))
    }

    /// Tight half-open box around the edit region, `None` for an empty mask.
    pub fn bbox(&self) -> Option<BoundingBox> {
        let mut bbox: Option<BoundingBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bbox = Some(match bbox {
                        None => BoundingBox {
                            x0: x,
                            y0: y,
                            x1: x + 1,
                            y1: y + 1,
                        },
                        Some(b) => BoundingBox {
                            x0: b.x0.min(x),
                            y0: b.y0.min(y),
                            x1: b.x1.max(x + 1),
                            y1: b.y1.max(y + 1),
                        },
                    });
                }
            }
        }
        bbox
    }

    /// Box-filter downsampling to fractional coverage values.
    pub fn downsample_coverage(&self, factor: usize) -> Result<Vec<f32>> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Shape(format!(
                "{}x{} mask is not divisible by {factor}",
                self.height, self.width
            )));
        }
        let w = self.width / factor;
        let norm = 1.0 / (factor * factor) as f32;
        let mut out = vec![0.0f32; (self.height / factor) * w];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    out[(y / factor) * w + x / factor] += norm;
                }
            }
        }
        Ok(out)
    }

    /// Any-coverage downsampling: a coarse pixel is set if any fine pixel is.
    pub fn downsample_any(&self, factor: usize) -> Result<Self> {
        let coverage = self.downsample_coverage(factor)?;
        Self::new(
            self.height / factor,
            self.width / factor,
            coverage.iter().map(|&c| (c > 0.0) as u8).collect(),
        )
    }
}

/// Half-open pixel box `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::Domain(format!(
                "empty box ({x0},{y0})-({x1},{y1})"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 || self.x1 > width || self.y1 > height {
            return Err(Error::Domain(format!(
                "box {self:?} invalid for canvas {height}x{width}"
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn union(&self, other: &Self) -> Self {
        Self {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    /// Grows the box by `margin` on all sides, clipped to the canvas.
    pub fn expand(&self, margin: usize, height: usize, width: usize) -> Self {
        Self {
            x0: self.x0.saturating_sub(margin),
            y0: self.y0.saturating_sub(margin),
            x1: (self.x1 + margin).min(width),
            y1: (self.y1 + margin).min(height),
        }
    }

    pub fn overlaps(&self, other: &Self) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub const ALL: [SizeBucket; 3] = [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large];

    pub fn as_str(&self) -> &'static str {
        match self {
            SizeBucket::Small => "Small",
            SizeBucket::Medium => "Medium",
            SizeBucket::Large => "Large",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.as_str().eq_ignore_ascii_case(s))
    }
}

/// Upper edge of the Small bucket, inclusive.
pub const SMALL_MAX: f64 = 0.215;
/// Upper edge of the Medium bucket, inclusive.
pub const MEDIUM_MAX: f64 = 0.369;
/// Lower end of the observed Small range.
pub const SMALL_MIN: f64 = 0.057;

pub fn mask_area_ratio(mask: &MaskBuffer) -> f64 {
    mask.count_ones() as f64 / (mask.height * mask.width) as f64
}

pub fn size_bucket(ratio: f64) -> Result<SizeBucket> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Domain(format!("area ratio {ratio} outside [0,1]")));
    }
    Ok(if ratio <= SMALL_MAX {
        SizeBucket::Small
    } else if ratio <= MEDIUM_MAX {
        SizeBucket::Medium
    } else {
        SizeBucket::Large
    })
}

fn check_shape(image: &ImageBuffer, mask: &MaskBuffer) -> Result<()> {
    if image.shape() != mask.shape() {
        return Err(Error::Shape(format!(
            "image {:?} vs mask {:?}",
            image.shape(),
            mask.shape()
        )));
    }
    Ok(())
}

/// Takes `edited` inside the edit region and `original` everywhere else.
/// Context pixels are copied, never recomputed, so they match bit for bit.
pub fn composite(
    original: &ImageBuffer,
    edited: &ImageBuffer,
    mask: &MaskBuffer,
) -> Result<ImageBuffer> {
    check_shape(original, mask)?;
    check_shape(edited, mask)?;
    let mut out = original.clone();
    for (i, &m) in mask.data().iter().enumerate() {
        if m == 1 {
            let span = i * CHANNELS..(i + 1) * CHANNELS;
            out.data[span.clone()].copy_from_slice(&edited.data[span]);
        }
    }
    Ok(out)
}

pub fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta <= f32::EPSILON {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let sat = if max <= f32::EPSILON { 0.0 } else { delta / max };
    [hue, sat, max]
}

pub fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        (r + m).clamp(0.0, 1.0),
        (g + m).clamp(0.0, 1.0),
        (b + m).clamp(0.0, 1.0),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient(h: usize, w: usize) -> ImageBuffer {
        let data = (0..h * w * 3)
            .map(|i| (i % 97) as f32 / 96.0)
            .collect();
        ImageBuffer::new(h, w, data).unwrap()
    }

    #[test]
    fn area_ratio_examples() {
        assert_eq!(mask_area_ratio(&MaskBuffer::zeros(8, 8)), 0.0);
        assert_eq!(mask_area_ratio(&MaskBuffer::ones(8, 8)), 1.0);
        let mut m = MaskBuffer::zeros(8, 8);
        for i in 0..16 {
            m.set(i / 8, i % 8, true);
        }
        let direct = m.data().iter().filter(|&&v| v == 1).count() as f64 / 64.0;
        assert_eq!(direct, 0.25);
        assert_eq!(mask_area_ratio(&m), direct);
    }

    #[test]
    fn bucket_examples_and_edges() {
        assert_eq!(size_bucket(0.10).unwrap(), SizeBucket::Small);
        assert_eq!(size_bucket(0.30).unwrap(), SizeBucket::Medium);
        assert_eq!(size_bucket(0.50).unwrap(), SizeBucket::Large);
        assert_eq!(size_bucket(0.215).unwrap(), SizeBucket::Small);
        assert_eq!(size_bucket(0.369).unwrap(), SizeBucket::Medium);
        assert!(matches!(size_bucket(1.2), Err(Error::Domain(_))));
        assert!(matches!(size_bucket(-0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn composite_trivial_masks() {
        let a = gradient(8, 8);
        let b = ImageBuffer::filled(8, 8, [0.3, 0.2, 0.1]).unwrap();
        assert_eq!(composite(&a, &b, &MaskBuffer::zeros(8, 8)).unwrap(), a);
        assert_eq!(composite(&a, &b, &MaskBuffer::ones(8, 8)).unwrap(), b);
    }

    #[test]
    fn composite_checkerboard_matches_loop_oracle() {
        let a = gradient(12, 10);
        let b = ImageBuffer::filled(12, 10, [0.9, 0.8, 0.7]).unwrap();
        let data = (0..120).map(|i| (((i / 10) + (i % 10)) % 2) as u8).collect();
        let mask = MaskBuffer::new(12, 10, data).unwrap();
        let out = composite(&a, &b, &mask).unwrap();
        for y in 0..12 {
            for x in 0..10 {
                let expect = if (y + x) % 2 == 1 { b.get(y, x) } else { a.get(y, x) };
                assert_eq!(out.get(y, x), expect);
            }
        }
    }

    #[test]
    fn composite_rejects_shape_mismatch() {
        let a = gradient(8, 8);
        let b = gradient(8, 9);
        assert!(matches!(
            composite(&a, &b, &MaskBuffer::zeros(8, 8)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn image_invariants_enforced() {
        assert!(ImageBuffer::new(4, 8, vec![0.0; 96]).is_err());
        assert!(ImageBuffer::new(8, 8, vec![1.5; 192]).is_err());
        assert!(MaskBuffer::new(8, 8, vec![2; 64]).is_err());
    }

    #[test]
    fn bbox_of_l_shape() {
        let mut m = MaskBuffer::zeros(10, 10);
        for y in 2..8 {
            m.set(y, 3, true);
        }
        for x in 3..9 {
            m.set(7, x, true);
        }
        assert_eq!(m.bbox().unwrap(), BoundingBox::new(3, 2, 9, 8).unwrap());
        assert!(MaskBuffer::zeros(8, 8).bbox().is_none());
    }

    #[test]
    fn hsv_round_trip() {
        for &rgb in &[[1.0, 0.0, 0.0], [0.2, 0.6, 0.9], [0.5, 0.5, 0.5]] {
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for c in 0..3 {
                assert!((back[c] - rgb[c]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn area_downsample_averages_blocks() {
        let img = gradient(32, 32);
        let small = img.downsample_area(4).unwrap();
        assert_eq!(small.shape(), (8, 8));
        let mut expect = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                expect += img.get(y, x)[1] / 16.0;
            }
        }
        assert!((small.get(0, 0)[1] - expect).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn composite_is_idempotent(seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = crate::rng::RngStream::new(seed, "p").rng();
            let o = ImageBuffer::new(8, 8, (0..192).map(|_| rng.random::<f32>()).collect()).unwrap();
            let e = ImageBuffer::new(8, 8, (0..192).map(|_| rng.random::<f32>()).collect()).unwrap();
            let m = MaskBuffer::new(8, 8, (0..64).map(|_| rng.random_range(0..2u8)).collect()).unwrap();
            let once = composite(&o, &e, &m).unwrap();
            let twice = composite(&o, &once, &m).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn bucket_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(size_bucket(lo).unwrap() <= size_bucket(hi).unwrap());
        }
    }
}
