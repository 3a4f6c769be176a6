//! File formats: 8-bit RGB PNG images, 1-bit PNG or RLE-JSON masks, and the
//! JSON sidecar written next to every raster.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ImageBuffer, MaskBuffer};

pub const POLARITY: &str = "1=edit,0=context";

pub fn encode_png(image: &ImageBuffer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width() as u32, image.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&image.to_rgb8())?;
    }
    Ok(out)
}

struct Decoded {
    height: usize,
    width: usize,
    color: png::ColorType,
    /// 8-bit samples, one per channel
    samples: Vec<u8>,
}

fn decode_raw(bytes: &[u8]) -> Result<Decoded> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    // expand palettes and sub-byte depths to 8-bit samples
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Png("image too large".into()))?];
    let info = reader.next_frame(&mut buf)?;
    buf.truncate(info.buffer_size());
    Ok(Decoded {
        height: info.height as usize,
        width: info.width as usize,
        color: info.color_type,
        samples: buf,
    })
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageBuffer> {
    let d = decode_raw(bytes)?;
    let rgb: Vec<u8> = match d.color {
        png::ColorType::Rgb => d.samples,
        png::ColorType::Rgba => d
            .samples
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        png::ColorType::Grayscale => d.samples.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => d
            .samples
            .chunks_exact(2)
            .flat_map(|p| [p[0], p[0], p[0]])
            .collect(),
        png::ColorType::Indexed => return Err(Error::Png("unexpanded palette".into())),
    };
    ImageBuffer::from_rgb8(d.height, d.width, &rgb)
}

/// Encodes a mask as a 1-bit grayscale PNG (white = edit region).
pub fn encode_mask_png(mask: &MaskBuffer) -> Result<Vec<u8>> {
    let (h, w) = mask.shape();
    let stride = w.div_ceil(8);
    let mut packed = vec![0u8; stride * h];
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                packed[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&packed)?;
    }
    Ok(out)
}

/// Decodes any grayscale or color PNG into a mask; a pixel is in the edit
/// region when its luminance is at least half scale. A fully transparent
/// pixel of an RGBA/GA image is treated as context.
pub fn decode_mask_png(bytes: &[u8]) -> Result<MaskBuffer> {
    let d = decode_raw(bytes)?;
    let (channels, alpha) = match d.color {
        png::ColorType::Grayscale => (1, false),
        png::ColorType::GrayscaleAlpha => (2, true),
        png::ColorType::Rgb => (3, false),
        png::ColorType::Rgba => (4, true),
        png::ColorType::Indexed => return Err(Error::Png("unexpanded palette".into())),
    };
    // 1-bit grayscale expands to 0/255 under EXPAND
    let data = d
        .samples
        .chunks_exact(channels)
        .map(|p| {
            let color = if alpha { &p[..channels - 1] } else { p };
            let lum = color.iter().map(|&v| v as u32).sum::<u32>() / color.len() as u32;
            let opaque = !alpha || p[channels - 1] >= 128;
            (opaque && lum >= 128) as u8
        })
        .collect();
    MaskBuffer::new(d.height, d.width, data)
}

/// Run-length mask encoding: alternating run lengths over the row-major
/// pixel sequence, starting with a (possibly empty) run of zeros.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub polarity: String,
    pub counts: Vec<usize>,
}

impl RleMask {
    pub fn encode(mask: &MaskBuffer) -> Self {
        let mut counts = Vec::new();
        let mut current = 0u8;
        let mut run = 0usize;
        for &v in mask.data() {
            if v == current {
                run += 1;
            } else {
                counts.push(run);
                current = v;
                run = 1;
            }
        }
        counts.push(run);
        Self {
            height: mask.height(),
            width: mask.width(),
            polarity: POLARITY.to_string(),
            counts,
        }
    }

    pub fn decode(&self) -> Result<MaskBuffer> {
        if self.polarity != POLARITY {
            return Err(Error::Domain(format!("unsupported polarity {:?}", self.polarity)));
        }
        let total: usize = self.counts.iter().sum();
        if total != self.height * self.width {
            return Err(Error::Shape(format!(
                "RLE covers {total} pixels, expected {}",
                self.height * self.width
            )));
        }
        let mut data = Vec::with_capacity(total);
        for (i, &run) in self.counts.iter().enumerate() {
            data.extend(std::iter::repeat_n((i % 2) as u8, run));
        }
        MaskBuffer::new(self.height, self.width, data)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RasterKind {
    Image,
    Mask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    pub kind: RasterKind,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub polarity: Option<String>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_image(path: &Path, image: &ImageBuffer) -> Result<()> {
    std::fs::write(path, encode_png(image)?)?;
    let sidecar = Sidecar {
        kind: RasterKind::Image,
        height: image.height(),
        width: image.width(),
        channels: image.channels(),
        polarity: None,
    };
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

/// Writes a mask as 1-bit PNG, or as RLE-JSON when the path ends in `.json`.
pub fn save_mask(path: &Path, mask: &MaskBuffer) -> Result<()> {
    if path.extension().is_some_and(|e| e == "json") {
        std::fs::write(path, serde_json::to_vec(&RleMask::encode(mask))?)?;
        return Ok(());
    }
    std::fs::write(path, encode_mask_png(mask)?)?;
    let sidecar = Sidecar {
        kind: RasterKind::Mask,
        height: mask.height(),
        width: mask.width(),
        channels: 1,
        polarity: Some(POLARITY.to_string()),
    };
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    decode_png(&std::fs::read(path)?)
}

pub fn load_mask(path: &Path) -> Result<MaskBuffer> {
    let bytes = std::fs::read(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        let rle: RleMask = serde_json::from_slice(&bytes)?;
        return rle.decode();
    }
    let mask = decode_mask_png(&bytes)?;
    let side = sidecar_path(path);
    if side.exists() {
        let sidecar: Sidecar = serde_json::from_slice(&std::fs::read(side)?)?;
        if (sidecar.height, sidecar.width) != mask.shape() {
            return Err(Error::Shape(format!(
                "sidecar says {}x{}, png is {:?}",
                sidecar.height,
                sidecar.width,
                mask.shape()
            )));
        }
        if sidecar.polarity.as_deref().is_some_and(|p| p != POLARITY) {
            return Err(Error::Domain(format!("unsupported polarity {:?}", sidecar.polarity)));
        }
    }
    Ok(mask)
}
