//! 8-bit PGM (P5) and PNG input/output for [`ImagePlane`].

use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::png::PngEncoder;
use image::{ColorType, ExtendedColorType, ImageEncoder, ImageFormat};

use crate::error::{GlrError, Result};

/// An image with values in `[0, 1]`, stored channel-planar (`c * H * W + y * W + x`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    /// File path or a description of how the plane was synthesized.
    pub provenance: String,
}

impl ImagePlane {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(GlrError::Config(format!(
                "image planes have 1 or 3 channels, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(GlrError::Sizing(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * channels {
            return Err(GlrError::Config(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(ImagePlane {
            height,
            width,
            channels,
            data,
            provenance: String::new(),
        })
    }

    pub fn gray(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(height, width, 1, data)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::gray(height, width, vec![value; height * width]).expect("valid extents")
    }

    pub fn with_provenance(mut self, note: impl Into<String>) -> Self {
        self.provenance = note.into();
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_extents(&self, other: &ImagePlane) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Values as they would be written to an 8-bit file.
    pub fn quantized(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }
}

/// Clamp to `[0, 1]` and round half away from zero onto `0..=255`.
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImagePlane> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| GlrError::io(path, e))?;
    let plane = if bytes.starts_with(b"P5") {
        parse_pgm(&bytes)?
    } else if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes)?
    } else {
        let head: String = bytes
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect::<Vec<_>>()
            .join(" ");
        return Err(GlrError::Format(format!(
            "{}: expected PGM (P5) or PNG, header bytes [{head}]",
            path.display()
        )));
    };
    Ok(plane.with_provenance(path.display().to_string()))
}

/// Writes PGM when the extension is `.pgm`, PNG otherwise.
pub fn save_image(plane: &ImagePlane, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let pgm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let bytes = if pgm {
        encode_pgm(plane)?
    } else {
        encode_png(plane)?
    };
    fs::write(path, bytes).map_err(|e| GlrError::io(PathBuf::from(path), e))
}

fn parse_pgm(bytes: &[u8]) -> Result<ImagePlane> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| GlrError::Format("malformed PGM header".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(GlrError::Format(format!(
            "PGM P5 {width}x{height} with maxval {maxval}; only 8-bit (maxval 255) is supported"
        )));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(GlrError::Format("malformed PGM header".into()));
    }
    pos += 1;
    let pixels = bytes.get(pos..pos + width * height).ok_or_else(|| {
        GlrError::Format(format!("PGM P5 {width}x{height}: truncated pixel data"))
    })?;
    ImagePlane::gray(
        height,
        width,
        pixels.iter().map(|&b| b as f64 / 255.0).collect(),
    )
}

fn decode_png(bytes: &[u8]) -> Result<ImagePlane> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| GlrError::Format(format!("PNG: {e}")))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = w * h;
    match img.color() {
        ColorType::L8 => {
            let buf = img.into_luma8();
            ImagePlane::gray(
                h,
                w,
                buf.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
            )
        }
        ColorType::Rgb8 => {
            let buf = img.into_rgb8();
            let mut data = vec![0.0; 3 * n];
            for (i, px) in buf.as_raw().chunks_exact(3).enumerate() {
                for c in 0..3 {
                    data[c * n + i] = px[c] as f64 / 255.0;
                }
            }
            ImagePlane::new(h, w, 3, data)
        }
        other => Err(GlrError::Format(format!(
            "PNG {w}x{h} with color type {other:?}; only 8-bit gray or RGB is supported"
        ))),
    }
}

fn encode_pgm(plane: &ImagePlane) -> Result<Vec<u8>> {
    if plane.channels != 1 {
        return Err(GlrError::Format(format!(
            "PGM output needs a grayscale plane, got {} channels",
            plane.channels
        )));
    }
    let mut out = format!("P5\n{} {}\n255\n", plane.width, plane.height).into_bytes();
    out.extend(plane.quantized());
    Ok(out)
}

fn encode_png(plane: &ImagePlane) -> Result<Vec<u8>> {
    let (w, h) = (plane.width as u32, plane.height as u32);
    let n = plane.height * plane.width;
    let q = plane.quantized();
    let (raw, color) = if plane.channels == 1 {
        (q, ExtendedColorType::L8)
    } else {
        let mut raw = vec![0u8; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                raw[3 * i + c] = q[c * n + i];
            }
        }
        (raw, ExtendedColorType::Rgb8)
    };
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(&raw, w, h, color)
        .map_err(|e| GlrError::Format(format!("PNG encode: {e}")))?;
    Ok(out)
}
