//! Image, depth, mask and manifest files.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{at_path, invalid, Error, Result};
use crate::raster::{Image, ScalarMap};

/// Meters per unit of a 16-bit depth PNG.
pub const DEPTH_PNG_SCALE: f32 = 256.0;

/// Loads an 8- or 16-bit PNG/JPEG as RGB in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    at_path(path, (|| {
        let rgb = image::open(path)?.to_rgb32f();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut data = vec![0f32; 3 * h * w];
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = px[c];
            }
        }
        Image::from_clamped(h, w, data)
    })())
}

/// Writes an 8-bit RGB image; the format follows the file extension.
pub fn save_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    at_path(path, (|| {
        let (h, w) = img.dims();
        let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let p = img.get(y as usize, x as usize);
            Rgb(p.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
        });
        buf.save(path)?;
        Ok(())
    })())
}

/// Loads a depth map in meters: a single-channel 16-bit PNG (value / 256)
/// or, for any other extension, the raw layout of [`write_raw_depth`].
pub fn load_depth(path: impl AsRef<Path>) -> Result<ScalarMap> {
    let path = path.as_ref();
    at_path(path, (|| {
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png {
            return decode_raw_depth(&fs::read(path)?);
        }
        match image::open(path)? {
            DynamicImage::ImageLuma16(buf) => {
                let (w, h) = (buf.width() as usize, buf.height() as usize);
                let data = buf.pixels().map(|p| p[0] as f32 / DEPTH_PNG_SCALE).collect();
                ScalarMap::new(h, w, data)
            }
            other => Err(invalid(format!(
                "depth PNG must be single-channel 16-bit, found {:?}",
                other.color()
            ))),
        }
    })())
}

/// Writes a 16-bit depth PNG, saturating at 65535 / 256 m.
pub fn save_depth_png(path: impl AsRef<Path>, depth: &ScalarMap) -> Result<()> {
    let path = path.as_ref();
    at_path(path, (|| {
        let (h, w) = depth.dims();
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let v = depth.get(y as usize, x as usize) * DEPTH_PNG_SCALE;
            Luma([v.round().clamp(0.0, u16::MAX as f32) as u16])
        });
        buf.save(path)?;
        Ok(())
    })())
}

/// Raw depth: little-endian `u32` width, `u32` height, then row-major `f32`.
pub fn write_raw_depth(path: impl AsRef<Path>, depth: &ScalarMap) -> Result<()> {
    let path = path.as_ref();
    at_path(path, (|| {
        let (h, w) = depth.dims();
        let mut out = Vec::with_capacity(8 + 4 * h * w);
        out.extend_from_slice(&(w as u32).to_le_bytes());
        out.extend_from_slice(&(h as u32).to_le_bytes());
        for v in depth.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, out)?;
        Ok(())
    })())
}

pub fn decode_raw_depth(bytes: &[u8]) -> Result<ScalarMap> {
    if bytes.len() < 8 {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            reason: "raw depth header needs 8 bytes".into(),
        });
    }
    let w = u32::from_le_bytes(bytes[0..4].try_into().expect("four bytes")) as usize;
    let h = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes")) as usize;
    let expected = 8 + 4 * w * h;
    if bytes.len() != expected {
        return Err(Error::Format {
            offset: bytes.len().min(expected) as u64,
            reason: format!("raw depth of {w}x{h} needs {expected} bytes, found {}", bytes.len()),
        });
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")))
        .collect();
    ScalarMap::new(h, w, data)
}

/// Loads a validity mask: a pixel is valid when any channel is nonzero.
pub fn load_mask(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<bool>)> {
    let path = path.as_ref();
    at_path(path, (|| {
        let img = image::open(path)?.to_rgba16();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let valid = img.pixels().map(|p| p[0] != 0 || p[1] != 0 || p[2] != 0).collect();
        Ok((h, w, valid))
    })())
}

/// One manifest line: a frame pair with optional depths and ground-truth flow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub frame1: PathBuf,
    pub frame2: PathBuf,
    pub depth1: Option<PathBuf>,
    pub depth2: Option<PathBuf>,
    pub flow: Option<PathBuf>,
}

/// Parses a manifest: whitespace-separated `frame1 frame2 [depth1 depth2 flow]`
/// per line, `#` starts a comment, relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let resolve = |p: &str| -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let entry = match fields.as_slice() {
            [f1, f2] => ManifestEntry {
                frame1: resolve(f1),
                frame2: resolve(f2),
                depth1: None,
                depth2: None,
                flow: None,
            },
            [f1, f2, d1, d2, fl] => ManifestEntry {
                frame1: resolve(f1),
                frame2: resolve(f2),
                depth1: Some(resolve(d1)),
                depth2: Some(resolve(d2)),
                flow: Some(resolve(fl)),
            },
            _ => {
                return Err(Error::Config(format!(
                    "manifest line {}: expected 2 or 5 fields, found {}",
                    lineno + 1,
                    fields.len()
                )))
            }
        };
        entries.push(entry);
    }
    Ok(entries)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}
