//! Raster file formats: binary PPM (P6) colour, binary PGM (P5) masks and
//! the `BDEP` float grid.
//!
//! `BDEP` layout, little-endian: `b"BDEP"`, `u32 width`, `u32 height`,
//! `u32 channels`, then `width · height · channels` `f32` values, row-major
//! with channels interleaved. Depth grids use one channel; a non-positive
//! value marks an invalid pixel.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rendering::Mask;

pub const BDEP_MAGIC: &[u8; 4] = b"BDEP";

/// RGB raster with channels in `[0, 1]`, interleaved row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn pixel(&self, u: usize, v: usize) -> [f64; 3] {
        let i = 3 * (v * self.width + u);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, u: usize, v: usize, rgb: [f64; 3]) {
        let i = 3 * (v * self.width + u);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Luma `0.299 R + 0.587 G + 0.114 B`.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self
                .data
                .chunks_exact(3)
                .map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2])
                .collect(),
        }
    }

    /// Rounds every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        Self {
            data: self.data.iter().map(|&v| quantize(v) as f64 / 255.0).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// Per-pixel camera-frame depth; non-positive entries are invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        let d = self.data[v * self.width + u];
        (d > 0.0).then_some(d as f64)
    }

    /// Depth at a continuous pixel. Inverse depth is interpolated bilinearly,
    /// which is exact for planar surfaces; every contributing neighbour must
    /// be valid.
    pub fn sample(&self, u: f64, v: f64) -> Option<f64> {
        if !(u >= 0.0 && v >= 0.0) {
            return None;
        }
        let (w, h) = (self.width, self.height);
        if u > (w - 1) as f64 || v > (h - 1) as f64 {
            return None;
        }
        let (u0, v0) = (u.floor() as usize, v.floor() as usize);
        let (fu, fv) = (u - u0 as f64, v - v0 as f64);
        let u1 = (u0 + 1).min(w - 1);
        let v1 = (v0 + 1).min(h - 1);
        let mut inv = 0.0;
        for (uu, vv, wt) in [
            (u0, v0, (1.0 - fu) * (1.0 - fv)),
            (u1, v0, fu * (1.0 - fv)),
            (u0, v1, (1.0 - fu) * fv),
            (u1, v1, fu * fv),
        ] {
            if wt == 0.0 {
                continue;
            }
            inv += wt / self.get(uu, vv)?;
        }
        (inv > 0.0).then(|| 1.0 / inv)
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    if !img.data.iter().all(|v| v.is_finite()) {
        return Err(Error::format(path, "refusing to export a non-finite raster"));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize(v)));
    write(path, &out)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = read(path)?;
    let (w, h, body) = parse_netpbm(&bytes, b"P6").map_err(|m| Error::format(path, m))?;
    if body.len() != w * h * 3 {
        return Err(Error::format(path, format!("expected {} bytes of pixels", w * h * 3)));
    }
    Ok(Image {
        width: w,
        height: h,
        data: body.iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

pub fn write_pgm(path: &Path, mask: &Mask) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.data.iter().map(|&m| if m { 255u8 } else { 0 }));
    write(path, &out)
}

/// Any non-zero level reads as `true`.
pub fn read_pgm(path: &Path) -> Result<Mask> {
    let bytes = read(path)?;
    let (w, h, body) = parse_netpbm(&bytes, b"P5").map_err(|m| Error::format(path, m))?;
    if body.len() != w * h {
        return Err(Error::format(path, format!("expected {} bytes of pixels", w * h)));
    }
    Ok(Mask {
        width: w,
        height: h,
        data: body.iter().map(|&b| b != 0).collect(),
    })
}

fn parse_netpbm<'a>(
    bytes: &'a [u8],
    magic: &[u8],
) -> std::result::Result<(usize, usize, &'a [u8]), String> {
    if !bytes.starts_with(magic) {
        return Err(format!("missing {} header", String::from_utf8_lossy(magic)));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad header field at byte {start}"))?;
    }
    if fields[2] != 255 {
        return Err(format!("only 8-bit rasters are supported (maxval {})", fields[2]));
    }
    // Exactly one whitespace byte separates the header from the pixels.
    Ok((fields[0], fields[1], &bytes[(pos + 1).min(bytes.len())..]))
}

pub fn write_bdep(path: &Path, width: usize, height: usize, channels: usize, data: &[f32]) -> Result<()> {
    if data.len() != width * height * channels {
        return Err(Error::format(path, "grid size does not match header"));
    }
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::format(path, "refusing to export a non-finite raster"));
    }
    let mut out = Vec::with_capacity(16 + 4 * data.len());
    out.extend_from_slice(BDEP_MAGIC);
    for v in [width, height, channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write(path, &out)
}

/// Returns `(width, height, channels, values)`.
pub fn read_bdep(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let bytes = read(path)?;
    if bytes.len() < 16 || &bytes[..4] != BDEP_MAGIC {
        return Err(Error::format(path, "missing BDEP header"));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (w, h, c) = (field(0), field(1), field(2));
    if bytes.len() != 16 + 4 * w * h * c {
        return Err(Error::format(
            path,
            format!("expected {} bytes for a {w}×{h}×{c} grid", 16 + 4 * w * h * c),
        ));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((w, h, c, data))
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    write_bdep(path, depth.width, depth.height, 1, &depth.data)
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let (width, height, c, data) = read_bdep(path)?;
    if c != 1 {
        return Err(Error::format(path, format!("depth grid must have 1 channel, has {c}")));
    }
    Ok(DepthMap {
        width,
        height,
        data,
    })
}
