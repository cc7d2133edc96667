//! On-disk formats: raw little-endian `f32` rasters with a JSON sidecar,
//! 16-bit binary PGM images and ground-truth JSON.
//!
//! A raster `NAME.f32` holds `width * height` row-major samples; its sidecar
//! `NAME.json` reads `{"width":W,"height":H,"dtype":"f32le","normalized":B}`.
//! PGM samples map to intensities as `sample / maxval`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xaieval_core::grid::{GroundTruth, Heatmap, Image, Roi};

use crate::error::{Error, Result};

pub const DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub width: usize,
    pub height: usize,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalized: Option<bool>,
}

pub fn sidecar_path(raster: &Path) -> PathBuf {
    raster.with_extension("json")
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn f32_to_le_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn le_bytes_to_f32(bytes: &[u8]) -> Option<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return None;
    }
    Some(
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    )
}

fn write_raster(path: &Path, width: usize, height: usize, values: &[f32], normalized: Option<bool>) -> Result<()> {
    write_bytes(path, &f32_to_le_bytes(values))?;
    let side = Sidecar {
        width,
        height,
        dtype: DTYPE.into(),
        normalized,
    };
    write_json(&sidecar_path(path), &side)
}

fn read_raster(path: &Path) -> Result<(Sidecar, Vec<f32>)> {
    let side: Sidecar = read_json(&sidecar_path(path))?;
    if side.dtype != DTYPE {
        return Err(Error::format(path, format!("unsupported dtype {:?}", side.dtype)));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let values = le_bytes_to_f32(&bytes).ok_or_else(|| Error::format(path, "length is not a multiple of 4"))?;
    if values.len() != side.width * side.height {
        return Err(Error::format(
            path,
            format!("{} samples for {}x{}", values.len(), side.height, side.width),
        ));
    }
    Ok((side, values))
}

pub fn write_heatmap(path: &Path, h: &Heatmap) -> Result<()> {
    write_raster(path, h.width(), h.height(), h.values(), Some(h.is_normalized()))
}

pub fn read_heatmap(path: &Path) -> Result<Heatmap> {
    let (side, values) = read_raster(path)?;
    let h = if side.normalized == Some(true) {
        Heatmap::new_normalized(side.width, side.height, values)
    } else {
        Heatmap::new(side.width, side.height, values)
    };
    h.map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_image_f32(path: &Path, img: &Image) -> Result<()> {
    write_raster(path, img.width(), img.height(), img.pixels(), None)
}

/// 16-bit PGM with `maxval` 65535; intensities are clipped to `[0, 1]`.
pub fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width(), img.height()).into_bytes();
    for &v in img.pixels() {
        let s = (f64::from(v).clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.write_all(&s.to_be_bytes()).expect("writing to a Vec cannot fail");
    }
    write_bytes(path, &out)
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m);
    let mut pos = 0;
    let mut fields = Vec::new();
    // Magic, width, height, maxval; comments run to end of line.
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("malformed PGM header"));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(bad("PGM maxval must lie in 1..=65535"));
    }
    pos += 1;
    let wide = maxval > 255;
    let need = width * height * if wide { 2 } else { 1 };
    let data = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated PGM raster"))?;
    let scale = maxval as f32;
    let pixels = if wide {
        data.chunks_exact(2)
            .map(|c| f32::from(u16::from_be_bytes([c[0], c[1]])) / scale)
            .collect()
    } else {
        data.iter().map(|&b| f32::from(b) / scale).collect()
    };
    Image::new(width, height, pixels).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a `.pgm` or `.f32` image by extension.
pub fn read_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => read_pgm(path),
        Some("f32") => {
            let (side, values) = read_raster(path)?;
            Image::new(side.width, side.height, values).map_err(|e| Error::format(path, e.to_string()))
        }
        _ => Err(Error::format(path, "images must be .pgm or .f32")),
    }
}

/// Ground-truth file. Mask and context are raster paths relative to the
/// file's directory; without a mask the hard disk of `radius` is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthFile {
    pub center: [usize; 2],
    pub radius: u32,
    #[serde(rename = "box")]
    pub bbox: [usize; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
}

/// Writes `stem.json` plus `stem-mask.f32` (and `stem-context.f32`).
pub fn write_truth(dir: &Path, stem: &str, t: &GroundTruth) -> Result<PathBuf> {
    let mask = format!("{stem}-mask.f32");
    write_heatmap(&dir.join(&mask), &t.mask)?;
    let context = match &t.context {
        Some(c) => {
            let name = format!("{stem}-context.f32");
            write_heatmap(&dir.join(&name), c)?;
            Some(name)
        }
        None => None,
    };
    let file = TruthFile {
        center: [t.center.0, t.center.1],
        radius: t.radius,
        bbox: t.bbox.as_array(),
        mask: Some(mask),
        context,
    };
    let path = dir.join(format!("{stem}.json"));
    write_json(&path, &file)?;
    Ok(path)
}

pub fn read_truth(path: &Path, width: usize, height: usize) -> Result<GroundTruth> {
    let file: TruthFile = read_json(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let [r0, c0, r1, c1] = file.bbox;
    let bbox = Roi::new(r0, c0, r1, c1).map_err(|e| Error::format(path, e.to_string()))?;
    if !bbox.fits(height, width) {
        return Err(Error::format(path, "box lies outside the image"));
    }
    let fitted = |h: Heatmap, what: &str| {
        if h.dims() == (height, width) {
            Ok(h)
        } else {
            Err(Error::format(path, format!("{what} geometry differs from the image")))
        }
    };
    let mask = match &file.mask {
        Some(m) => fitted(read_heatmap(&dir.join(m))?, "mask")?,
        None => {
            let (cr, cc) = (file.center[0] as f64, file.center[1] as f64);
            let r = f64::from(file.radius);
            let values = (0..width * height)
                .map(|i| {
                    let (y, x) = ((i / width) as f64 - cr, (i % width) as f64 - cc);
                    if (y * y + x * x).sqrt() <= r {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            Heatmap::new(width, height, values)?
        }
    };
    let context = match &file.context {
        Some(c) => Some(fitted(read_heatmap(&dir.join(c))?, "context")?),
        None => None,
    };
    Ok(GroundTruth {
        center: (file.center[0], file.center[1]),
        radius: file.radius,
        bbox,
        mask,
        context,
    })
}
