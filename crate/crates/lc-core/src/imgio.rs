//! Binary netpbm I/O: PPM (P6) for images and colorized label maps, PGM (P5)
//! for label grids, plus the JSON dataset manifest. Both formats are pinned
//! to 8-bit maxval 255 so round trips are lossless.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LcError, Result};
use crate::label::{LabelMap, IGNORE_LABEL};
use crate::tensor::{Elem, Shape4, Tensor};

fn fmt_err(offset: usize, msg: impl Into<String>) -> LcError {
    LcError::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Parse a netpbm header: magic, whitespace/comments, width, height, maxval.
/// Returns (width, height, payload offset).
fn parse_header(bytes: &[u8], magic: &[u8; 2], path_hint: &str) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(fmt_err(
            0,
            format!(
                "{path_hint}: expected magic {}{}",
                magic[0] as char, magic[1] as char
            ),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and '#' comments
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
        if start == pos {
            return Err(fmt_err(pos, format!("{path_hint}: expected integer in header")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text
            .parse()
            .map_err(|_| fmt_err(start, format!("{path_hint}: bad integer {text}")))?;
    }
    if fields[2] != 255 {
        return Err(fmt_err(
            pos,
            format!("{path_hint}: maxval must be 255, got {}", fields[2]),
        ));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fmt_err(pos, format!("{path_hint}: missing header terminator")));
    }
    pos += 1;
    Ok((fields[0], fields[1], pos))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(LcError::shape(format!(
            "ppm payload {} bytes, expected {}",
            rgb.len(),
            width * height * 3
        )));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{width} {height}\n255\n")?;
    f.write_all(rgb)?;
    f.flush()?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let hint = path.display().to_string();
    let (w, h, off) = parse_header(&bytes, b"P6", &hint)?;
    let need = w * h * 3;
    if bytes.len() < off + need {
        return Err(fmt_err(
            bytes.len(),
            format!("{hint}: short payload, need {} bytes after header", need),
        ));
    }
    Ok((w, h, bytes[off..off + need].to_vec()))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != width * height {
        return Err(LcError::shape(format!(
            "pgm payload {} bytes, expected {}",
            gray.len(),
            width * height
        )));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(gray)?;
    f.flush()?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let hint = path.display().to_string();
    let (w, h, off) = parse_header(&bytes, b"P5", &hint)?;
    let need = w * h;
    if bytes.len() < off + need {
        return Err(fmt_err(
            bytes.len(),
            format!("{hint}: short payload, need {} bytes after header", need),
        ));
    }
    Ok((w, h, bytes[off..off + need].to_vec()))
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let (h, w) = labels.dims();
    write_pgm(path, w, h, labels.data())
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let (w, h, data) = read_pgm(path)?;
    Ok(LabelMap::from_vec(h, w, data))
}

/// (1, 3, h, w) tensor in [0, 1] -> 8-bit RGB rows.
pub fn image_to_rgb8<T: Elem>(image: &Tensor<T>) -> Result<(usize, usize, Vec<u8>)> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(LcError::shape(format!(
            "expected (1, 3, h, w) image, got {s}"
        )));
    }
    let mut rgb = vec![0u8; s.h * s.w * 3];
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                let v = image.at(0, c, y, x).to_f64().clamp(0.0, 1.0);
                rgb[(y * s.w + x) * 3 + c] = (v * 255.0).round() as u8;
            }
        }
    }
    Ok((s.w, s.h, rgb))
}

pub fn write_image<T: Elem>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let (w, h, rgb) = image_to_rgb8(image)?;
    write_ppm(path, w, h, &rgb)
}

pub fn read_image<T: Elem>(path: &Path) -> Result<Tensor<T>> {
    let (w, h, rgb) = read_ppm(path)?;
    let mut t = Tensor::zeros(Shape4::new(1, 3, h, w));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = rgb[(y * w + x) * 3 + c] as f64 / 255.0;
                t.set(0, c, y, x, T::from_f64(v));
            }
        }
    }
    Ok(t)
}

/// The standard segmentation palette (bit-reversal construction); entry k is
/// a fixed color for class k, ignore renders as light gray.
pub fn palette_color(class: u8) -> [u8; 3] {
    if class == IGNORE_LABEL {
        return [224, 224, 192];
    }
    let mut c = class as u32;
    let mut rgb = [0u32; 3];
    let mut shift = 7i32;
    while c != 0 && shift >= 0 {
        for (j, v) in rgb.iter_mut().enumerate() {
            *v |= ((c >> j) & 1) << shift;
        }
        c >>= 3;
        shift -= 1;
    }
    [rgb[0] as u8, rgb[1] as u8, rgb[2] as u8]
}

/// Write labels as a colorized PPM using the fixed palette.
pub fn write_colormap(path: &Path, labels: &LabelMap) -> Result<()> {
    let (h, w) = labels.dims();
    let mut rgb = vec![0u8; h * w * 3];
    for (i, &l) in labels.data().iter().enumerate() {
        let c = palette_color(l);
        rgb[i * 3..i * 3 + 3].copy_from_slice(&c);
    }
    write_ppm(path, w, h, &rgb)
}

/// Write a binary mask as a PPM (white = active).
pub fn write_mask(path: &Path, mask: &crate::region::RegionMask) -> Result<()> {
    let (h, w) = mask.dims();
    let mut rgb = vec![0u8; h * w * 3];
    for (i, bit) in mask.iter_bits().enumerate() {
        let v = if bit { 255 } else { 0 };
        rgb[i * 3..i * 3 + 3].copy_from_slice(&[v, v, v]);
    }
    write_ppm(path, w, h, &rgb)
}

/// One dataset entry: image and label paths, relative to the manifest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_path: String,
    pub label_path: String,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let json = serde_json::to_string_pretty(entries)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Resolve a manifest entry path against the manifest's directory.
pub fn resolve_manifest_path(manifest: &Path, entry: &str) -> PathBuf {
    let p = Path::new(entry);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Load all (image, labels) pairs listed in a manifest.
pub fn load_manifest_dataset<T: Elem>(manifest: &Path) -> Result<Vec<(Tensor<T>, LabelMap)>> {
    let entries = read_manifest(manifest)?;
    entries
        .iter()
        .map(|e| {
            let img = read_image::<T>(&resolve_manifest_path(manifest, &e.image_path))?;
            let lab = read_labels(&resolve_manifest_path(manifest, &e.label_path))?;
            Ok((img, lab))
        })
        .collect()
}
