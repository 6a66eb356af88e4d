//! Binary Netpbm: P6 colour images and P5 greymaps, 8-bit only.

use std::fs;
use std::path::{Path, PathBuf};

use super::{default_class_names, Dataset, Split};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

/// Greymap values at or above this are attackable mask cells.
pub const MASK_THRESHOLD: u8 = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PnmKind {
    /// P5
    Grey,
    /// P6
    Rgb,
}

impl PnmKind {
    pub fn channels(self) -> usize {
        match self {
            PnmKind::Grey => 1,
            PnmKind::Rgb => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub kind: PnmKind,
    pub width: usize,
    pub height: usize,
    /// Interleaved samples, row-major.
    pub data: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.pos as u64, msg)
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let start_ws = self.pos;
        self.skip_space_and_comments();
        if self.pos == start_ws {
            return Err(self.err(format!("expected whitespace before {what}")));
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected decimal {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start as u64, format!("{what} out of range")))
    }
}

/// Parse a binary P5/P6 file. The maximum value must be 255 and exactly one
/// whitespace byte must separate it from the raster.
pub fn decode_pnm(bytes: &[u8]) -> Result<Pnm> {
    let kind = match bytes.get(..2) {
        Some(b"P5") => PnmKind::Grey,
        Some(b"P6") => PnmKind::Rgb,
        _ => return Err(Error::format(0, "expected magic P5 or P6")),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maximum value")?;
    if maxval != 255 {
        return Err(cur.err(format!("maximum value must be 255, got {maxval}")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.err("expected a single whitespace byte after the header")),
    }
    if width == 0 || height == 0 {
        return Err(cur.err("image has no pixels"));
    }
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(kind.channels()))
        .ok_or_else(|| cur.err("image dimensions overflow"))?;
    let raster = &bytes[cur.pos..];
    if raster.len() < len {
        return Err(Error::format(
            bytes.len() as u64,
            format!("raster truncated: need {len} bytes, found {}", raster.len()),
        ));
    }
    if raster.len() > len {
        return Err(Error::format((cur.pos + len) as u64, "trailing bytes after raster"));
    }
    Ok(Pnm {
        kind,
        width,
        height,
        data: raster.to_vec(),
    })
}

fn encode(kind: PnmKind, width: usize, height: usize, data: &[u8]) -> Result<Vec<u8>> {
    if data.len() != width * height * kind.channels() {
        return Err(Error::shape(format!(
            "{} samples for a {width}×{height} image with {} channels",
            data.len(),
            kind.channels()
        )));
    }
    let magic = match kind {
        PnmKind::Grey => "P5",
        PnmKind::Rgb => "P6",
    };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    Ok(out)
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    encode(PnmKind::Rgb, width, height, rgb)
}

pub fn encode_pgm(width: usize, height: usize, grey: &[u8]) -> Result<Vec<u8>> {
    encode(PnmKind::Grey, width, height, grey)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// P6 bytes of a `[3, H, W]` or `[1, 3, H, W]` image, rounded to 8 bits.
pub fn image_to_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match image.dims() {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        other => {
            return Err(Error::shape(format!(
                "PPM output needs a 3-channel image, got {other:?}"
            )))
        }
    };
    let plane = h * w;
    let d = image.data();
    let mut rgb = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            rgb.push(quantize(d[c * plane + i]));
        }
    }
    encode_ppm(w, h, &rgb)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn named(path: &Path, e: Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Load P6 images listed in a `filename,label` CSV (no header). File names
/// are relative to `dir`; rows keep CSV order and pixels are scaled by 1/255.
pub fn load_image_dir(dir: &Path, labels_csv: &Path, split: Split) -> Result<Dataset> {
    let text = fs::read(labels_csv).map_err(|e| Error::io(labels_csv, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(text.as_slice());
    let mut entries: Vec<(PathBuf, usize)> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let bad = |msg: String| Error::Parse {
            path: labels_csv.to_path_buf(),
            message: format!("line {}: {msg}", line + 1),
        };
        let record = record.map_err(|e| bad(e.to_string()))?;
        if record.len() != 2 {
            return Err(bad(format!("expected filename,label, got {} fields", record.len())));
        }
        let label = record[1]
            .trim()
            .parse()
            .map_err(|_| bad(format!("label {:?} is not a class index", &record[1])))?;
        entries.push((dir.join(record[0].trim()), label));
    }
    if entries.is_empty() {
        return Err(Error::Parse {
            path: labels_csv.to_path_buf(),
            message: "no images listed".into(),
        });
    }
    let mut dims = None;
    let mut data = Vec::new();
    let mut labels = Vec::with_capacity(entries.len());
    for (path, label) in &entries {
        let pnm = decode_pnm(&read(path)?).map_err(|e| named(path, e))?;
        if pnm.kind != PnmKind::Rgb {
            return Err(named(path, Error::format(0, "expected a P6 colour image")));
        }
        match dims {
            None => dims = Some((pnm.height, pnm.width)),
            Some(d) if d != (pnm.height, pnm.width) => {
                return Err(named(
                    path,
                    Error::shape(format!(
                        "image is {}×{}, earlier images are {}×{}",
                        pnm.height, pnm.width, d.0, d.1
                    )),
                ))
            }
            Some(_) => {}
        }
        let plane = pnm.width * pnm.height;
        for c in 0..3 {
            data.extend((0..plane).map(|i| pnm.data[3 * i + c] as f64 / 255.0));
        }
        labels.push(*label);
    }
    let (h, w) = dims.expect("at least one image");
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(
        Tensor::new(vec![labels.len(), 3, h, w], data)?,
        labels,
        default_class_names(classes),
        split,
    )
}

/// Write every image as `NNNNN.ppm` plus a `labels.csv` listing them in
/// order. Inverse of [`load_image_dir`] up to 8-bit quantization.
pub fn write_image_dir(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut csv = String::new();
    for i in 0..dataset.len() {
        let name = format!("{i:05}.ppm");
        let path = dir.join(&name);
        fs::write(&path, image_to_ppm(&dataset.image(i)?)?).map_err(|e| Error::io(&path, e))?;
        csv.push_str(&format!("{name},{}\n", dataset.labels()[i]));
    }
    let path = dir.join("labels.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}

/// Mask from P5 bytes: values ≥ 128 are attackable.
pub fn mask_from_pgm(bytes: &[u8], height: usize, width: usize) -> Result<Mask> {
    let pnm = decode_pnm(bytes)?;
    if pnm.kind != PnmKind::Grey {
        return Err(Error::format(0, "mask must be a P5 greymap"));
    }
    let mask = Mask::new(
        pnm.height,
        pnm.width,
        pnm.data.iter().map(|&v| v >= MASK_THRESHOLD).collect(),
    )?;
    mask.check_spatial(height, width)?;
    Ok(mask)
}

pub fn load_mask_pgm(path: &Path, height: usize, width: usize) -> Result<Mask> {
    mask_from_pgm(&read(path)?, height, width).map_err(|e| match e {
        Error::Shape(_) => e,
        other => named(path, other),
    })
}
