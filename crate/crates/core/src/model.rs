//! Shared domain types, the benchmark manifest schema and raster file I/O.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Luma weights used whenever a colour raster is reduced to one channel.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// In-memory image with row-major, channel-interleaved samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::arg("raster dimensions must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::arg(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "data length {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::arg(format!("sample {v} outside [0,1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    /// Builds a raster by clamping every sample into `[0, 1]`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c).clamp(0.0, 1.0));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub(crate) fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let idx = (y * self.width + x) * self.channels + c;
        self.data[idx] = v.clamp(0.0, 1.0);
    }

    /// Single-channel luma plane (a copy of the data when already gray).
    pub fn luma(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.clone();
        }
        self.data
            .chunks_exact(3)
            .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
            .collect()
    }

    pub fn contains(&self, region: &Region) -> bool {
        region.right() <= self.width as u64 && region.bottom() <= self.height as u64
    }

    pub(crate) fn check_region(&self, region: &Region) -> Result<()> {
        if self.contains(region) {
            Ok(())
        } else {
            Err(Error::Region(format!(
                "{region} does not fit inside {}x{} raster",
                self.width, self.height
            )))
        }
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Region {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(Error::arg("region width and height must be positive"));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn right(&self) -> u64 {
        self.x as u64 + self.w as u64
    }

    pub fn bottom(&self) -> u64 {
        self.y as u64 + self.h as u64
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + self.w as f64 / 2.0,
            self.y as f64 + self.h as f64 / 2.0,
        )
    }

    pub fn intersection_area(&self, other: &Region) -> u64 {
        let x0 = self.x.max(other.x) as u64;
        let y0 = self.y.max(other.y) as u64;
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        if x1 <= x0 || y1 <= y0 {
            0
        } else {
            (x1 - x0) * (y1 - y0)
        }
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        self.intersection_area(other) > 0
    }

    pub fn contains_region(&self, other: &Region) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    /// Tight bounding box of a non-empty set of regions.
    pub fn union_box<'a>(regions: impl IntoIterator<Item = &'a Region>) -> Option<Region> {
        let mut it = regions.into_iter();
        let first = *it.next()?;
        let (mut x0, mut y0) = (first.x as u64, first.y as u64);
        let (mut x1, mut y1) = (first.right(), first.bottom());
        for r in it {
            x0 = x0.min(r.x as u64);
            y0 = y0.min(r.y as u64);
            x1 = x1.max(r.right());
            y1 = y1.max(r.bottom());
        }
        Some(Region {
            x: x0 as u32,
            y: y0 as u32,
            w: (x1 - x0) as u32,
            h: (y1 - y0) as u32,
        })
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.x, self.y, self.w, self.h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectKind {
    Blur,
    Compression,
    Mosaic,
    Noise,
}

impl DefectKind {
    pub const ALL: [DefectKind; 4] = [
        DefectKind::Blur,
        DefectKind::Compression,
        DefectKind::Mosaic,
        DefectKind::Noise,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DefectKind::Blur => "blur",
            DefectKind::Compression => "compression",
            DefectKind::Mosaic => "mosaic",
            DefectKind::Noise => "noise",
        }
    }
}

impl std::str::FromStr for DefectKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DefectKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::arg(format!("unknown defect kind {s:?}")))
    }
}

/// Ground-truth localized degradation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "DefectWire", into = "DefectWire")]
pub struct DefectRecord {
    pub region: Region,
    pub kind: DefectKind,
    pub severity: f64,
    pub importance: f64,
}

// Flat on-disk layout: {x,y,w,h,kind,severity,importance}.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DefectWire {
    x: u32,
    y: u32,
    w: u32,
    h: u32,
    kind: DefectKind,
    severity: f64,
    importance: f64,
}

impl From<DefectWire> for DefectRecord {
    fn from(w: DefectWire) -> Self {
        DefectRecord {
            region: Region { x: w.x, y: w.y, w: w.w, h: w.h },
            kind: w.kind,
            severity: w.severity,
            importance: w.importance,
        }
    }
}

impl From<DefectRecord> for DefectWire {
    fn from(d: DefectRecord) -> Self {
        DefectWire {
            x: d.region.x,
            y: d.region.y,
            w: d.region.w,
            h: d.region.h,
            kind: d.kind,
            severity: d.severity,
            importance: d.importance,
        }
    }
}

impl DefectRecord {
    pub fn validate(&self) -> Result<()> {
        if self.region.w == 0 || self.region.h == 0 {
            return Err(Error::Validation("defect region must have positive size".into()));
        }
        if !(self.severity > 0.0 && self.severity <= 1.0) {
            return Err(Error::Validation(format!(
                "severity {} out of (0,1]",
                self.severity
            )));
        }
        if !(0.0..=1.0).contains(&self.importance) {
            return Err(Error::Validation(format!(
                "importance {} out of [0,1]",
                self.importance
            )));
        }
        Ok(())
    }
}

/// One synthesized benchmark entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkItem {
    pub id: String,
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    pub mos: f64,
    pub seed: u64,
    pub source_tag: String,
    pub defects: Vec<DefectRecord>,
}

impl BenchmarkItem {
    pub fn is_pristine(&self) -> bool {
        self.defects.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = |e: Error| match e {
            Error::Validation(m) => Error::Validation(format!("item {}: {m}", self.id)),
            other => other,
        };
        if !(1.0..=5.0).contains(&self.mos) {
            return Err(ctx(Error::Validation(format!(
                "mos out of [1,5] (got {})",
                self.mos
            ))));
        }
        if self.width == 0 || self.height == 0 {
            return Err(ctx(Error::Validation("image dimensions must be positive".into())));
        }
        for (i, d) in self.defects.iter().enumerate() {
            d.validate().map_err(ctx)?;
            if d.region.right() > self.width as u64 || d.region.bottom() > self.height as u64 {
                return Err(ctx(Error::Validation(format!(
                    "defect {i} region {} exceeds {}x{} image",
                    d.region, self.width, self.height
                ))));
            }
            for (j, e) in self.defects.iter().enumerate().skip(i + 1) {
                if d.region.overlaps(&e.region) {
                    return Err(ctx(Error::Validation(format!(
                        "defect regions {i} and {j} overlap"
                    ))));
                }
            }
        }
        Ok(())
    }
}

fn format_of(path: &Path) -> Result<ImageFormat> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "png" => Ok(ImageFormat::Png),
        "pgm" | "ppm" | "pnm" => Ok(ImageFormat::Pnm),
        other => Err(Error::Format(format!(
            "unsupported raster extension {other:?} for {}",
            path.display()
        ))),
    }
}

/// Loads an 8-bit PNG or binary PGM/PPM, scaling samples by 1/255.
pub fn load_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = image::guess_format(&bytes).or_else(|_| format_of(path))?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Pnm) {
        return Err(Error::Format(format!("unsupported encoding {format:?}")));
    }
    let img = image::load_from_memory_with_format(&bytes, format)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img {
        DynamicImage::ImageLuma8(buf) => (1, buf.into_raw()),
        DynamicImage::ImageRgb8(buf) => (3, buf.into_raw()),
        other => {
            return Err(Error::Format(format!(
                "unsupported pixel layout {:?} in {}",
                other.color(),
                path.display()
            )))
        }
    };
    let data = raw.into_iter().map(|b| b as f64 / 255.0).collect();
    Raster::new(width, height, channels, data)
}

/// Quantizes to 8 bits and writes PNG or PGM/PPM depending on the extension.
pub fn save_raster(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = format_of(path)?;
    let bytes: Vec<u8> = raster
        .data
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let (w, h) = (raster.width as u32, raster.height as u32);
    let img = if raster.channels == 1 {
        DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, bytes).expect("length checked"))
    } else {
        DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, bytes).expect("length checked"))
    };
    let mut encoded = std::io::Cursor::new(Vec::new());
    img.write_to(&mut encoded, format)
        .map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, encoded.get_ref())
}

/// Writes through a temporary file in the destination directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn parse_manifest(text: &str) -> Result<Vec<BenchmarkItem>> {
    let items: Vec<BenchmarkItem> = serde_json::from_str(text).map_err(|e| {
        Error::Parse(format!("line {} column {}: {e}", e.line(), e.column()))
    })?;
    for item in &items {
        item.validate()?;
    }
    Ok(items)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<BenchmarkItem>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn manifest_to_string(items: &[BenchmarkItem]) -> String {
    serde_json::to_string_pretty(items).expect("manifest types always serialize")
}

pub fn write_manifest(items: &[BenchmarkItem], path: impl AsRef<Path>) -> Result<()> {
    for item in items {
        item.validate()?;
    }
    let mut text = manifest_to_string(items);
    text.push('\n');
    write_atomic(path.as_ref(), text.as_bytes())
}
