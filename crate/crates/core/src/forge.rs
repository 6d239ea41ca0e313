//! Localized degradation synthesis and importance-weighted MOS ground truth.
//!
//! Every injector touches only the pixels inside its region and maps
//! severity in `(0, 1]` to its parameter through a fixed affine rule:
//!
//! | kind        | parameter                                  |
//! |-------------|--------------------------------------------|
//! | blur        | Gaussian sigma `0.5 + 5.5 * severity`      |
//! | mosaic      | block side `round(2 + 30 * severity)`      |
//! | compression | keep zigzag index `<= round(63 * (1 - s))` |
//! | noise       | additive std `0.25 * severity`             |

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{BenchmarkItem, DefectKind, DefectRecord, Raster, Region};
use crate::wavelet;

/// Fraction of the image area at which a single defect's penalty saturates.
pub const AREA_SATURATION: f64 = 0.05;

fn check_severity(severity: f64) -> Result<()> {
    if severity > 0.0 && severity <= 1.0 {
        Ok(())
    } else {
        Err(Error::arg(format!("severity {severity} outside (0,1]")))
    }
}

pub fn blur_sigma(severity: f64) -> f64 {
    0.5 + 5.5 * severity
}

pub fn mosaic_block(severity: f64) -> usize {
    (2.0 + 30.0 * severity).round() as usize
}

/// Highest zigzag index kept by block compression.
pub fn dct_cutoff(severity: f64) -> usize {
    (63.0 * (1.0 - severity)).round() as usize
}

pub fn noise_std(severity: f64) -> f64 {
    0.25 * severity
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Gaussian blur restricted to `region`; neighbours are read from the whole
/// raster with clamp-to-edge addressing.
pub fn inject_blur(raster: &Raster, region: Region, severity: f64) -> Result<Raster> {
    check_severity(severity)?;
    raster.check_region(&region)?;
    let kernel = gaussian_kernel(blur_sigma(severity));
    let radius = (kernel.len() / 2) as isize;
    let (w, h, ch) = (raster.width() as isize, raster.height() as isize, raster.channels());
    let (x0, x1) = (region.x as isize, region.right() as isize);
    let (y0, y1) = (region.y as isize, region.bottom() as isize);
    let ry0 = (y0 - radius).max(0);
    let ry1 = (y1 + radius).min(h);
    let rw = (x1 - x0) as usize;

    // Horizontal pass over the rows the vertical pass will need.
    let mut tmp = vec![0.0; (ry1 - ry0) as usize * rw * ch];
    for y in ry0..ry1 {
        for x in x0..x1 {
            for c in 0..ch {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = (x + ki as isize - radius).clamp(0, w - 1);
                    acc += kv * raster.get(sx as usize, y as usize, c);
                }
                tmp[(((y - ry0) as usize) * rw + (x - x0) as usize) * ch + c] = acc;
            }
        }
    }
    let mut out = raster.clone();
    for y in y0..y1 {
        for x in x0..x1 {
            for c in 0..ch {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = (y + ki as isize - radius).clamp(ry0, ry1 - 1);
                    acc += kv * tmp[(((sy - ry0) as usize) * rw + (x - x0) as usize) * ch + c];
                }
                out.set(x as usize, y as usize, c, acc);
            }
        }
    }
    Ok(out)
}

/// Tile boundaries splitting `len` pixels into `ceil(len / side)` near-equal runs.
fn tile_bounds(start: usize, len: usize, side: usize) -> Vec<usize> {
    let n = len.div_ceil(side).max(1);
    (0..=n).map(|k| start + (k * len + n / 2) / n).collect()
}

/// Block-average pixelation. Each axis of the region is cut into
/// `ceil(len / side)` near-equal tiles, so no sliver blocks appear at the edges.
pub fn inject_mosaic(raster: &Raster, region: Region, severity: f64) -> Result<Raster> {
    check_severity(severity)?;
    raster.check_region(&region)?;
    let side = mosaic_block(severity);
    let mut out = raster.clone();
    let xb = tile_bounds(region.x as usize, region.w as usize, side);
    let yb = tile_bounds(region.y as usize, region.h as usize, side);
    for ys in yb.windows(2) {
        for xs in xb.windows(2) {
            let (bx, ex, by, ey) = (xs[0], xs[1], ys[0], ys[1]);
            let n = ((ex - bx) * (ey - by)) as f64;
            for c in 0..raster.channels() {
                let mut sum = 0.0;
                for y in by..ey {
                    for x in bx..ex {
                        sum += raster.get(x, y, c);
                    }
                }
                let mean = sum / n;
                for y in by..ey {
                    for x in bx..ex {
                        out.set(x, y, c, mean);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// JPEG zigzag scan: `ZIGZAG[i]` is the row-major position of the i-th coefficient.
const ZIGZAG: [usize; 64] = [
    0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5, 12, 19, 26, 33, 40, 48, 41, 34, 27,
    20, 13, 6, 7, 14, 21, 28, 35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51, 58,
    59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63,
];

/// Orthonormal 8-point DCT-II basis, `basis[k][n]`.
fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (k, row) in b.iter_mut().enumerate() {
        let scale = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = scale * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
        }
    }
    b
}

pub(crate) fn dct8x8(block: &[f64; 64], basis: &[[f64; 8]; 8]) -> [f64; 64] {
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for k in 0..8 {
            tmp[y * 8 + k] = (0..8).map(|n| basis[k][n] * block[y * 8 + n]).sum();
        }
    }
    let mut out = [0.0; 64];
    for k in 0..8 {
        for x in 0..8 {
            out[k * 8 + x] = (0..8).map(|n| basis[k][n] * tmp[n * 8 + x]).sum();
        }
    }
    out
}

pub(crate) fn idct8x8(coef: &[f64; 64], basis: &[[f64; 8]; 8]) -> [f64; 64] {
    let mut tmp = [0.0; 64];
    for n in 0..8 {
        for x in 0..8 {
            tmp[n * 8 + x] = (0..8).map(|k| basis[k][n] * coef[k * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for n in 0..8 {
            out[y * 8 + n] = (0..8).map(|k| basis[k][n] * tmp[y * 8 + k]).sum();
        }
    }
    out
}

/// 8x8 DCT truncation inside `region`. Blocks overhanging the region are
/// edge-replicated for the transform and written back only where they overlap it.
pub fn inject_block_compression(raster: &Raster, region: Region, severity: f64) -> Result<Raster> {
    check_severity(severity)?;
    raster.check_region(&region)?;
    let cutoff = dct_cutoff(severity);
    let basis = dct_basis();
    let mut out = raster.clone();
    let (x1, y1) = (region.right() as usize, region.bottom() as usize);
    for by in (region.y as usize..y1).step_by(8) {
        for bx in (region.x as usize..x1).step_by(8) {
            for c in 0..raster.channels() {
                let mut block = [0.0; 64];
                for (i, v) in block.iter_mut().enumerate() {
                    let x = (bx + i % 8).min(x1 - 1);
                    let y = (by + i / 8).min(y1 - 1);
                    *v = raster.get(x, y, c);
                }
                let mut coef = dct8x8(&block, &basis);
                for &pos in &ZIGZAG[cutoff + 1..] {
                    coef[pos] = 0.0;
                }
                let rec = idct8x8(&coef, &basis);
                for (i, v) in rec.iter().enumerate() {
                    let (x, y) = (bx + i % 8, by + i / 8);
                    if x < x1 && y < y1 {
                        out.set(x, y, c, *v);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Additive Gaussian noise inside `region`, clamped, deterministic under `seed`.
pub fn inject_noise(raster: &Raster, region: Region, severity: f64, seed: u64) -> Result<Raster> {
    check_severity(severity)?;
    raster.check_region(&region)?;
    let normal = Normal::new(0.0, noise_std(severity)).expect("std is positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = raster.clone();
    for y in region.y as usize..region.bottom() as usize {
        for x in region.x as usize..region.right() as usize {
            for c in 0..raster.channels() {
                out.set(x, y, c, raster.get(x, y, c) + normal.sample(&mut rng));
            }
        }
    }
    Ok(out)
}

pub fn inject(
    kind: DefectKind,
    raster: &Raster,
    region: Region,
    severity: f64,
    seed: u64,
) -> Result<Raster> {
    match kind {
        DefectKind::Blur => inject_blur(raster, region, severity),
        DefectKind::Compression => inject_block_compression(raster, region, severity),
        DefectKind::Mosaic => inject_mosaic(raster, region, severity),
        DefectKind::Noise => inject_noise(raster, region, severity, seed),
    }
}

/// Blend weight of `degraded` at pixel `(x, y)`.
///
/// 1 deeper than `feather` inside the region, 0 beyond `feather` outside it,
/// linear in the Chebyshev signed distance in between.
pub fn feather_mask(region: &Region, feather: u32, x: usize, y: usize) -> f64 {
    let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
    let sx = (region.x as f64 - cx).max(cx - region.right() as f64);
    let sy = (region.y as f64 - cy).max(cy - region.bottom() as f64);
    let s = sx.max(sy);
    if feather == 0 {
        return if s < 0.0 { 1.0 } else { 0.0 };
    }
    let f = feather as f64;
    ((f - s) / (2.0 * f)).clamp(0.0, 1.0)
}

pub fn feathered_composite(
    base: &Raster,
    degraded: &Raster,
    region: Region,
    feather: u32,
) -> Result<Raster> {
    if base.width() != degraded.width()
        || base.height() != degraded.height()
        || base.channels() != degraded.channels()
    {
        return Err(Error::Shape(format!(
            "base {}x{}x{} vs degraded {}x{}x{}",
            base.width(),
            base.height(),
            base.channels(),
            degraded.width(),
            degraded.height(),
            degraded.channels()
        )));
    }
    let mut out = base.clone();
    let pad = feather as usize + 1;
    let xs = (region.x as usize).saturating_sub(pad)..(region.right() as usize + pad).min(base.width());
    let ys = (region.y as usize).saturating_sub(pad)..(region.bottom() as usize + pad).min(base.height());
    for y in ys {
        for x in xs.clone() {
            let m = feather_mask(&region, feather, x, y);
            if m == 0.0 {
                continue;
            }
            for c in 0..base.channels() {
                let v = if m == 1.0 {
                    degraded.get(x, y, c)
                } else {
                    base.get(x, y, c) + m * (degraded.get(x, y, c) - base.get(x, y, c))
                };
                out.set(x, y, c, v);
            }
        }
    }
    Ok(out)
}

/// Importance-weighted MOS on the `[1, 5]` scale.
///
/// Each defect contributes `importance * severity * min(1, area / (0.05 * image_area))`;
/// the summed penalty saturates at 1.
pub fn synthesize_mos(defects: &[DefectRecord], image_area: f64) -> f64 {
    let penalty: f64 = defects
        .iter()
        .map(|d| {
            let area_factor = (d.region.area() as f64 / (AREA_SATURATION * image_area)).min(1.0);
            d.importance * d.severity * area_factor
        })
        .sum();
    5.0 - 4.0 * penalty.min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForgeConfig {
    pub defect_count_range: (usize, usize),
    pub kinds_enabled: BTreeSet<DefectKind>,
    pub severity_range: (f64, f64),
    pub region_size_range: (u32, u32),
    pub feather: u32,
    pub pristine_fraction: f64,
    pub seed: u64,
    /// Haar depth used when locating texture.
    pub wavelet_levels: usize,
    pub source_tag: String,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            defect_count_range: (1, 3),
            kinds_enabled: DefectKind::ALL.into_iter().collect(),
            severity_range: (0.3, 1.0),
            region_size_range: (32, 64),
            feather: 4,
            pristine_fraction: 0.3,
            seed: 0,
            wavelet_levels: 1,
            source_tag: "vista-synth".into(),
        }
    }
}

impl ForgeConfig {
    pub fn validate(&self) -> Result<()> {
        let (cmin, cmax) = self.defect_count_range;
        if cmin == 0 || cmin > cmax {
            return Err(Error::arg(format!("defect_count_range {cmin}..={cmax} invalid")));
        }
        if self.kinds_enabled.is_empty() {
            return Err(Error::arg("kinds_enabled is empty"));
        }
        let (lo, hi) = self.severity_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::arg(format!("severity_range ({lo},{hi}) not inside (0,1]")));
        }
        let (smin, smax) = self.region_size_range;
        if smin == 0 || smin > smax {
            return Err(Error::arg(format!("region_size_range {smin}..={smax} invalid")));
        }
        if !(0.0..=1.0).contains(&self.pristine_fraction) {
            return Err(Error::arg("pristine_fraction outside [0,1]"));
        }
        if self.wavelet_levels == 0 {
            return Err(Error::arg("wavelet_levels must be >= 1"));
        }
        Ok(())
    }
}

/// Stable 64-bit seed for `(base, label)`; independent of processing order.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("sha256 digest is 32 bytes"))
}

const PLACEMENT_ATTEMPTS: usize = 100;

/// Synthesizes one benchmark item from a pristine source.
///
/// Returns the degraded raster and its manifest entry; `image_path` is
/// `"{id}.png"` relative to wherever the caller stores the raster.
pub fn forge_item(source: &Raster, config: &ForgeConfig, id: &str) -> Result<(Raster, BenchmarkItem)> {
    config.validate()?;
    let seed = derive_seed(config.seed, id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut item = BenchmarkItem {
        id: id.to_string(),
        image_path: format!("{id}.png"),
        width: source.width() as u32,
        height: source.height() as u32,
        mos: 5.0,
        seed,
        source_tag: config.source_tag.clone(),
        defects: Vec::new(),
    };
    if rng.gen::<f64>() < config.pristine_fraction {
        return Ok((source.clone(), item));
    }

    let (cmin, cmax) = config.defect_count_range;
    let count = rng.gen_range(cmin..=cmax);
    let (smin, smax) = config.region_size_range;
    if smin as usize > source.width().min(source.height()) {
        return Err(Error::Forge(format!(
            "source {}x{} too small for {smin}px regions",
            source.width(),
            source.height()
        )));
    }
    let pyramid = wavelet::dwt2(source, config.wavelet_levels)?;
    let energy = wavelet::texture_energy(&pyramid, (smin as usize / 4).max(1))?;

    let mut placed = None;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let size = rng
            .gen_range(smin..=smax)
            .min(source.width().min(source.height()) as u32);
        let sep = size as f64 * std::f64::consts::SQRT_2;
        let regions = wavelet::select_texture_regions(&energy, count, size, sep)?;
        let disjoint = regions
            .iter()
            .enumerate()
            .all(|(i, a)| regions[i + 1..].iter().all(|b| !a.overlaps(b)));
        if regions.len() == count && disjoint {
            placed = Some(regions);
            break;
        }
    }
    let regions = placed.ok_or_else(|| {
        Error::Forge(format!(
            "item {id}: no non-overlapping placement of {count} defects after {PLACEMENT_ATTEMPTS} attempts"
        ))
    })?;

    let kinds: Vec<DefectKind> = config.kinds_enabled.iter().copied().collect();
    let (lo, hi) = config.severity_range;
    let mut image = source.clone();
    for (rank, region) in regions.into_iter().enumerate() {
        let kind = kinds[rng.gen_range(0..kinds.len())];
        let severity = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let importance = if count == 1 {
            1.0
        } else {
            1.0 - 0.8 * rank as f64 / (count - 1) as f64
        };
        let degraded = inject(kind, &image, region, severity, rng.gen())?;
        image = feathered_composite(&image, &degraded, region, config.feather)?;
        item.defects.push(DefectRecord {
            region,
            kind,
            severity,
            importance,
        });
    }
    item.mos = synthesize_mos(&item.defects, source.area() as f64);
    item.validate()?;
    Ok((image, item))
}
