//! Orthonormal 2-D Haar analysis used to find texture-rich regions.
//!
//! Each level splits a plane into 2x2 butterflies:
//!
//! ```text
//! a b    LL = (a+b+c+d)/2   LH = (a+b-c-d)/2
//! c d    HL = (a-b+c-d)/2   HH = (a-b-c+d)/2
//! ```
//!
//! LH is low-pass horizontally and high-pass vertically; HL the reverse.
//! Odd dimensions are padded by repeating the last row/column; the input size
//! of every level is recorded so synthesis can crop the padding away.

use crate::error::{Error, Result};
use crate::model::{Raster, Region};

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    /// Width/height of this level's input before padding.
    pub src_width: usize,
    pub src_height: usize,
    /// Width/height of the LH/HL/HH planes, `ceil(src/2)`.
    pub width: usize,
    pub height: usize,
    pub lh: Vec<f64>,
    pub hl: Vec<f64>,
    pub hh: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubbandPyramid {
    pub width: usize,
    pub height: usize,
    /// Finest level first.
    pub levels: Vec<PyramidLevel>,
    /// Approximation plane of the coarsest level.
    pub ll: Vec<f64>,
}

impl SubbandPyramid {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Sum of squared coefficients over every band.
    pub fn energy(&self) -> f64 {
        let detail: f64 = self
            .levels
            .iter()
            .flat_map(|l| l.lh.iter().chain(&l.hl).chain(&l.hh))
            .map(|v| v * v)
            .sum();
        detail + self.ll.iter().map(|v| v * v).sum::<f64>()
    }

    fn check_shapes(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Shape("pyramid has no levels".into()));
        }
        let (mut w, mut h) = (self.width, self.height);
        for (i, l) in self.levels.iter().enumerate() {
            if l.src_width != w || l.src_height != h {
                return Err(Error::Shape(format!(
                    "level {i} input {}x{} expected {w}x{h}",
                    l.src_width, l.src_height
                )));
            }
            let (pw, ph) = (w.div_ceil(2), h.div_ceil(2));
            if l.width != pw || l.height != ph {
                return Err(Error::Shape(format!(
                    "level {i} planes {}x{} expected {pw}x{ph}",
                    l.width, l.height
                )));
            }
            for (name, band) in [("LH", &l.lh), ("HL", &l.hl), ("HH", &l.hh)] {
                if band.len() != pw * ph {
                    return Err(Error::Shape(format!(
                        "level {i} {name} has {} coefficients, expected {}",
                        band.len(),
                        pw * ph
                    )));
                }
            }
            w = pw;
            h = ph;
        }
        if self.ll.len() != w * h {
            return Err(Error::Shape(format!(
                "LL has {} coefficients, expected {}",
                self.ll.len(),
                w * h
            )));
        }
        Ok(())
    }
}

fn analyze(plane: &[f64], w: usize, h: usize) -> (Vec<f64>, PyramidLevel) {
    let (pw, ph) = (w.div_ceil(2), h.div_ceil(2));
    let at = |x: usize, y: usize| plane[y.min(h - 1) * w + x.min(w - 1)];
    let n = pw * ph;
    let (mut ll, mut lh, mut hl, mut hh) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for by in 0..ph {
        for bx in 0..pw {
            let (x, y) = (2 * bx, 2 * by);
            let (a, b, c, d) = (at(x, y), at(x + 1, y), at(x, y + 1), at(x + 1, y + 1));
            let i = by * pw + bx;
            ll[i] = (a + b + c + d) * 0.5;
            lh[i] = (a + b - c - d) * 0.5;
            hl[i] = (a - b + c - d) * 0.5;
            hh[i] = (a - b - c + d) * 0.5;
        }
    }
    let level = PyramidLevel {
        src_width: w,
        src_height: h,
        width: pw,
        height: ph,
        lh,
        hl,
        hh,
    };
    (ll, level)
}

fn synthesize(ll: &[f64], level: &PyramidLevel) -> Vec<f64> {
    let (w, h, pw) = (level.src_width, level.src_height, level.width);
    let mut out = vec![0.0; w * h];
    for by in 0..level.height {
        for bx in 0..pw {
            let i = by * pw + bx;
            let (s, v, u, d) = (ll[i], level.lh[i], level.hl[i], level.hh[i]);
            let quad = [
                (0, 0, (s + v + u + d) * 0.5),
                (1, 0, (s + v - u - d) * 0.5),
                (0, 1, (s - v + u - d) * 0.5),
                (1, 1, (s - v - u + d) * 0.5),
            ];
            for (dx, dy, val) in quad {
                let (x, y) = (2 * bx + dx, 2 * by + dy);
                if x < w && y < h {
                    out[y * w + x] = val;
                }
            }
        }
    }
    out
}

/// Forward transform of a single-channel plane.
pub fn dwt2_plane(plane: &[f64], width: usize, height: usize, levels: usize) -> Result<SubbandPyramid> {
    if levels == 0 {
        return Err(Error::arg("levels must be >= 1"));
    }
    if plane.len() != width * height {
        return Err(Error::Shape(format!(
            "plane has {} samples, expected {width}x{height}",
            plane.len()
        )));
    }
    let span = 1usize.checked_shl(levels as u32).unwrap_or(usize::MAX);
    if span > width.min(height) {
        return Err(Error::arg(format!(
            "{levels} levels need 2^{levels} <= min({width},{height})"
        )));
    }
    let mut cur = plane.to_vec();
    let (mut w, mut h) = (width, height);
    let mut out = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (ll, level) = analyze(&cur, w, h);
        w = level.width;
        h = level.height;
        out.push(level);
        cur = ll;
    }
    Ok(SubbandPyramid {
        width,
        height,
        levels: out,
        ll: cur,
    })
}

/// Forward Haar transform; colour rasters are reduced to luma first.
pub fn dwt2(raster: &Raster, levels: usize) -> Result<SubbandPyramid> {
    dwt2_plane(&raster.luma(), raster.width(), raster.height(), levels)
}

/// Inverse transform without clamping.
pub fn idwt2_plane(pyramid: &SubbandPyramid) -> Result<Vec<f64>> {
    pyramid.check_shapes()?;
    let mut cur = pyramid.ll.clone();
    for level in pyramid.levels.iter().rev() {
        cur = synthesize(&cur, level);
    }
    Ok(cur)
}

/// Inverse transform into a single-channel raster.
pub fn idwt2(pyramid: &SubbandPyramid) -> Result<Raster> {
    let plane = idwt2_plane(pyramid)?;
    Raster::from_fn(pyramid.width, pyramid.height, 1, |x, y, _| {
        plane[y * pyramid.width + x]
    })
}

/// Level-1 detail energy aggregated over square cells.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyMap {
    pub cols: usize,
    pub rows: usize,
    /// Side of one map cell in source pixels.
    pub cell_px: usize,
    pub src_width: usize,
    pub src_height: usize,
    pub values: Vec<f64>,
}

impl EnergyMap {
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Center of a cell in source coordinates, clipped to the raster.
    pub fn cell_center(&self, col: usize, row: usize) -> (f64, f64) {
        let cx = ((col as f64 + 0.5) * self.cell_px as f64).min(self.src_width as f64);
        let cy = ((row as f64 + 0.5) * self.cell_px as f64).min(self.src_height as f64);
        (cx, cy)
    }

    /// Mean energy of the cells whose centers fall inside `region`.
    pub fn region_mean(&self, region: &Region) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for row in 0..self.rows {
            for col in 0..self.cols {
                let (cx, cy) = self.cell_center(col, row);
                if cx >= region.x as f64
                    && cx < region.right() as f64
                    && cy >= region.y as f64
                    && cy < region.bottom() as f64
                {
                    sum += self.get(col, row);
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// Mean of `LH^2 + HL^2 + HH^2` over `cell x cell` blocks of level-1 coefficients.
pub fn texture_energy(pyramid: &SubbandPyramid, cell: usize) -> Result<EnergyMap> {
    if cell == 0 {
        return Err(Error::arg("cell must be > 0"));
    }
    let l1 = pyramid
        .levels
        .first()
        .ok_or_else(|| Error::Shape("pyramid has no levels".into()))?;
    let (cols, rows) = (l1.width.div_ceil(cell), l1.height.div_ceil(cell));
    let mut values = vec![0.0; cols * rows];
    for row in 0..rows {
        for col in 0..cols {
            let mut sum = 0.0;
            let mut n = 0usize;
            for y in row * cell..((row + 1) * cell).min(l1.height) {
                for x in col * cell..((col + 1) * cell).min(l1.width) {
                    let i = y * l1.width + x;
                    sum += l1.lh[i] * l1.lh[i] + l1.hl[i] * l1.hl[i] + l1.hh[i] * l1.hh[i];
                    n += 1;
                }
            }
            values[row * cols + col] = sum / n as f64;
        }
    }
    Ok(EnergyMap {
        cols,
        rows,
        cell_px: 2 * cell,
        src_width: pyramid.width,
        src_height: pyramid.height,
        values,
    })
}

fn centered_region(cx: f64, cy: f64, size: u32, width: usize, height: usize) -> Region {
    let half = size as f64 / 2.0;
    let max_x = (width as u32 - size) as f64;
    let max_y = (height as u32 - size) as f64;
    Region {
        x: (cx - half).round().clamp(0.0, max_x) as u32,
        y: (cy - half).round().clamp(0.0, max_y) as u32,
        w: size,
        h: size,
    }
}

/// Greedy pick of up to `k` square regions centered on the highest-energy cells.
///
/// Cells with zero energy are never selected. Ties go to the row-major-first
/// cell. A candidate is skipped when its (clamped) center lies closer than
/// `min_separation` to an already chosen region's center.
pub fn select_texture_regions(
    map: &EnergyMap,
    k: usize,
    region_size: u32,
    min_separation: f64,
) -> Result<Vec<Region>> {
    if k == 0 {
        return Err(Error::arg("k must be >= 1"));
    }
    if region_size == 0
        || region_size as usize > map.src_width
        || region_size as usize > map.src_height
    {
        return Err(Error::arg(format!(
            "region size {region_size} does not fit a {}x{} raster",
            map.src_width, map.src_height
        )));
    }
    let mut order: Vec<usize> = (0..map.values.len())
        .filter(|&i| map.values[i] > 0.0)
        .collect();
    order.sort_by(|&a, &b| map.values[b].total_cmp(&map.values[a]).then(a.cmp(&b)));

    let mut chosen: Vec<Region> = Vec::new();
    for idx in order {
        let (cx, cy) = map.cell_center(idx % map.cols, idx / map.cols);
        let cand = centered_region(cx, cy, region_size, map.src_width, map.src_height);
        let (ax, ay) = cand.center();
        let far_enough = chosen.iter().all(|r| {
            let (bx, by) = r.center();
            ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt() >= min_separation
        });
        if far_enough {
            chosen.push(cand);
            if chosen.len() == k {
                break;
            }
        }
    }
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Vec<f64> {
        (0..w * h).map(|_| rng.gen::<f64>()).collect()
    }

    #[test]
    fn constant_has_no_detail() {
        let r = Raster::filled(8, 8, 1, 0.5).unwrap();
        let p = dwt2(&r, 1).unwrap();
        let l = &p.levels[0];
        assert!(l.lh.iter().chain(&l.hl).chain(&l.hh).all(|v| *v == 0.0));
    }

    #[test]
    fn two_by_two_butterfly() {
        let (a, b, c, d) = (0.1, 0.7, 0.4, 0.9);
        let p = dwt2_plane(&[a, b, c, d], 2, 2, 1).unwrap();
        // Hand-evaluated orthonormal butterfly.
        assert!((p.ll[0] - (a + b + c + d) / 2.0).abs() < 1e-15);
        assert!((p.levels[0].lh[0] - (a + b - c - d) / 2.0).abs() < 1e-15);
        assert!((p.levels[0].hl[0] - (a - b + c - d) / 2.0).abs() < 1e-15);
        assert!((p.levels[0].hh[0] - (a - b - c + d) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn too_many_levels() {
        let r = Raster::filled(4, 4, 1, 0.5).unwrap();
        assert!(matches!(dwt2(&r, 3), Err(Error::Argument(_))));
        assert!(dwt2(&r, 2).is_ok());
        assert!(matches!(dwt2(&r, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn plane_dimensions_follow_ceil_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plane = random_plane(&mut rng, 37, 21);
        let p = dwt2_plane(&plane, 37, 21, 3).unwrap();
        for (l, level) in p.levels.iter().enumerate() {
            let div = 1usize << (l + 1);
            assert_eq!(level.width, 37usize.div_ceil(div));
            assert_eq!(level.height, 21usize.div_ceil(div));
        }
    }

    #[test]
    fn reconstructs_random_64() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plane = random_plane(&mut rng, 64, 64);
        let p = dwt2_plane(&plane, 64, 64, 4).unwrap();
        let back = idwt2_plane(&p).unwrap();
        let err = plane
            .iter()
            .zip(&back)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn reconstructs_odd_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (w, h) in [(7, 5), (33, 18), (9, 9)] {
            let plane = random_plane(&mut rng, w, h);
            let p = dwt2_plane(&plane, w, h, 2).unwrap();
            let back = idwt2_plane(&p).unwrap();
            for (a, b) in plane.iter().zip(&back) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn wrong_band_size_is_shape_error() {
        let r = Raster::filled(8, 8, 1, 0.25).unwrap();
        let mut p = dwt2(&r, 2).unwrap();
        p.levels[0].lh.pop();
        assert!(matches!(idwt2(&p), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_pyramid_is_zero_raster() {
        let r = Raster::filled(16, 8, 1, 0.0).unwrap();
        let p = dwt2(&r, 2).unwrap();
        assert!(idwt2(&p).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn flat_raster_energy_is_zero() {
        let r = Raster::filled(32, 32, 3, 0.3).unwrap();
        let m = texture_energy(&dwt2(&r, 1).unwrap(), 4).unwrap();
        assert!(m.values.iter().all(|v| *v == 0.0));
        assert!(matches!(
            texture_energy(&dwt2(&r, 1).unwrap(), 0),
            Err(Error::Argument(_))
        ));
    }

    /// Energy of the 2x2 block minus its DC part, computed straight from pixels.
    fn brute_detail_energy(plane: &[f64], w: usize, x0: usize, y0: usize, side: usize) -> f64 {
        let mut total = 0.0;
        let mut blocks = 0;
        for by in (y0..y0 + side).step_by(2) {
            for bx in (x0..x0 + side).step_by(2) {
                let px = [
                    plane[by * w + bx],
                    plane[by * w + bx + 1],
                    plane[(by + 1) * w + bx],
                    plane[(by + 1) * w + bx + 1],
                ];
                let sq: f64 = px.iter().map(|v| v * v).sum();
                let dc = px.iter().sum::<f64>() / 2.0;
                total += sq - dc * dc;
                blocks += 1;
            }
        }
        total / blocks as f64
    }

    #[test]
    fn checkerboard_half_beats_flat_half() {
        let (w, h) = (32, 16);
        let r = Raster::from_fn(w, h, 1, |x, y, _| {
            if x < 16 {
                0.5
            } else if (x + y) % 2 == 0 {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let m = texture_energy(&dwt2(&r, 1).unwrap(), 4).unwrap();
        assert_eq!((m.cols, m.rows), (4, 2));
        let plane = r.luma();
        for row in 0..m.rows {
            for col in 0..m.cols {
                let oracle = brute_detail_energy(&plane, w, col * 8, row * 8, 8);
                assert!((m.get(col, row) - oracle).abs() < 1e-12);
            }
            assert!(m.get(2, row) > m.get(0, row));
            assert!(m.get(3, row) > m.get(1, row));
        }
    }

    fn map(cols: usize, rows: usize, values: Vec<f64>) -> EnergyMap {
        EnergyMap {
            cols,
            rows,
            cell_px: 16,
            src_width: cols * 16,
            src_height: rows * 16,
            values,
        }
    }

    #[test]
    fn single_nonzero_cell() {
        let mut v = vec![0.0; 16];
        v[5] = 2.0;
        let regions = select_texture_regions(&map(4, 4, v), 3, 16, 0.0).unwrap();
        assert_eq!(regions, vec![Region { x: 16, y: 16, w: 16, h: 16 }]);
    }

    #[test]
    fn tie_breaks_row_major() {
        let mut v = vec![0.0; 16];
        v[9] = 1.0;
        v[6] = 1.0;
        let regions = select_texture_regions(&map(4, 4, v), 1, 16, 0.0).unwrap();
        assert_eq!(regions, vec![Region { x: 32, y: 16, w: 16, h: 16 }]);
    }

    #[test]
    fn uniform_map_with_huge_separation() {
        let m = map(4, 4, vec![1.0; 16]);
        // Greedy oracle: with separation beyond the diagonal only the first cell survives.
        let regions = select_texture_regions(&m, 2, 16, 1000.0).unwrap();
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0], Region { x: 0, y: 0, w: 16, h: 16 });
    }
}
