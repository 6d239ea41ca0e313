//! Crop placement strategies and probing-trajectory synthesis for cloning.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forge::derive_seed;
use crate::model::{BenchmarkItem, DefectRecord, Region};
use crate::rewards::format_reward;
use crate::wavelet::{select_texture_regions, EnergyMap};

pub const DEFAULT_CROP: u32 = 768;
pub const DEFAULT_CONTEXT_MARGIN: f64 = 0.3;
/// Minimum share of crop-bearing trajectories that look at pristine content.
pub const PRISTINE_CROP_QUOTA: f64 = 0.3;
const PLACEMENT_ATTEMPTS: usize = 100;
pub const MIN_PARTIAL_CONTEXT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropStrategy {
    DegradationOnly,
    Partial,
    AllPlusContext,
}

impl CropStrategy {
    pub const ALL: [CropStrategy; 3] = [
        CropStrategy::DegradationOnly,
        CropStrategy::Partial,
        CropStrategy::AllPlusContext,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CropStrategy::DegradationOnly => "degradation_only",
            CropStrategy::Partial => "partial",
            CropStrategy::AllPlusContext => "all_plus_context",
        }
    }
}

impl std::str::FromStr for CropStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CropStrategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::arg(format!("unknown crop strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    DegradationCapture,
    ClarityLocalization,
    DistantView,
}

impl TrajectoryKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrajectoryKind::DegradationCapture => "degradation_capture",
            TrajectoryKind::ClarityLocalization => "clarity_localization",
            TrajectoryKind::DistantView => "distant_view",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Step {
    GlobalLook,
    Crop { region: Region },
    Observe,
    Verify { region: Region },
    Score { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub item_id: String,
    pub kind: TrajectoryKind,
    pub steps: Vec<Step>,
    pub trace_text: String,
    pub coverage: f64,
    pub context_ratio: f64,
}

impl Trajectory {
    pub fn crops(&self) -> impl Iterator<Item = &Region> {
        self.steps.iter().filter_map(|s| match s {
            Step::Crop { region } => Some(region),
            _ => None,
        })
    }

    pub fn has_crop(&self) -> bool {
        self.crops().next().is_some()
    }

    pub fn final_score(&self) -> Option<f64> {
        match self.steps.last() {
            Some(Step::Score { value }) => Some(*value),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub crop: u32,
    pub context_margin: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            crop: DEFAULT_CROP,
            context_margin: DEFAULT_CONTEXT_MARGIN,
        }
    }
}

fn need_defects(defects: &[DefectRecord]) -> Result<()> {
    if defects.is_empty() {
        Err(Error::arg("strategy needs at least one defect"))
    } else {
        Ok(())
    }
}

fn check_crop(crop: u32, image: (u32, u32)) -> Result<()> {
    if crop == 0 || crop > image.0 || crop > image.1 {
        return Err(Error::arg(format!(
            "crop {crop} does not fit a {}x{} image",
            image.0, image.1
        )));
    }
    Ok(())
}

fn centered(cx: f64, cy: f64, crop: u32, image: (u32, u32)) -> Region {
    let half = crop as f64 / 2.0;
    Region {
        x: (cx - half).round().clamp(0.0, (image.0 - crop) as f64) as u32,
        y: (cy - half).round().clamp(0.0, (image.1 - crop) as f64) as u32,
        w: crop,
        h: crop,
    }
}

/// Crop-sized window on the most important defect.
pub fn crop_degradation_only(defects: &[DefectRecord], crop: u32, image: (u32, u32)) -> Result<Region> {
    need_defects(defects)?;
    check_crop(crop, image)?;
    let top = defects
        .iter()
        .fold(&defects[0], |best, d| if d.importance > best.importance { d } else { best });
    let (cx, cy) = top.region.center();
    Ok(centered(cx, cy, crop, image))
}

/// One axis of the all-defects window: margin, growth to `crop`, then clamping.
fn context_span(lo: f64, hi: f64, margin: f64, crop: f64, limit: f64) -> (u32, u32) {
    let pad = (hi - lo) * margin;
    let (mut a, mut b) = (lo - pad, hi + pad);
    if b - a < crop {
        let c = (a + b) / 2.0;
        a = c - crop / 2.0;
        b = c + crop / 2.0;
    }
    if b - a >= limit {
        return (0, limit as u32);
    }
    if a < 0.0 {
        b -= a;
        a = 0.0;
    }
    if b > limit {
        a -= b - limit;
        b = limit;
    }
    let a = a.floor().max(0.0);
    let b = b.ceil().min(limit);
    (a as u32, (b - a) as u32)
}

/// Window holding every defect plus `context_margin` of the union's size on
/// each side, at least `crop` wide and tall.
pub fn crop_all_plus_context(
    defects: &[DefectRecord],
    crop: u32,
    context_margin: f64,
    image: (u32, u32),
) -> Result<Region> {
    need_defects(defects)?;
    if !(context_margin >= 0.0) {
        return Err(Error::arg(format!("context margin must be >= 0, got {context_margin}")));
    }
    let union = Region::union_box(defects.iter().map(|d| &d.region)).expect("nonempty");
    if union.right() > image.0 as u64 || union.bottom() > image.1 as u64 {
        return Err(Error::Region(format!(
            "defect union {union} exceeds {}x{} image",
            image.0, image.1
        )));
    }
    let (x, w) = context_span(
        union.x as f64,
        union.right() as f64,
        context_margin,
        crop as f64,
        image.0 as f64,
    );
    let (y, h) = context_span(
        union.y as f64,
        union.bottom() as f64,
        context_margin,
        crop as f64,
        image.1 as f64,
    );
    Ok(Region { x, y, w, h })
}

/// Seeded crop that sees only part of the degradation and keeps some context.
pub fn crop_partial(defects: &[DefectRecord], crop: u32, image: (u32, u32), seed: u64) -> Result<Region> {
    need_defects(defects)?;
    check_crop(crop, image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (max_x, max_y) = ((image.0 - crop) as i64, (image.1 - crop) as i64);
    for _ in 0..PLACEMENT_ATTEMPTS {
        let d = &defects[rng.gen_range(0..defects.len())].region;
        let lo_x = (d.x as i64 - crop as i64 + 1).clamp(0, max_x);
        let hi_x = (d.right() as i64 - 1).clamp(0, max_x);
        let lo_y = (d.y as i64 - crop as i64 + 1).clamp(0, max_y);
        let hi_y = (d.bottom() as i64 - 1).clamp(0, max_y);
        let cand = Region {
            x: rng.gen_range(lo_x..=hi_x) as u32,
            y: rng.gen_range(lo_y..=hi_y) as u32,
            w: crop,
            h: crop,
        };
        let partial_hit = defects.iter().any(|e| {
            let f = cand.intersection_area(&e.region) as f64 / e.region.area() as f64;
            f > 0.0 && f < 1.0
        });
        let (cov, ctx) = coverage(&cand, defects);
        if partial_hit && cov > 0.0 && cov < 1.0 && ctx >= MIN_PARTIAL_CONTEXT {
            return Ok(cand);
        }
    }
    Err(Error::arg(format!(
        "no partial placement found in {PLACEMENT_ATTEMPTS} attempts"
    )))
}

/// `(fraction of defect area inside region, non-defect fraction of region)`.
pub fn coverage(region: &Region, defects: &[DefectRecord]) -> (f64, f64) {
    let inside: u64 = defects.iter().map(|d| region.intersection_area(&d.region)).sum();
    let total: u64 = defects.iter().map(|d| d.region.area()).sum();
    let cov = if defects.is_empty() {
        1.0
    } else {
        inside as f64 / total as f64
    };
    let ctx = if region.area() == 0 {
        1.0
    } else {
        1.0 - inside as f64 / region.area() as f64
    };
    (cov, ctx)
}

pub fn strategy_region(
    strategy: CropStrategy,
    defects: &[DefectRecord],
    cfg: &ProbeConfig,
    image: (u32, u32),
    seed: u64,
) -> Result<Region> {
    let crop = cfg.crop.min(image.0).min(image.1);
    match strategy {
        CropStrategy::DegradationOnly => crop_degradation_only(defects, crop, image),
        CropStrategy::Partial => crop_partial(defects, crop, image, seed),
        CropStrategy::AllPlusContext => crop_all_plus_context(defects, crop, cfg.context_margin, image),
    }
}

/// Crop-sized window clear of every defect, preferring high texture energy.
fn pristine_region(item: &BenchmarkItem, crop: u32, texture: Option<&EnergyMap>, seed: u64) -> Result<Region> {
    let image = (item.width, item.height);
    let clear = |r: &Region| item.defects.iter().all(|d| !d.region.overlaps(r));
    if let Some(map) = texture {
        let found = select_texture_regions(map, 16, crop, crop as f64 / 2.0)?;
        if let Some(r) = found.into_iter().find(|r| clear(r)) {
            return Ok(r);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..PLACEMENT_ATTEMPTS {
        let r = Region {
            x: rng.gen_range(0..=image.0 - crop),
            y: rng.gen_range(0..=image.1 - crop),
            w: crop,
            h: crop,
        };
        if clear(&r) {
            return Ok(r);
        }
    }
    Err(Error::arg(format!(
        "item {}: no defect-free {crop}px window in {PLACEMENT_ATTEMPTS} attempts",
        item.id
    )))
}

/// Region grown by half its size on each side, clamped to the image.
fn context_of(r: &Region, image: (u32, u32)) -> Region {
    let (x0, y0) = (r.x.saturating_sub(r.w / 2), r.y.saturating_sub(r.h / 2));
    let x1 = (r.right() + r.w as u64 / 2).min(image.0 as u64) as u32;
    let y1 = (r.bottom() + r.h as u64 / 2).min(image.1 as u64) as u32;
    Region {
        x: x0,
        y: y0,
        w: x1 - x0,
        h: y1 - y0,
    }
}

fn render_crop(out: &mut String, r: &Region) {
    let _ = writeln!(out, "<crop x={} y={} w={} h={}/><observe/>", r.x, r.y, r.w, r.h);
}

fn render_score(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    format!("<score>{s}</score>")
}

/// Builds one trace; `texture` steers clarity crops toward detailed content.
pub fn generate_trajectory(
    item: &BenchmarkItem,
    strategy: CropStrategy,
    kind: TrajectoryKind,
    seed: u64,
    cfg: &ProbeConfig,
    texture: Option<&EnergyMap>,
) -> Result<Trajectory> {
    let image = (item.width, item.height);
    let crop = cfg.crop.min(item.width).min(item.height);
    let mut steps = vec![Step::GlobalLook];
    let mut text = String::new();
    let (coverage_v, context_v);
    match kind {
        TrajectoryKind::DegradationCapture => {
            let r = strategy_region(strategy, &item.defects, cfg, image, seed)
                .map_err(|e| annotate(item, e))?;
            let (cx, cy) = r.center();
            let _ = writeln!(
                text,
                "<think>Global view of the {}x{} frame. Local texture near ({cx:.0},{cy:.0}) looks inconsistent; zoom in to inspect it.</think>",
                item.width, item.height
            );
            render_crop(&mut text, &r);
            steps.push(Step::Crop { region: r });
            steps.push(Step::Observe);
            (coverage_v, context_v) = coverage(&r, &item.defects);
        }
        TrajectoryKind::ClarityLocalization => {
            let r = pristine_region(item, crop, texture, seed)?;
            let v = context_of(&r, image);
            let _ = writeln!(
                text,
                "<think>Global view of the {}x{} frame. Fine detail near ({:.0},{:.0}); zoom in to confirm it is sharp, then check the surroundings.</think>",
                item.width,
                item.height,
                r.center().0,
                r.center().1
            );
            render_crop(&mut text, &r);
            render_crop(&mut text, &v);
            steps.push(Step::Crop { region: r });
            steps.push(Step::Observe);
            steps.push(Step::Verify { region: v });
            (coverage_v, context_v) = coverage(&r, &item.defects);
        }
        TrajectoryKind::DistantView => {
            let _ = writeln!(
                text,
                "<think>Global view of the {}x{} frame. Overall quality is judged from the full image without zooming.</think>",
                item.width, item.height
            );
            coverage_v = if item.defects.is_empty() { 1.0 } else { 0.0 };
            context_v = 1.0;
        }
    }
    text.push_str(&render_score(item.mos));
    text.push('\n');
    steps.push(Step::Score { value: item.mos });
    debug_assert_eq!(format_reward(&text), 1.0, "{text}");
    Ok(Trajectory {
        item_id: item.id.clone(),
        kind,
        steps,
        trace_text: text,
        coverage: coverage_v,
        context_ratio: context_v,
    })
}

fn annotate(item: &BenchmarkItem, e: Error) -> Error {
    match e {
        Error::Argument(m) => Error::Argument(format!("item {}: {m}", item.id)),
        other => other,
    }
}

/// Low- and high-resolution trajectory counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusMix {
    pub lowres: usize,
    pub highres: usize,
}

impl CorpusMix {
    /// Two low-resolution traces per high-resolution one, one high-res per item.
    pub fn default_for(n_items: usize) -> Self {
        Self {
            lowres: 2 * n_items,
            highres: n_items,
        }
    }
}

/// Low-res items get distant views; high-res ones get crops, with at least
/// [`PRISTINE_CROP_QUOTA`] of the crops on pristine items.
pub fn build_sft_corpus(
    manifest: &[BenchmarkItem],
    mix: CorpusMix,
    strategy: CropStrategy,
    seed: u64,
    cfg: &ProbeConfig,
    textures: Option<&HashMap<String, EnergyMap>>,
) -> Result<Vec<Trajectory>> {
    if manifest.is_empty() {
        return Err(Error::arg("manifest is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "corpus"));
    let mut pristine: Vec<&BenchmarkItem> = manifest.iter().filter(|i| i.is_pristine()).collect();
    let mut defective: Vec<&BenchmarkItem> = manifest.iter().filter(|i| !i.is_pristine()).collect();
    let mut all: Vec<&BenchmarkItem> = manifest.iter().collect();
    pristine.shuffle(&mut rng);
    defective.shuffle(&mut rng);
    all.shuffle(&mut rng);

    let quota = (PRISTINE_CROP_QUOTA * mix.highres as f64).ceil() as usize;
    if quota > 0 && pristine.is_empty() {
        return Err(Error::arg(format!(
            "pristine-crop quota of {quota} needs pristine items, manifest has none"
        )));
    }
    let mut plan: Vec<(&BenchmarkItem, TrajectoryKind)> = Vec::with_capacity(mix.lowres + mix.highres);
    for i in 0..mix.highres {
        if i < quota || defective.is_empty() {
            plan.push((pristine[i % pristine.len()], TrajectoryKind::ClarityLocalization));
        } else {
            plan.push((defective[(i - quota) % defective.len()], TrajectoryKind::DegradationCapture));
        }
    }
    for i in 0..mix.lowres {
        plan.push((all[i % all.len()], TrajectoryKind::DistantView));
    }
    plan.shuffle(&mut rng);

    plan.par_iter()
        .enumerate()
        .map(|(n, (item, kind))| {
            let s = derive_seed(seed, &format!("traj/{n}/{}", item.id));
            let tex = textures.and_then(|t| t.get(&item.id));
            generate_trajectory(item, strategy, *kind, s, cfg, tex)
        })
        .collect()
}

pub fn corpus_to_jsonl(corpus: &[Trajectory]) -> String {
    let mut out = String::new();
    for t in corpus {
        out.push_str(&serde_json::to_string(t).expect("trajectory serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_corpus_jsonl(text: &str) -> Result<Vec<Trajectory>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))
        })
        .collect()
}
