//! Command-line verbs, TOML configuration and the pluggable scorer adapter.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{self, Prediction};
use crate::forge::{derive_seed, forge_item, ForgeConfig};
use crate::model::{load_raster, read_manifest, save_raster, write_atomic, write_manifest, BenchmarkItem, Region};
use crate::probe::{self, CorpusMix, CropStrategy, ProbeConfig, Trajectory};
use crate::rewards::{self, RewardBreakdown, RewardInputs, RewardWeights, DEFAULT_TAU};
use crate::sim::{self, AblationKind, ProbePolicy, SimConfig};
use crate::wavelet::{self, EnergyMap};

pub const ORACLE_JITTER: f64 = 0.15;
pub const REMOTE_PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ScorerMode {
    #[default]
    Oracle,
    Replay,
    Remote,
}

/// Where score groups come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerBinding {
    pub mode: ScorerMode,
    pub replay_path: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub retries: u32,
    /// Oracle-mode Gaussian std around the item MOS.
    pub jitter: f64,
    /// Sent as `Authorization: Bearer <token>` in remote mode.
    pub bearer_token: Option<String>,
}

impl Default for ScorerBinding {
    fn default() -> Self {
        Self {
            mode: ScorerMode::Oracle,
            replay_path: None,
            endpoint: None,
            timeout_ms: 10_000,
            retries: 2,
            jitter: ORACLE_JITTER,
            bearer_token: None,
        }
    }
}

impl ScorerBinding {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            ScorerMode::Replay if self.replay_path.is_none() => {
                Err(Error::arg("replay mode requires replay_path"))
            }
            ScorerMode::Remote if self.endpoint.is_none() => Err(Error::arg("remote mode requires endpoint")),
            ScorerMode::Remote if self.timeout_ms == 0 => Err(Error::arg("remote mode requires timeout_ms > 0")),
            _ if !(self.jitter.is_finite() && self.jitter >= 0.0) => {
                Err(Error::arg(format!("jitter must be finite and >= 0, got {}", self.jitter)))
            }
            _ => Ok(()),
        }
    }
}

/// One line of a score file, also the remote scorer's response body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub id: String,
    pub scores: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct RemoteRequest<'a> {
    v: u32,
    id: &'a str,
    image_path: &'a str,
    k: usize,
}

fn oracle_scores(item: &BenchmarkItem, k: usize, jitter: f64, seed: u64) -> Result<Vec<f64>> {
    if jitter == 0.0 {
        return Ok(vec![item.mos; k]);
    }
    let normal = Normal::new(0.0, jitter).map_err(|e| Error::arg(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("oracle/{}", item.id)));
    Ok((0..k).map(|_| item.mos + normal.sample(&mut rng)).collect())
}

pub fn parse_score_lines(text: &str) -> Result<Vec<ScoredItem>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::Parse(format!("line {}: {e}", n + 1))))
        .collect()
}

pub fn score_lines(items: &[ScoredItem]) -> String {
    let mut out = String::new();
    for s in items {
        out.push_str(&serde_json::to_string(s).expect("scores serialize"));
        out.push('\n');
    }
    out
}

fn check_group(id: &str, scores: &[f64], k: usize) -> Result<()> {
    if scores.len() != k {
        return Err(Error::Schema(format!("{id}: expected {k} scores, got {}", scores.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Schema(format!("{id}: non-finite score")));
    }
    Ok(())
}

/// Queries the remote scorer for one item within `timeout × (retries + 1)`.
fn remote_scores(binding: &ScorerBinding, item: &BenchmarkItem, image_path: &str, k: usize) -> Result<Vec<f64>> {
    let endpoint = binding.endpoint.as_deref().expect("validated");
    let per_try = Duration::from_millis(binding.timeout_ms);
    let deadline = Instant::now() + per_try * (binding.retries + 1);
    let agent = ureq::AgentBuilder::new().build();
    let body = RemoteRequest {
        v: REMOTE_PROTOCOL_VERSION,
        id: &item.id,
        image_path,
        k,
    };
    let mut backoff = Duration::from_millis(50);
    let mut last = String::new();
    for attempt in 0..=binding.retries {
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            break;
        }
        let mut req = agent.post(endpoint).timeout(per_try.min(left));
        if let Some(tok) = &binding.bearer_token {
            req = req.set("Authorization", &format!("Bearer {tok}"));
        }
        match req.send_json(&body) {
            Ok(resp) => {
                let parsed: ScoredItem = resp
                    .into_json()
                    .map_err(|e| Error::Schema(format!("{}: bad response body: {e}", item.id)))?;
                if parsed.id != item.id {
                    return Err(Error::Schema(format!("{}: response names id {:?}", item.id, parsed.id)));
                }
                check_group(&item.id, &parsed.scores, k)?;
                return Ok(parsed.scores);
            }
            Err(e) => {
                log::warn!("{}: attempt {} failed: {e}", item.id, attempt + 1);
                last = e.to_string();
            }
        }
        if attempt < binding.retries {
            let left = deadline.saturating_duration_since(Instant::now());
            std::thread::sleep(backoff.min(left));
            backoff *= 2;
        }
    }
    Err(Error::Network(format!(
        "{}: gave up after {} attempt(s): {last}",
        item.id,
        binding.retries + 1
    )))
}

/// Produces `k` scores per manifest item; `base_dir` resolves image paths.
pub fn score_items(
    binding: &ScorerBinding,
    manifest: &[BenchmarkItem],
    k: usize,
    seed: u64,
    base_dir: &Path,
) -> Result<Vec<ScoredItem>> {
    binding.validate()?;
    if k == 0 {
        return Err(Error::arg("k must be >= 1"));
    }
    let replay: Option<HashMap<String, Vec<f64>>> = match binding.mode {
        ScorerMode::Replay => {
            let path = binding.replay_path.as_ref().expect("validated");
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Some(parse_score_lines(&text)?.into_iter().map(|s| (s.id, s.scores)).collect())
        }
        _ => None,
    };
    manifest
        .par_iter()
        .map(|item| {
            let scores = match binding.mode {
                ScorerMode::Oracle => oracle_scores(item, k, binding.jitter, seed)?,
                ScorerMode::Replay => {
                    let s = replay
                        .as_ref()
                        .expect("loaded")
                        .get(&item.id)
                        .ok_or_else(|| Error::MissingEntry(item.id.clone()))?;
                    check_group(&item.id, s, k)?;
                    s.clone()
                }
                ScorerMode::Remote => {
                    let path = base_dir.join(&item.image_path);
                    remote_scores(binding, item, &path.to_string_lossy(), k)?
                }
            };
            Ok(ScoredItem {
                id: item.id.clone(),
                scores,
            })
        })
        .collect()
}

/// Everything a run can be configured with; each verb reads its section.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub seed: u64,
    pub jobs: usize,
    pub forge: ForgeConfig,
    pub probe: ProbeConfig,
    pub rewards: RewardSection,
    pub scorer: ScorerBinding,
    pub sim: SimConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub weights: RewardWeights,
    pub tau: f64,
}

impl Default for RewardSection {
    fn default() -> Self {
        Self {
            weights: RewardWeights::default(),
            tau: DEFAULT_TAU,
        }
    }
}

pub fn load_config(path: Option<&Path>) -> Result<CliConfig> {
    let Some(path) = path else {
        return Ok(CliConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

#[derive(Debug, Parser)]
#[command(name = "qprobe", version, about = "Localized-degradation IQA toolkit and probing simulator")]
pub struct Cli {
    /// TOML configuration file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 picks the machine default.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output file or directory, depending on the verb.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Degrade source images into a benchmark with manifest and provenance.
    Forge {
        #[arg(long)]
        sources: PathBuf,
    },
    /// Synthesize a JSONL probing-trace corpus from a manifest.
    Trajectories {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_parser = parse_strategy)]
        strategy: CropStrategy,
    },
    /// Run curriculum stages in the grid-world simulator.
    Train {
        /// Comma-separated subset of 1,2,3.
        #[arg(long, default_value = "1,2,3", value_parser = parse_stages)]
        stages: StageSet,
        /// Checkpoint to start from.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<CropStrategy>,
    },
    /// Per-item reward breakdown for a predictions CSV.
    Rewards {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        weights: WeightFlags,
    },
    /// SRCC/PLCC per source tag.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Optional per-group CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Score groups from the configured scorer, as JSONL.
    Score {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = crate::grpo::DEFAULT_GROUP_SIZE)]
        k: usize,
        #[arg(long, value_enum)]
        mode: Option<ScorerMode>,
        #[arg(long)]
        replay: Option<PathBuf>,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        timeout_ms: Option<u64>,
        #[arg(long)]
        retries: Option<u32>,
        #[arg(long)]
        jitter: Option<f64>,
    },
    /// Simulator ablation over consecutive seeds.
    Ablate {
        #[arg(long, value_parser = parse_kind)]
        kind: AblationKind,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

#[derive(Debug, Clone, Copy, Args)]
pub struct WeightFlags {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta_loc: Option<f64>,
    #[arg(long)]
    pub gamma_fmt: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSet(pub [bool; 3]);

impl StageSet {
    pub fn has(&self, stage: u8) -> bool {
        self.0[stage as usize - 1]
    }
}

fn parse_stages(s: &str) -> std::result::Result<StageSet, String> {
    let mut set = [false; 3];
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "1" | "2" | "3" => set[part.as_bytes()[0] as usize - b'1' as usize] = true,
            other => return Err(format!("unknown stage {other:?}, expected a subset of 1,2,3")),
        }
    }
    if set == [false; 3] {
        return Err("no stages selected".into());
    }
    Ok(StageSet(set))
}

fn parse_strategy(s: &str) -> std::result::Result<CropStrategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_kind(s: &str) -> std::result::Result<AblationKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// One predictions row; `line` is 1-based in the source file.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub line: u64,
    pub id: String,
    pub score: f64,
    pub bbox: Option<Region>,
    pub trace: Option<String>,
}

/// Reads `id,score[,x,y,w,h][,trace]`; extra columns are ignored.
pub fn parse_predictions(text: &str) -> Result<Vec<PredictionRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| Error::Parse(format!("line 1: {e}")))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(id_col), Some(score_col)) = (col("id"), col("score")) else {
        return Err(Error::Parse("line 1: header must contain id and score".into()));
    };
    let box_cols = match (col("x"), col("y"), col("w"), col("h")) {
        (Some(x), Some(y), Some(w), Some(h)) => Some([x, y, w, h]),
        (None, None, None, None) => None,
        _ => return Err(Error::Parse("line 1: box columns need all of x,y,w,h".into())),
    };
    let trace_col = col("trace");
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Parse(format!("line {line}: {e}"))
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).unwrap_or("");
        let id = field(id_col).to_string();
        if id.is_empty() {
            return Err(Error::Parse(format!("line {line}: empty id")));
        }
        let score: f64 = field(score_col)
            .parse()
            .map_err(|_| Error::Parse(format!("line {line}: score {:?} is not a number", field(score_col))))?;
        if !score.is_finite() {
            return Err(Error::Parse(format!("line {line}: score must be finite")));
        }
        let bbox = match box_cols {
            Some(cols) if cols.iter().all(|&c| field(c).is_empty()) => None,
            Some(cols) => {
                let mut v = [0u32; 4];
                for (slot, &c) in v.iter_mut().zip(&cols) {
                    *slot = field(c)
                        .parse()
                        .map_err(|_| Error::Parse(format!("line {line}: box field {:?} is not a count", field(c))))?;
                }
                Some(Region::new(v[0], v[1], v[2], v[3]).map_err(|e| Error::Parse(format!("line {line}: {e}")))?)
            }
            None => None,
        };
        let trace = trace_col.map(field).filter(|t| !t.is_empty()).map(str::to_string);
        rows.push(PredictionRow {
            line,
            id,
            score,
            bbox,
            trace,
        });
    }
    Ok(rows)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn missing_ids(rows: &[PredictionRow], by_id: &HashMap<&str, &BenchmarkItem>) -> Result<()> {
    let missing: Vec<String> = rows
        .iter()
        .filter(|r| !by_id.contains_key(r.id.as_str()))
        .map(|r| format!("{} (line {})", r.id, r.line))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingIds(missing))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ItemReward {
    pub id: String,
    #[serde(flatten)]
    pub breakdown: RewardBreakdown,
}

/// Rewards for every row. Rows without a trace count as well-formed.
pub fn compute_rewards(
    rows: &[PredictionRow],
    manifest: &[BenchmarkItem],
    weights: &RewardWeights,
    tau: f64,
    trace_dir: &Path,
) -> Result<Vec<ItemReward>> {
    let by_id: HashMap<&str, &BenchmarkItem> = manifest.iter().map(|i| (i.id.as_str(), i)).collect();
    missing_ids(rows, &by_id)?;
    rows.iter()
        .map(|r| {
            let item = by_id[r.id.as_str()];
            let r_fmt = match &r.trace {
                Some(t) => {
                    let path = trace_dir.join(t);
                    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    rewards::format_reward(&text)
                }
                None => 1.0,
            };
            let inputs = RewardInputs {
                s_pred: r.score,
                s_mos: item.mos,
                tau,
                b_pred: r.bbox.as_ref(),
                defects: &item.defects,
                r_fmt,
            };
            Ok(ItemReward {
                id: r.id.clone(),
                breakdown: rewards::total_reward(&inputs, weights)?,
            })
        })
        .collect()
}

pub fn rewards_csv(rows: &[ItemReward]) -> String {
    let mut out = String::from("id,r_acc,r_loc,r_fmt,r_total\n");
    for r in rows {
        let b = &r.breakdown;
        let _ = writeln!(out, "{},{},{},{},{}", r.id, b.r_acc, b.r_loc, b.r_fmt, b.r_total);
    }
    out
}

pub fn mean_breakdown(rows: &[ItemReward]) -> RewardBreakdown {
    let n = rows.len().max(1) as f64;
    let sum = |f: fn(&RewardBreakdown) -> f64| rows.iter().map(|r| f(&r.breakdown)).sum::<f64>() / n;
    RewardBreakdown {
        r_acc: sum(|b| b.r_acc),
        r_loc: sum(|b| b.r_loc),
        r_fmt: sum(|b| b.r_fmt),
        r_total: sum(|b| b.r_total),
    }
}

/// Counts per unit MOS bin; the top bin includes 5.0.
pub fn mos_histogram(items: &[BenchmarkItem]) -> [usize; 4] {
    let mut h = [0; 4];
    for i in items {
        h[((i.mos - 1.0).floor().max(0.0) as usize).min(3)] += 1;
    }
    h
}

const SOURCE_EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

fn source_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| SOURCE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

#[derive(Debug, Serialize)]
struct SourceRecord {
    id: String,
    file: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Provenance<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a ForgeConfig,
    sources: Vec<SourceRecord>,
}

pub struct ForgeSummary {
    pub items: Vec<BenchmarkItem>,
}

/// Forges every image in `source_dir` into `out_dir`.
pub fn forge_dir(config: &ForgeConfig, source_dir: &Path, out_dir: &Path) -> Result<ForgeSummary> {
    config.validate()?;
    let files = source_files(source_dir)?;
    if files.is_empty() {
        return Err(Error::Forge(format!("no source images in {}", source_dir.display())));
    }
    let ids: Vec<String> = files
        .iter()
        .map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    let mut seen = BTreeMap::new();
    for (id, p) in ids.iter().zip(&files) {
        if let Some(prev) = seen.insert(id.clone(), p.clone()) {
            return Err(Error::Forge(format!(
                "sources {} and {} share the id {id:?}",
                prev.display(),
                p.display()
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results: Vec<(BenchmarkItem, SourceRecord)> = files
        .par_iter()
        .zip(ids.par_iter())
        .map(|(path, id)| {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let source = load_raster(path)?;
            let (raster, item) = forge_item(&source, config, id)?;
            save_raster(&raster, out_dir.join(&item.image_path))?;
            let rec = SourceRecord {
                id: id.clone(),
                file: path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
                sha256: format!("{:x}", Sha256::digest(&bytes)),
            };
            Ok((item, rec))
        })
        .collect::<Result<_>>()?;
    let (items, sources): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    write_manifest(&items, out_dir.join("manifest.json"))?;
    let prov = Provenance {
        tool: "qprobe",
        version: env!("CARGO_PKG_VERSION"),
        config,
        sources,
    };
    let mut text = serde_json::to_string_pretty(&prov).expect("provenance serializes");
    text.push('\n');
    write_atomic(&out_dir.join("provenance.json"), text.as_bytes())?;
    Ok(ForgeSummary { items })
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Texture maps for items whose raster is readable next to the manifest.
fn texture_maps(manifest: &[BenchmarkItem], base: &Path, levels: usize) -> HashMap<String, EnergyMap> {
    manifest
        .par_iter()
        .filter_map(|item| {
            let raster = load_raster(base.join(&item.image_path)).ok()?;
            let pyr = wavelet::dwt2(&raster, levels.max(1)).ok()?;
            let cell = (raster.width().min(raster.height()) / 16).max(1);
            wavelet::texture_energy(&pyr, cell).ok().map(|m| (item.id.clone(), m))
        })
        .collect()
}

/// Defective items whose defects admit no crop under `strategy`.
fn placement_failures(manifest: &[BenchmarkItem], strategy: CropStrategy, cfg: &ProbeConfig, seed: u64) -> Vec<String> {
    manifest
        .iter()
        .filter(|i| !i.is_pristine())
        .filter(|i| {
            probe::strategy_region(strategy, &i.defects, cfg, (i.width, i.height), derive_seed(seed, &i.id)).is_err()
        })
        .map(|i| i.id.clone())
        .collect()
}

pub fn trajectories(
    manifest: &[BenchmarkItem],
    strategy: CropStrategy,
    cfg: &ProbeConfig,
    seed: u64,
    base: &Path,
    levels: usize,
) -> Result<Vec<Trajectory>> {
    let failed = placement_failures(manifest, strategy, cfg, seed);
    if !failed.is_empty() {
        return Err(Error::Region(format!(
            "no {} crop placement for: {}",
            strategy.as_str(),
            failed.join(", ")
        )));
    }
    let textures = texture_maps(manifest, base, levels);
    probe::build_sft_corpus(
        manifest,
        CorpusMix::default_for(manifest.len()),
        strategy,
        seed,
        cfg,
        Some(&textures),
    )
}

fn mix_summary(corpus: &[Trajectory], strategy: CropStrategy) -> String {
    let mut kinds: BTreeMap<&str, usize> = BTreeMap::new();
    for t in corpus {
        *kinds.entry(t.kind.as_str()).or_default() += 1;
    }
    let parts: Vec<String> = kinds.iter().map(|(k, n)| format!("{k}={n}")).collect();
    format!("{} trajectories, strategy {}: {}", corpus.len(), strategy.as_str(), parts.join(" "))
}

fn require_out(out: &Option<PathBuf>, verb: &str) -> Result<PathBuf> {
    out.clone().ok_or_else(|| Error::arg(format!("{verb} requires --out")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_text(path, &text)
}

fn stage_err(stage: u8, e: Error) -> Error {
    Error::Argument(format!("stage {stage} failed: {e}"))
}

fn eval_row(eval: &sim::PolicyEval) -> String {
    format!(
        "srcc {:.4}  plcc {:.4}  crop_hit {:.4}  crop_rate {:.4}",
        eval.srcc, eval.plcc, eval.crop_hit, eval.crop_rate
    )
}

fn train(cfg: &CliConfig, stages: StageSet, policy_path: Option<&Path>, strategy: CropStrategy, seed: u64, out: &Path) -> Result<String> {
    let sim_cfg = &cfg.sim;
    let mut policy = match policy_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let policy: ProbePolicy =
                serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))?;
            policy.validate()?;
            if policy.grid != sim_cfg.scene.grid {
                return Err(Error::Validation(format!(
                    "policy grid {} does not match scene grid {}",
                    policy.grid, sim_cfg.scene.grid
                )));
            }
            Some(policy)
        }
        None => None,
    };
    if stages.has(3) && policy.is_none() && !stages.has(1) && !stages.has(2) {
        return Err(Error::arg("stage 3 requires a policy (pass --policy or run an earlier stage)"));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data = sim::datasets(seed, sim_cfg)?;
    let mut current = policy.take().unwrap_or_else(|| sim::initial_policy(sim_cfg));
    let mut log = String::new();
    let _ = writeln!(log, "# {}", sim::SYNTHETIC_NOTE);
    if stages.has(1) {
        log::info!("stage 1");
        let (p, curve) = sim::run_stage1(&current, &data, seed, sim_cfg).map_err(|e| stage_err(1, e))?;
        write_text(&out.join("stage1_curve.csv"), &sim::stage1_csv(&curve))?;
        write_json(&out.join("policy_stage1.json"), &p)?;
        let _ = writeln!(log, "stage 1: {} iterations", curve.len());
        current = p;
    }
    if stages.has(2) {
        log::info!("stage 2, strategy {}", strategy.as_str());
        let (p, curve) = sim::run_stage2(&current, &data, strategy, seed, sim_cfg).map_err(|e| stage_err(2, e))?;
        write_text(&out.join("stage2_curve.csv"), &sim::stage2_csv(&curve))?;
        write_json(&out.join("policy_stage2.json"), &p)?;
        let gap = sim::bias_gap(&p, &data.probes)?;
        let _ = writeln!(log, "stage 2: {} iterations, bias gap {gap:.3} bins", curve.len());
        current = p;
    }
    if stages.has(3) {
        log::info!("stage 3");
        let (p, curve) =
            sim::run_stage3(&current, &data, &sim_cfg.weights, seed, sim_cfg).map_err(|e| stage_err(3, e))?;
        write_text(&out.join("stage3_curve.csv"), &sim::stage3_csv(&curve))?;
        write_json(&out.join("policy_stage3.json"), &p)?;
        let _ = writeln!(log, "stage 3: {} iterations", curve.len());
        current = p;
    }
    let eval = sim::evaluate_policy(&current, &data.eval)?;
    write_json(&out.join("eval.json"), &eval)?;
    let _ = writeln!(log, "eval: {}", eval_row(&eval));
    Ok(log)
}

#[derive(Debug, Serialize)]
struct AblationSummary<'a> {
    kind: AblationKind,
    note: &'static str,
    seeds: Vec<u64>,
    ordering_holds: Vec<bool>,
    checks: BTreeMap<String, Vec<bool>>,
    reports: &'a [sim::AblationReport],
}

fn ablate(cfg: &SimConfig, kind: AblationKind, first_seed: u64, seeds: u64, out: &Path) -> Result<String> {
    if seeds == 0 {
        return Err(Error::arg("seeds must be >= 1"));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let seed_list: Vec<u64> = (first_seed..first_seed + seeds).collect();
    let reports = seed_list
        .iter()
        .map(|&s| {
            log::info!("ablation {kind:?}, seed {s}");
            sim::run_ablation(kind, s, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut checks: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    for r in &reports {
        for (k, v) in &r.checks {
            checks.entry(k.clone()).or_default().push(*v);
        }
    }
    let name = serde_json::to_value(kind).expect("kind serializes");
    let name = name.as_str().expect("unit variant");
    write_text(&out.join(format!("ablation_{name}.csv")), &sim::ablation_csv(&reports))?;
    let summary = AblationSummary {
        kind,
        note: sim::SYNTHETIC_NOTE,
        seeds: seed_list.clone(),
        ordering_holds: reports.iter().map(|r| r.ordering_holds).collect(),
        checks: checks.clone(),
        reports: &reports,
    };
    write_json(&out.join(format!("ablation_{name}.json")), &summary)?;
    let mut log = String::new();
    let _ = writeln!(log, "# {}", sim::SYNTHETIC_NOTE);
    for r in &reports {
        let cells: Vec<String> = r.rows.iter().map(|row| format!("{}={:.4}", row.name, row.eval.srcc)).collect();
        let _ = writeln!(log, "seed {}: {} ordering={}", r.seed, cells.join(" "), r.ordering_holds);
    }
    let held = summary.ordering_holds.iter().filter(|b| **b).count();
    let _ = writeln!(log, "ordering holds in {held}/{seeds} seeds");
    for (k, v) in &checks {
        let _ = writeln!(log, "{k}: {}/{seeds}", v.iter().filter(|b| **b).count());
    }
    Ok(log)
}

/// Runs one parsed invocation; the returned text is the verb's stdout.
pub fn run(cli: Cli) -> Result<String> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.forge.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::arg(e.to_string()))?;
    pool.install(|| dispatch(cli.command, &cli.out, cfg))
}

fn dispatch(command: Command, out: &Option<PathBuf>, mut cfg: CliConfig) -> Result<String> {
    let seed = cfg.seed;
    match command {
        Command::Forge { sources } => {
            let out = require_out(out, "forge")?;
            let summary = forge_dir(&cfg.forge, &sources, &out)?;
            let h = mos_histogram(&summary.items);
            let pristine = summary.items.iter().filter(|i| i.is_pristine()).count();
            Ok(format!(
                "{} items ({pristine} pristine) -> {}\nmos [1,2): {}  [2,3): {}  [3,4): {}  [4,5]: {}\n",
                summary.items.len(),
                out.display(),
                h[0],
                h[1],
                h[2],
                h[3]
            ))
        }
        Command::Trajectories { manifest, strategy } => {
            let out = require_out(out, "trajectories")?;
            let items = read_manifest(&manifest)?;
            let corpus = trajectories(
                &items,
                strategy,
                &cfg.probe,
                seed,
                &manifest_dir(&manifest),
                cfg.forge.wavelet_levels,
            )?;
            write_text(&out, &probe::corpus_to_jsonl(&corpus))?;
            Ok(format!("{}\n", mix_summary(&corpus, strategy)))
        }
        Command::Train {
            stages,
            policy,
            strategy,
        } => {
            let out = require_out(out, "train")?;
            let strategy = strategy.unwrap_or(cfg.sim.strategy);
            train(&cfg, stages, policy.as_deref(), strategy, seed, &out)
        }
        Command::Rewards {
            predictions,
            manifest,
            weights,
        } => {
            let w = &mut cfg.rewards;
            w.weights.alpha = weights.alpha.unwrap_or(w.weights.alpha);
            w.weights.beta_loc = weights.beta_loc.unwrap_or(w.weights.beta_loc);
            w.weights.gamma_fmt = weights.gamma_fmt.unwrap_or(w.weights.gamma_fmt);
            w.tau = weights.tau.unwrap_or(w.tau);
            let rows = read_predictions(&predictions)?;
            let items = read_manifest(&manifest)?;
            let rewards = compute_rewards(&rows, &items, &w.weights, w.tau, &manifest_dir(&predictions))?;
            let csv = rewards_csv(&rewards);
            let m = mean_breakdown(&rewards);
            let summary = format!(
                "{} items  mean r_acc {:.4}  r_loc {:.4}  r_fmt {:.4}  r_total {:.4}\n",
                rewards.len(),
                m.r_acc,
                m.r_loc,
                m.r_fmt,
                m.r_total
            );
            match out {
                Some(path) => {
                    write_text(path, &csv)?;
                    Ok(summary)
                }
                None => Ok(format!("{csv}{summary}")),
            }
        }
        Command::Eval {
            predictions,
            manifest,
            csv,
        } => {
            let rows = read_predictions(&predictions)?;
            let items = read_manifest(&manifest)?;
            let preds: Vec<Prediction> = rows
                .into_iter()
                .map(|r| Prediction {
                    id: r.id,
                    score: r.score,
                })
                .collect();
            let report = eval::evaluate(&preds, &items)?;
            if let Some(path) = out {
                write_text(path, &report.to_json())?;
            }
            if let Some(path) = csv {
                write_text(&path, &report.to_csv())?;
            }
            Ok(report.to_table())
        }
        Command::Score {
            manifest,
            k,
            mode,
            replay,
            endpoint,
            timeout_ms,
            retries,
            jitter,
        } => {
            let b = &mut cfg.scorer;
            b.mode = mode.unwrap_or(b.mode);
            b.replay_path = replay.or(b.replay_path.take());
            b.endpoint = endpoint.or(b.endpoint.take());
            b.timeout_ms = timeout_ms.unwrap_or(b.timeout_ms);
            b.retries = retries.unwrap_or(b.retries);
            b.jitter = jitter.unwrap_or(b.jitter);
            let items = read_manifest(&manifest)?;
            let scored = score_items(&cfg.scorer, &items, k, seed, &manifest_dir(&manifest))?;
            let text = score_lines(&scored);
            match out {
                Some(path) => {
                    write_text(path, &text)?;
                    Ok(format!("{} items scored, k={k}\n", scored.len()))
                }
                None => Ok(text),
            }
        }
        Command::Ablate { kind, seeds } => {
            let out = require_out(out, "ablate")?;
            ablate(&cfg.sim, kind, seed, seeds, &out)
        }
    }
}
