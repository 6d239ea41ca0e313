//! Grid-world probing environment and the three-stage curriculum.
//!
//! A scene is a `G x G` grid of patches. Defects cluster around a hotspot and
//! sit on textured patches; those with severity at or below the visibility
//! threshold do not show in the global view and can only be found by cropping.
//! The policy has a crop head (pick a cell or decline) and a score head (pick
//! one of 17 bins on `[1, 5]`).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{plcc, srcc};
use crate::forge::{derive_seed, synthesize_mos, AREA_SATURATION};
use crate::grpo::{head_log_prob_grad, head_log_probs, Adam, GrpoObjective, Observation, Policy, Rollout, Step};
use crate::model::{DefectKind, DefectRecord, Region};
use crate::probe::{
    coverage, crop_all_plus_context, crop_degradation_only, CropStrategy, MIN_PARTIAL_CONTEXT, PRISTINE_CROP_QUOTA,
};
use crate::rank::{pair_rewards, preference_label, group_stats, ScoreGroup};
use crate::rewards::{acc_reward, combine, iou, loc_reward, RewardWeights};

pub const SCORE_BINS: usize = 17;
pub const BIN_WIDTH: f64 = 0.25;
/// Features of one crop-head action: center texture, window texture, center
/// and window global severity, window area share, no-crop, no-crop at high res.
pub const CROP_FEATURES: usize = 7;

/// Score-head features: bias, the global severity of every cell in a low-res
/// block and a high-res block (only the block matching the scene is filled),
/// crop finding in MOS points, did-crop.
pub fn score_features(grid: usize) -> usize {
    2 * grid * grid + 3
}
const HIT_IOU: f64 = 0.5;

pub fn bin_value(bin: usize) -> f64 {
    1.0 + BIN_WIDTH * bin as f64
}

pub fn nearest_bin(score: f64) -> usize {
    ((score.clamp(1.0, 5.0) - 1.0) / BIN_WIDTH).round() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub texture: f64,
    pub true_quality: f64,
    pub defect: Option<DefectKind>,
    pub severity: f64,
    pub importance: f64,
    /// Whether the defect shows in the global view.
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub grid: usize,
    pub hires: bool,
    pub visibility: f64,
    pub patches: Vec<Patch>,
    pub mos: f64,
    /// Observation noise of a crop centered on each cell.
    pub crop_noise: Vec<f64>,
}

/// How scenes are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub grid: usize,
    pub defect_prob: f64,
    pub visibility: f64,
    pub hires: bool,
    pub pristine_fraction: f64,
    /// Defect count floor for non-pristine draws.
    pub min_defects: usize,
    pub severity_min: f64,
    pub severity_max: f64,
    pub obs_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            grid: 6,
            defect_prob: 0.12,
            visibility: 0.5,
            hires: true,
            pristine_fraction: 0.3,
            min_defects: 1,
            severity_min: 0.05,
            severity_max: 0.6,
            obs_noise: 0.03,
        }
    }
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        if self.grid < 2 {
            return Err(Error::arg(format!("grid must be >= 2, got {}", self.grid)));
        }
        for (name, v) in [
            ("defect_prob", self.defect_prob),
            ("visibility", self.visibility),
            ("pristine_fraction", self.pristine_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::arg(format!("{name} must lie in [0,1], got {v}")));
            }
        }
        if !(0.0 < self.severity_min && self.severity_min <= self.severity_max && self.severity_max <= 1.0) {
            return Err(Error::arg("severity range must satisfy 0 < min <= max <= 1"));
        }
        if !(self.obs_noise >= 0.0) {
            return Err(Error::arg("obs_noise must be >= 0"));
        }
        Ok(())
    }
}

/// Scene with `Binomial(g^2, defect_prob)` clustered defects.
pub fn make_scene(seed: u64, g: usize, defect_prob: f64, visibility: f64) -> Result<Scene> {
    generate_scene(
        seed,
        &SceneSpec {
            grid: g,
            defect_prob,
            visibility,
            pristine_fraction: 0.0,
            min_defects: 0,
            ..SceneSpec::default()
        },
    )
}

pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let g = spec.grid;
    let cells = g * g;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "scene"));
    let pristine = rng.gen::<f64>() < spec.pristine_fraction;
    let n = if pristine {
        0
    } else {
        let draw = Binomial::new(cells as u64, spec.defect_prob).expect("validated").sample(&mut rng) as usize;
        draw.max(spec.min_defects).min(cells)
    };
    let (hx, hy) = (rng.gen_range(0.0..g as f64), rng.gen_range(0.0..g as f64));
    let mut order: Vec<(f64, usize)> = (0..cells)
        .map(|i| {
            let (x, y) = ((i % g) as f64 + 0.5, (i / g) as f64 + 0.5);
            ((x - hx).powi(2) + (y - hy).powi(2) + rng.gen_range(0.0..0.5), i)
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut is_defect = vec![false; cells];
    for &(_, i) in order.iter().take(n) {
        is_defect[i] = true;
    }
    let visibility = if spec.hires { spec.visibility } else { 0.0 };
    let mut patches: Vec<Patch> = (0..cells)
        .map(|i| {
            if is_defect[i] {
                let severity = rng.gen_range(spec.severity_min..=spec.severity_max);
                Patch {
                    texture: rng.gen_range(0.5..1.0),
                    true_quality: 5.0 - 4.0 * severity,
                    defect: Some(DefectKind::ALL[rng.gen_range(0..4)]),
                    severity,
                    importance: 0.0,
                    visible: severity > visibility,
                }
            } else {
                Patch {
                    texture: rng.gen_range(0.0..1.0),
                    true_quality: 5.0,
                    defect: None,
                    severity: 0.0,
                    importance: 0.0,
                    visible: false,
                }
            }
        })
        .collect();
    let mut ranked: Vec<usize> = (0..cells).filter(|&i| is_defect[i]).collect();
    ranked.sort_by(|&a, &b| patches[b].texture.total_cmp(&patches[a].texture));
    for (rank, &i) in ranked.iter().enumerate() {
        patches[i].importance = if n > 1 {
            1.0 - 0.8 * rank as f64 / (n - 1) as f64
        } else {
            1.0
        };
    }
    let noise = Normal::new(0.0, spec.obs_noise).expect("validated");
    let crop_noise = (0..cells).map(|_| noise.sample(&mut rng)).collect();
    let mut scene = Scene {
        seed,
        grid: g,
        hires: spec.hires,
        visibility,
        patches,
        mos: 5.0,
        crop_noise,
    };
    scene.mos = synthesize_mos(&scene.defects(), cells as f64);
    Ok(scene)
}

impl Scene {
    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn cell_region(&self, i: usize) -> Region {
        Region {
            x: (i % self.grid) as u32,
            y: (i / self.grid) as u32,
            w: 1,
            h: 1,
        }
    }

    /// Defects in cell coordinates; each patch is a 1x1 region.
    pub fn defects(&self) -> Vec<DefectRecord> {
        self.patches
            .iter()
            .enumerate()
            .filter_map(|(i, p)| {
                p.defect.map(|kind| DefectRecord {
                    region: self.cell_region(i),
                    kind,
                    severity: p.severity,
                    importance: p.importance,
                })
            })
            .collect()
    }

    pub fn is_pristine(&self) -> bool {
        self.patches.iter().all(|p| p.defect.is_none())
    }

    /// MOS penalty contributed by one patch.
    pub fn penalty(&self, i: usize) -> f64 {
        let p = &self.patches[i];
        if p.defect.is_none() {
            return 0.0;
        }
        let share = (1.0 / (self.cells() as f64 * AREA_SATURATION)).min(1.0);
        p.importance * p.severity * share
    }

    /// Severity as seen globally: zero for hidden or absent defects.
    pub fn global_obs(&self, i: usize) -> f64 {
        let p = &self.patches[i];
        if p.defect.is_some() && p.visible {
            p.severity
        } else {
            0.0
        }
    }

    pub fn visible_penalty(&self) -> f64 {
        (0..self.cells())
            .filter(|&i| self.patches[i].visible)
            .map(|i| self.penalty(i))
            .sum()
    }

    fn cells_in(&self, window: &Region) -> impl Iterator<Item = usize> + '_ {
        let w = *window;
        (w.y as usize..w.bottom() as usize)
            .flat_map(move |y| (w.x as usize..w.right() as usize).map(move |x| y * self.grid + x))
    }

    /// Penalty of hidden defects inside `window` plus the crop's noise.
    pub fn crop_observation(&self, window: &Region) -> f64 {
        let hidden: f64 = self
            .cells_in(window)
            .filter(|&i| !self.patches[i].visible)
            .map(|i| self.penalty(i))
            .sum();
        let cx = window.x as usize + (window.w as usize - 1) / 2;
        let cy = window.y as usize + (window.h as usize - 1) / 2;
        hidden + self.crop_noise[cy * self.grid + cx]
    }

    pub fn defect_union(&self) -> Option<Region> {
        Region::union_box(self.defects().iter().map(|d| &d.region))
    }

    pub fn defect_frequency(&self) -> f64 {
        self.patches.iter().filter(|p| p.defect.is_some()).count() as f64 / self.cells() as f64
    }
}

/// Crop head plus score head sharing one flat parameter vector.
///
/// Crop actions are (window side, center cell) pairs, sides `1..=max_window`,
/// followed by a single no-crop action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePolicy {
    pub grid: usize,
    pub max_window: usize,
    pub params: Vec<f64>,
}

/// One sim episode: an optional crop decision and the score decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEpisode {
    pub crop: Option<Step>,
    pub window: Option<Region>,
    pub score: Step,
}

impl ProbeEpisode {
    pub fn score_value(&self) -> f64 {
        bin_value(self.score.action)
    }
}

impl ProbePolicy {
    /// Uniform score head; crop head declines with logit `no_crop_bias`.
    pub fn new(grid: usize, max_window: usize, no_crop_bias: f64) -> Self {
        let mut params = vec![0.0; CROP_FEATURES + SCORE_BINS * score_features(grid)];
        params[5] = no_crop_bias;
        Self {
            grid,
            max_window: max_window.clamp(1, grid),
            params,
        }
    }

    /// Checks a deserialized checkpoint against its own shape.
    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 || !(1..=self.grid).contains(&self.max_window) {
            return Err(Error::Validation(format!(
                "policy grid {} / max_window {} out of range",
                self.grid, self.max_window
            )));
        }
        let want = CROP_FEATURES + SCORE_BINS * score_features(self.grid);
        if self.params.len() != want || self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Validation(format!(
                "policy needs {want} finite parameters, got {}",
                self.params.len()
            )));
        }
        Ok(())
    }

    pub fn n_crop_actions(&self) -> usize {
        self.max_window * self.grid * self.grid + 1
    }

    pub fn no_crop_action(&self) -> usize {
        self.n_crop_actions() - 1
    }

    fn crop_theta(&self) -> &[f64] {
        &self.params[..CROP_FEATURES]
    }

    fn score_theta(&self) -> &[f64] {
        &self.params[CROP_FEATURES..]
    }

    /// Action cropping a `side x side` window around `cell`.
    pub fn crop_action(&self, side: usize, cell: usize) -> usize {
        (side.clamp(1, self.max_window) - 1) * self.grid * self.grid + cell
    }

    /// Window of side `side` around cell `cell`, clamped into the grid.
    pub fn crop_window(&self, side: usize, cell: usize) -> Region {
        let s = side.clamp(1, self.max_window);
        let (cx, cy) = (cell % self.grid, cell / self.grid);
        let x = cx.saturating_sub((s - 1) / 2).min(self.grid - s);
        let y = cy.saturating_sub((s - 1) / 2).min(self.grid - s);
        Region {
            x: x as u32,
            y: y as u32,
            w: s as u32,
            h: s as u32,
        }
    }

    /// Crop action closest to `region`: its center cell and rounded side.
    pub fn action_for(&self, region: &Region) -> usize {
        let side = ((region.area() as f64).sqrt().round() as usize).clamp(1, self.max_window);
        self.crop_action(side, center_cell(region, self.grid))
    }

    pub fn window_of(&self, action: usize) -> Option<Region> {
        let cells = self.grid * self.grid;
        (action < self.no_crop_action()).then(|| self.crop_window(action / cells + 1, action % cells))
    }

    pub fn crop_obs(&self, scene: &Scene) -> Observation {
        let n = self.n_crop_actions();
        let area = (self.grid * self.grid) as f64;
        let mut f = vec![0.0; n * CROP_FEATURES];
        for a in 0..n - 1 {
            let w = self.window_of(a).expect("crop action");
            let c = a % scene.cells();
            let (mut tex, mut vis, mut k) = (0.0, 0.0, 0.0);
            for i in scene.cells_in(&w) {
                tex += scene.patches[i].texture;
                vis += scene.global_obs(i);
                k += 1.0;
            }
            let row = &mut f[a * CROP_FEATURES..(a + 1) * CROP_FEATURES];
            row[0] = scene.patches[c].texture;
            row[1] = tex / k;
            row[2] = scene.global_obs(c);
            row[3] = vis / k;
            row[4] = k / area;
        }
        let nc = &mut f[(n - 1) * CROP_FEATURES..];
        nc[5] = 1.0;
        nc[6] = if scene.hires { 1.0 } else { 0.0 };
        Observation::dense(n, CROP_FEATURES, f).expect("sizes match")
    }

    pub fn score_obs(scene: &Scene, window: Option<&Region>) -> Observation {
        let (pc, did) = match window {
            Some(w) => (4.0 * scene.crop_observation(w), 1.0),
            None => (0.0, 0.0),
        };
        let n = scene.cells();
        let mut x = vec![0.0; score_features(scene.grid) - 2];
        x[0] = 1.0;
        let block = if scene.hires { 1 + n } else { 1 };
        for i in 0..n {
            x[block + i] = scene.global_obs(i);
        }
        x.push(pc);
        x.push(did);
        Observation::shared(SCORE_BINS, x)
    }

    pub fn crop_log_probs(&self, scene: &Scene) -> Vec<f64> {
        head_log_probs(self.crop_theta(), &self.crop_obs(scene))
    }

    pub fn score_log_probs(&self, obs: &Observation) -> Vec<f64> {
        head_log_probs(self.score_theta(), obs)
    }

    /// Expected score after the given crop decision.
    pub fn expected_score(&self, scene: &Scene, window: Option<&Region>) -> f64 {
        self.score_log_probs(&Self::score_obs(scene, window))
            .iter()
            .enumerate()
            .map(|(a, l)| l.exp() * bin_value(a))
            .sum()
    }

    /// Expected score marginalized over the crop head.
    pub fn predict(&self, scene: &Scene) -> f64 {
        self.crop_log_probs(scene)
            .iter()
            .enumerate()
            .map(|(a, l)| l.exp() * self.expected_score(scene, self.window_of(a).as_ref()))
            .sum()
    }

    /// Probability mass of crops whose window overlaps the defect box with IoU >= 0.5.
    pub fn crop_hit(&self, scene: &Scene) -> f64 {
        let Some(gt) = scene.defect_union() else {
            return 0.0;
        };
        self.crop_log_probs(scene)
            .iter()
            .enumerate()
            .filter_map(|(a, l)| self.window_of(a).map(|w| (l.exp(), w)))
            .filter(|(_, w)| iou(w, &gt) >= HIT_IOU)
            .map(|(p, _)| p)
            .sum()
    }

    pub fn crop_rate(&self, scene: &Scene) -> f64 {
        1.0 - self.crop_log_probs(scene)[self.no_crop_action()].exp()
    }
}

impl Policy for ProbePolicy {
    type Episode = ProbeEpisode;

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn episode_log_prob(&self, ep: &ProbeEpisode) -> f64 {
        let crop = ep
            .crop
            .as_ref()
            .map_or(0.0, |s| head_log_probs(self.crop_theta(), &s.obs)[s.action]);
        crop + head_log_probs(self.score_theta(), &ep.score.obs)[ep.score.action]
    }

    fn episode_log_prob_grad(&self, ep: &ProbeEpisode, scale: f64, grad: &mut [f64]) -> f64 {
        let (gc, gs) = grad.split_at_mut(CROP_FEATURES);
        let crop = ep.crop.as_ref().map_or(0.0, |s| {
            head_log_prob_grad(&self.params[..CROP_FEATURES], &s.obs, s.action, scale, gc)
        });
        crop + head_log_prob_grad(
            &self.params[CROP_FEATURES..],
            &ep.score.obs,
            ep.score.action,
            scale,
            gs,
        )
    }
}

/// KL(p || q) between two categorical distributions given as log-probs.
pub fn exact_kl(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p.iter().zip(log_q).map(|(a, b)| a.exp() * (a - b)).sum()
}

fn sample_log_probs(log_probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (a, l) in log_probs.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return a;
        }
    }
    log_probs.len() - 1
}

/// Samples one episode from `policy`.
pub fn sample_episode(policy: &ProbePolicy, scene: &Scene, crop_enabled: bool, rng: &mut impl Rng) -> ProbeEpisode {
    let (crop, window) = if crop_enabled {
        let obs = policy.crop_obs(scene);
        let a = sample_log_probs(&head_log_probs(policy.crop_theta(), &obs), rng);
        (Some(Step { obs, action: a }), policy.window_of(a))
    } else {
        (None, None)
    };
    let obs = ProbePolicy::score_obs(scene, window.as_ref());
    let a = sample_log_probs(&policy.score_log_probs(&obs), rng);
    ProbeEpisode {
        crop,
        window,
        score: Step { obs, action: a },
    }
}

/// K episodes sampled from `policy`, which also serves as the old snapshot.
/// Rewards are left at zero for the caller to fill.
pub fn rollout_group(
    policy: &ProbePolicy,
    reference: &ProbePolicy,
    scene: &Scene,
    k: usize,
    seed: u64,
    crop_enabled: bool,
) -> Result<Vec<Rollout<ProbeEpisode>>> {
    if k < 2 {
        return Err(Error::arg(format!("group size must be >= 2, got {k}")));
    }
    Ok((0..k)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("rollout/{i}")));
            let episode = sample_episode(policy, scene, crop_enabled, &mut rng);
            let lp = policy.episode_log_prob(&episode);
            Rollout {
                logprob_new: lp,
                logprob_old: lp,
                logprob_ref: reference.episode_log_prob(&episode),
                reward: 0.0,
                episode,
            }
        })
        .collect())
}

/// Optimizer and objective settings shared by the stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub k: usize,
    pub epsilon: f64,
    pub beta_kl: f64,
    pub gamma: f64,
    pub tau: f64,
    /// Gradient steps per batch of rollouts.
    pub epochs: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub lr_stage3: f64,
    pub stage3_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: crate::grpo::DEFAULT_GROUP_SIZE,
            epsilon: crate::grpo::DEFAULT_EPSILON,
            beta_kl: crate::grpo::DEFAULT_BETA_KL,
            gamma: crate::rank::DEFAULT_GAMMA,
            tau: crate::rewards::DEFAULT_TAU,
            epochs: 2,
            lr_stage1: 0.05,
            lr_stage2: 0.02,
            lr_stage3: 0.01,
            stage3_batch: 16,
        }
    }
}

fn grpo_step(
    policy: &mut ProbePolicy,
    groups: &[Vec<Rollout<ProbeEpisode>>],
    cfg: &TrainConfig,
    adam: &mut Adam,
) -> Result<()> {
    let objectives = groups
        .iter()
        .map(|g| GrpoObjective::<ProbePolicy>::new(g, cfg.epsilon, cfg.beta_kl))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / groups.len() as f64;
    for _ in 0..cfg.epochs {
        let mut grad = vec![0.0; policy.params.len()];
        for obj in &objectives {
            obj.accumulate(policy, scale, &mut grad);
        }
        adam.ascend(&mut policy.params, &grad);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Point {
    pub iter: usize,
    pub rank_reward: f64,
    /// Mean over groups of the sample standard deviation of the K scores.
    pub score_std: f64,
}

/// Pairwise GRPO on score-only episodes with Thurstone ranking rewards.
/// The KL reference is the policy as passed in.
pub fn stage1_train(
    policy: &ProbePolicy,
    scenes: &[Scene],
    pairs: usize,
    iters: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ProbePolicy, Vec<Stage1Point>)> {
    let distinct = scenes
        .iter()
        .any(|s| scenes.iter().any(|t| preference_label(s.mos, t.mos) != 0.5));
    if scenes.len() < 2 || !distinct {
        return Err(Error::arg("stage 1 needs at least two scenes with distinct MOS"));
    }
    if pairs == 0 {
        return Err(Error::arg("stage 1 needs pairs >= 1"));
    }
    let reference = policy.clone();
    let mut policy = policy.clone();
    let mut adam = Adam::new(policy.params.len(), cfg.lr_stage1);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "stage1"));
    let mut curve = Vec::with_capacity(iters);
    for iter in 0..iters {
        let mut groups = Vec::with_capacity(2 * pairs);
        let (mut reward_sum, mut reward_n, mut std_sum) = (0.0, 0usize, 0.0);
        for p in 0..pairs {
            let i = rng.gen_range(0..scenes.len());
            let mut j = rng.gen_range(0..scenes.len() - 1);
            if j >= i {
                j += 1;
            }
            let base = derive_seed(seed, &format!("stage1/{iter}/{p}"));
            let mut gi = rollout_group(&policy, &reference, &scenes[i], cfg.k, base, false)?;
            let mut gj = rollout_group(&policy, &reference, &scenes[j], cfg.k, base ^ 0x9e37_79b9_7f4a_7c15, false)?;
            let si = ScoreGroup::new(gi.iter().map(|r| r.episode.score_value()).collect())?;
            let sj = ScoreGroup::new(gj.iter().map(|r| r.episode.score_value()).collect())?;
            let y = preference_label(scenes[i].mos, scenes[j].mos);
            let ri = pair_rewards(&si, &sj, y, cfg.gamma)?;
            let rj = pair_rewards(&sj, &si, 1.0 - y, cfg.gamma)?;
            for (r, v) in gi.iter_mut().zip(&ri).chain(gj.iter_mut().zip(&rj)) {
                r.reward = *v;
                reward_sum += v;
                reward_n += 1;
            }
            std_sum += si.stats().variance.sqrt() + sj.stats().variance.sqrt();
            groups.push(gi);
            groups.push(gj);
        }
        curve.push(Stage1Point {
            iter,
            rank_reward: reward_sum / reward_n as f64,
            score_std: std_sum / (2 * pairs) as f64,
        });
        grpo_step(&mut policy, &groups, cfg, &mut adam)?;
    }
    Ok((policy, curve))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimCorpus {
    pub strategy: CropStrategy,
    pub episodes: Vec<ProbeEpisode>,
}

/// How teacher crops are framed, in cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub strategy: CropStrategy,
    /// Side of partial and pristine crops, and the floor for all-plus-context.
    pub crop_cells: u32,
    pub context_margin: f64,
    pub max_window: usize,
}

fn center_cell(r: &Region, grid: usize) -> usize {
    let cx = r.x as usize + (r.w as usize - 1) / 2;
    let cy = r.y as usize + (r.h as usize - 1) / 2;
    cy * grid + cx
}

/// Window seeing some but not all defects with at least a quarter clean
/// cells; a window with one defect and clean context when no such window exists.
fn partial_cells(defects: &[DefectRecord], crop: u32, image: (u32, u32), seed: u64) -> Result<Region> {
    let mut strict = Vec::new();
    let mut loose = Vec::new();
    for y in 0..=image.1 - crop {
        for x in 0..=image.0 - crop {
            let r = Region { x, y, w: crop, h: crop };
            let (cov, ctx) = coverage(&r, defects);
            if cov > 0.0 && ctx >= MIN_PARTIAL_CONTEXT {
                if cov < 1.0 {
                    strict.push(r);
                } else {
                    loose.push(r);
                }
            }
        }
    }
    let pool = if strict.is_empty() { loose } else { strict };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.choose(&mut rng)
        .copied()
        .map_or_else(|| crop_degradation_only(defects, crop, image), Ok)
}

/// Teacher trajectories. Low-res scenes are judged without cropping. High-res
/// defective scenes crop where `strategy` says, degradation-only framing just
/// the most important defect cell; high-res pristine scenes get a
/// clarity crop on their most textured cell, except under degradation-only,
/// whose corpus never crops clean content.
pub fn build_sim_corpus(
    lowres: &[Scene],
    hires: &[Scene],
    spec: &CorpusSpec,
    seed: u64,
) -> Result<SimCorpus> {
    let CorpusSpec {
        strategy,
        crop_cells,
        context_margin,
        max_window,
    } = *spec;
    let grid = lowres
        .first()
        .or(hires.first())
        .ok_or_else(|| Error::arg("corpus needs at least one scene"))?
        .grid;
    let mut regions: Vec<Option<Region>> = Vec::with_capacity(hires.len());
    for (n, s) in hires.iter().enumerate() {
        let image = (s.grid as u32, s.grid as u32);
        let crop = crop_cells.min(s.grid as u32);
        let defects = s.defects();
        let r = if defects.is_empty() {
            if strategy == CropStrategy::DegradationOnly {
                None
            } else {
                let best = (0..s.cells())
                    .max_by(|&a, &b| s.patches[a].texture.total_cmp(&s.patches[b].texture))
                    .expect("nonempty grid");
                let c = s.cell_region(best);
                let x = (c.x as i64 - (crop as i64 - 1) / 2).clamp(0, (s.grid as u32 - crop) as i64) as u32;
                let y = (c.y as i64 - (crop as i64 - 1) / 2).clamp(0, (s.grid as u32 - crop) as i64) as u32;
                Some(Region { x, y, w: crop, h: crop })
            }
        } else {
            Some(match strategy {
                CropStrategy::DegradationOnly => crop_degradation_only(&defects, 1, image)?,
                CropStrategy::Partial => partial_cells(&defects, crop, image, derive_seed(seed, &format!("partial/{n}")))?,
                CropStrategy::AllPlusContext => crop_all_plus_context(&defects, crop, context_margin, image)?,
            })
        };
        regions.push(r);
    }
    let crops: Vec<(&Scene, &Region)> = hires.iter().zip(&regions).filter_map(|(s, r)| r.as_ref().map(|r| (s, r))).collect();
    if strategy != CropStrategy::DegradationOnly && !crops.is_empty() {
        let clean = crops.iter().filter(|(s, _)| s.is_pristine()).count();
        if (clean as f64) < PRISTINE_CROP_QUOTA * crops.len() as f64 {
            return Err(Error::arg(format!(
                "only {clean} of {} crops are on pristine scenes",
                crops.len()
            )));
        }
    }
    let shape = ProbePolicy::new(grid, max_window, 0.0);
    let mut episodes = Vec::with_capacity(lowres.len() + hires.len());
    for s in lowres {
        episodes.push(ProbeEpisode {
            crop: Some(Step {
                obs: shape.crop_obs(s),
                action: shape.no_crop_action(),
            }),
            window: None,
            score: Step {
                obs: ProbePolicy::score_obs(s, None),
                action: nearest_bin(s.mos),
            },
        });
    }
    for (s, r) in hires.iter().zip(&regions) {
        let (action, w) = match r {
            Some(r) => {
                let a = shape.action_for(r);
                (a, shape.window_of(a))
            }
            None => (shape.no_crop_action(), None),
        };
        episodes.push(ProbeEpisode {
            crop: Some(Step {
                obs: shape.crop_obs(s),
                action,
            }),
            score: Step {
                obs: ProbePolicy::score_obs(s, w.as_ref()),
                action: nearest_bin(s.mos),
            },
            window: w,
        });
    }
    Ok(SimCorpus { strategy, episodes })
}

/// Behavior cloning on the corpus.
/// The curve holds the mean per-episode loss before each step.
pub fn stage2_clone(
    policy: &ProbePolicy,
    corpus: &SimCorpus,
    iters: usize,
    cfg: &TrainConfig,
) -> Result<(ProbePolicy, Vec<f64>)> {
    if corpus.episodes.is_empty() {
        return Err(Error::arg("stage 2 needs a nonempty corpus"));
    }
    let mut policy = policy.clone();
    let mut adam = Adam::new(policy.params.len(), cfg.lr_stage2);
    let n = corpus.episodes.len() as f64;
    let mut curve = Vec::with_capacity(iters);
    for _ in 0..iters {
        let mut grad = vec![0.0; policy.params.len()];
        let mut loss = 0.0;
        for ep in &corpus.episodes {
            // Ascend the mean log-likelihood.
            loss -= policy.episode_log_prob_grad(ep, 1.0 / n, &mut grad);
        }
        curve.push(loss / n);
        adam.ascend(&mut policy.params, &grad);
    }
    Ok((policy, curve))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage3Point {
    pub iter: usize,
    pub r_acc: f64,
    pub r_loc: f64,
    pub r_fmt: f64,
    pub r_total: f64,
    pub crop_rate: f64,
}

/// GRPO on probing episodes with the decoupled reward. Every sim episode is
/// structurally valid, so the format term is always 1.
pub fn stage3_train(
    policy: &ProbePolicy,
    scenes: &[Scene],
    iters: usize,
    weights: &RewardWeights,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ProbePolicy, Vec<Stage3Point>)> {
    weights.validate()?;
    if iters > 0 && scenes.is_empty() {
        return Err(Error::arg("stage 3 needs scenes"));
    }
    let reference = policy.clone();
    let mut policy = policy.clone();
    let mut adam = Adam::new(policy.params.len(), cfg.lr_stage3);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "stage3"));
    let mut curve = Vec::with_capacity(iters);
    for iter in 0..iters {
        let mut groups = Vec::with_capacity(cfg.stage3_batch);
        let mut sums = [0.0; 5];
        let mut count = 0.0;
        for b in 0..cfg.stage3_batch {
            let scene = &scenes[rng.gen_range(0..scenes.len())];
            let defects = scene.defects();
            let base = derive_seed(seed, &format!("stage3/{iter}/{b}"));
            let mut group = rollout_group(&policy, &reference, scene, cfg.k, base, true)?;
            for r in group.iter_mut() {
                let r_acc = acc_reward(r.episode.score_value(), scene.mos, cfg.tau)?;
                let r_loc = loc_reward(!defects.is_empty(), r.episode.window.as_ref(), &defects);
                let bd = combine(r_acc, r_loc, 1.0, weights);
                r.reward = bd.r_total;
                sums[0] += bd.r_acc;
                sums[1] += bd.r_loc;
                sums[2] += bd.r_fmt;
                sums[3] += bd.r_total;
                sums[4] += if r.episode.window.is_some() { 1.0 } else { 0.0 };
                count += 1.0;
            }
            groups.push(group);
        }
        curve.push(Stage3Point {
            iter,
            r_acc: sums[0] / count,
            r_loc: sums[1] / count,
            r_fmt: sums[2] / count,
            r_total: sums[3] / count,
            crop_rate: sums[4] / count,
        });
        grpo_step(&mut policy, &groups, cfg, &mut adam)?;
    }
    Ok((policy, curve))
}

/// Correlations of one held-out group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupEval {
    pub n: usize,
    pub srcc: f64,
    pub plcc: f64,
    pub mae: f64,
    /// Set when predictions were constant and the correlations undefined.
    pub degenerate: bool,
}

/// Held-out metrics; `srcc` and `plcc` average the nonempty groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyEval {
    pub srcc: f64,
    pub plcc: f64,
    pub lowres: Option<GroupEval>,
    pub hires: GroupEval,
    /// Mean crop-hit mass over defective high-res scenes.
    pub crop_hit: f64,
    pub crop_rate: f64,
}

/// Held-out scenes, split like a benchmark manifest by source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOut {
    pub lowres: Vec<Scene>,
    pub hires: Vec<Scene>,
}

fn group_eval(policy: &ProbePolicy, scenes: &[Scene]) -> Result<GroupEval> {
    if scenes.len() < 2 {
        return Err(Error::arg("an evaluation group needs at least two scenes"));
    }
    let preds: Vec<f64> = scenes.iter().map(|s| policy.predict(s)).collect();
    let gts: Vec<f64> = scenes.iter().map(|s| s.mos).collect();
    let (s, p) = (srcc(&preds, &gts), plcc(&preds, &gts));
    Ok(GroupEval {
        n: scenes.len(),
        degenerate: s.is_err() || p.is_err(),
        srcc: s.unwrap_or(0.0),
        plcc: p.unwrap_or(0.0),
        mae: preds.iter().zip(&gts).map(|(a, b)| (a - b).abs()).sum::<f64>() / preds.len() as f64,
    })
}

pub fn evaluate_policy(policy: &ProbePolicy, held_out: &HeldOut) -> Result<PolicyEval> {
    let hires = group_eval(policy, &held_out.hires)?;
    let lowres = if held_out.lowres.is_empty() {
        None
    } else {
        Some(group_eval(policy, &held_out.lowres)?)
    };
    let groups: Vec<&GroupEval> = lowres.iter().chain([&hires]).collect();
    let n = groups.len() as f64;
    let scenes = &held_out.hires;
    let defective: Vec<&Scene> = scenes.iter().filter(|s| !s.is_pristine()).collect();
    let crop_hit = if defective.is_empty() {
        0.0
    } else {
        defective.iter().map(|s| policy.crop_hit(s)).sum::<f64>() / defective.len() as f64
    };
    Ok(PolicyEval {
        srcc: groups.iter().map(|g| g.srcc).sum::<f64>() / n,
        plcc: groups.iter().map(|g| g.plcc).sum::<f64>() / n,
        lowres,
        hires,
        crop_hit,
        crop_rate: scenes.iter().map(|s| policy.crop_rate(s)).sum::<f64>() / scenes.len() as f64,
    })
}

/// Mean drop, in score bins, from declining to crop to cropping the most
/// textured cell of pristine scenes.
pub fn bias_gap(policy: &ProbePolicy, pristine: &[Scene]) -> Result<f64> {
    if pristine.is_empty() || pristine.iter().any(|s| !s.is_pristine()) {
        return Err(Error::arg("bias probes must be a nonempty set of pristine scenes"));
    }
    let mut total = 0.0;
    for s in pristine {
        let best = (0..s.cells())
            .max_by(|&a, &b| s.patches[a].texture.total_cmp(&s.patches[b].texture))
            .expect("nonempty grid");
        // Window sizes at that cell, weighted as the crop head would pick them.
        let lp = policy.crop_log_probs(s);
        let (mut mass, mut cropped) = (0.0, 0.0);
        for side in 1..=policy.max_window {
            let a = policy.crop_action(side, best);
            let p = lp[a].exp();
            mass += p;
            cropped += p * policy.expected_score(s, policy.window_of(a).as_ref());
        }
        total += (policy.expected_score(s, None) - cropped / mass) / BIN_WIDTH;
    }
    Ok(total / pristine.len() as f64)
}

/// Everything an ablation run needs, with defaults sized for a laptop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub scene: SceneSpec,
    pub train: TrainConfig,
    pub stage1_scenes: usize,
    pub stage1_iters: usize,
    pub stage1_pairs: usize,
    pub corpus_highres: usize,
    pub corpus_lowres: usize,
    pub stage2_iters: usize,
    pub stage3_scenes: usize,
    /// Low-res scenes added to the stage-3 pool.
    pub stage3_lowres: usize,
    pub stage3_iters: usize,
    pub eval_scenes: usize,
    pub probe_scenes: usize,
    pub crop_cells: u32,
    pub context_margin: f64,
    pub max_window: usize,
    pub no_crop_bias: f64,
    pub strategy: CropStrategy,
    pub weights: RewardWeights,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            train: TrainConfig::default(),
            stage1_scenes: 200,
            stage1_iters: 300,
            stage1_pairs: 8,
            corpus_highres: 30,
            corpus_lowres: 20,
            stage2_iters: 600,
            stage3_scenes: 200,
            stage3_lowres: 200,
            stage3_iters: 80,
            eval_scenes: 1000,
            probe_scenes: 50,
            crop_cells: 2,
            max_window: 4,
            context_margin: crate::probe::DEFAULT_CONTEXT_MARGIN,
            no_crop_bias: 0.0,
            strategy: CropStrategy::AllPlusContext,
            weights: RewardWeights::default(),
        }
    }
}

/// Scene pools derived from one seed.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub stage1: Vec<Scene>,
    pub corpus_lowres: Vec<Scene>,
    pub corpus_highres: Vec<Scene>,
    pub stage3: Vec<Scene>,
    pub eval: HeldOut,
    pub probes: Vec<Scene>,
}

fn pool(seed: u64, tag: &str, n: usize, spec: &SceneSpec) -> Result<Vec<Scene>> {
    (0..n)
        .map(|i| generate_scene(derive_seed(seed, &format!("{tag}/{i}")), spec))
        .collect()
}

pub fn datasets(seed: u64, cfg: &SimConfig) -> Result<Datasets> {
    let lowres = SceneSpec {
        hires: false,
        ..cfg.scene
    };
    let hires = SceneSpec {
        hires: true,
        ..cfg.scene
    };
    // Every third high-res corpus scene is pristine, meeting the crop quota.
    let corpus_highres = (0..cfg.corpus_highres)
        .map(|i| {
            let spec = SceneSpec {
                pristine_fraction: if i % 3 == 0 { 1.0 } else { 0.0 },
                ..hires
            };
            generate_scene(derive_seed(seed, &format!("corpus-hi/{i}")), &spec)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Datasets {
        stage1: pool(seed, "stage1-lo", cfg.stage1_scenes - cfg.stage1_scenes / 2, &lowres)?
            .into_iter()
            .chain(pool(seed, "stage1-hi", cfg.stage1_scenes / 2, &hires)?)
            .collect(),
        corpus_lowres: pool(seed, "corpus-lo", cfg.corpus_lowres, &lowres)?,
        corpus_highres,
        stage3: pool(seed, "stage3", cfg.stage3_scenes, &hires)?
            .into_iter()
            .chain(pool(seed, "stage3-lo", cfg.stage3_lowres, &lowres)?)
            .collect(),
        eval: HeldOut {
            lowres: pool(seed, "eval-lo", cfg.eval_scenes, &lowres)?,
            hires: pool(seed, "eval-hi", cfg.eval_scenes, &hires)?,
        },
        probes: pool(
            seed,
            "probe",
            cfg.probe_scenes,
            &SceneSpec {
                pristine_fraction: 1.0,
                ..hires
            },
        )?,
    })
}

/// Curves and metrics of one curriculum run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumRun {
    pub stages: Vec<u8>,
    pub policy: ProbePolicy,
    pub stage1: Vec<Stage1Point>,
    pub stage2: Vec<f64>,
    pub stage3: Vec<Stage3Point>,
    pub bias_gap_after_stage2: Option<f64>,
    pub eval: PolicyEval,
}

pub fn initial_policy(cfg: &SimConfig) -> ProbePolicy {
    ProbePolicy::new(cfg.scene.grid, cfg.max_window, cfg.no_crop_bias)
}

pub fn run_stage1(policy: &ProbePolicy, data: &Datasets, seed: u64, cfg: &SimConfig) -> Result<(ProbePolicy, Vec<Stage1Point>)> {
    stage1_train(policy, &data.stage1, cfg.stage1_pairs, cfg.stage1_iters, &cfg.train, derive_seed(seed, "s1"))
}

pub fn run_stage2(
    policy: &ProbePolicy,
    data: &Datasets,
    strategy: CropStrategy,
    seed: u64,
    cfg: &SimConfig,
) -> Result<(ProbePolicy, Vec<f64>)> {
    let corpus = build_sim_corpus(
        &data.corpus_lowres,
        &data.corpus_highres,
        &CorpusSpec {
            strategy,
            crop_cells: cfg.crop_cells,
            context_margin: cfg.context_margin,
            max_window: cfg.max_window,
        },
        derive_seed(seed, "corpus"),
    )?;
    stage2_clone(policy, &corpus, cfg.stage2_iters, &cfg.train)
}

pub fn run_stage3(
    policy: &ProbePolicy,
    data: &Datasets,
    weights: &RewardWeights,
    seed: u64,
    cfg: &SimConfig,
) -> Result<(ProbePolicy, Vec<Stage3Point>)> {
    stage3_train(policy, &data.stage3, cfg.stage3_iters, weights, &cfg.train, derive_seed(seed, "s3"))
}

/// Runs the requested subset of stages in order and evaluates on held-out scenes.
pub fn run_curriculum(
    stages: &[u8],
    strategy: CropStrategy,
    weights: &RewardWeights,
    seed: u64,
    cfg: &SimConfig,
) -> Result<CurriculumRun> {
    if let Some(s) = stages.iter().find(|s| !(1..=3).contains(*s)) {
        return Err(Error::arg(format!("unknown stage {s}")));
    }
    let data = datasets(seed, cfg)?;
    let mut policy = initial_policy(cfg);
    let mut run = CurriculumRun {
        stages: stages.to_vec(),
        policy: policy.clone(),
        stage1: vec![],
        stage2: vec![],
        stage3: vec![],
        bias_gap_after_stage2: None,
        eval: evaluate_policy(&policy, &data.eval)?,
    };
    if stages.contains(&1) {
        (policy, run.stage1) = run_stage1(&policy, &data, seed, cfg)?;
    }
    if stages.contains(&2) {
        (policy, run.stage2) = run_stage2(&policy, &data, strategy, seed, cfg)?;
        run.bias_gap_after_stage2 = Some(bias_gap(&policy, &data.probes)?);
    }
    if stages.contains(&3) {
        (policy, run.stage3) = run_stage3(&policy, &data, weights, seed, cfg)?;
    }
    run.eval = evaluate_policy(&policy, &data.eval)?;
    run.policy = policy;
    Ok(run)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    Stages,
    Rewards,
    CropStrategy,
}

impl std::str::FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stages" => Ok(AblationKind::Stages),
            "rewards" => Ok(AblationKind::Rewards),
            "crop_strategy" => Ok(AblationKind::CropStrategy),
            other => Err(Error::arg(format!("unknown ablation kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub eval: PolicyEval,
    pub bias_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub kind: AblationKind,
    pub seed: u64,
    pub note: String,
    pub rows: Vec<AblationRow>,
    /// The full expected ordering, strict at every step.
    pub ordering_holds: bool,
    pub checks: BTreeMap<String, bool>,
    /// Mean group score std over the first and last third of stage 1, when run.
    pub stage1_std_thirds: Option<(f64, f64)>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn srcc(&self, name: &str) -> f64 {
        self.row(name).map_or(f64::NAN, |r| r.eval.srcc)
    }
}

pub const SYNTHETIC_NOTE: &str = "synthetic grid scenes stand in for the unpublished training sets; \
only orderings between configurations are meaningful";

fn thirds(curve: &[Stage1Point]) -> Option<(f64, f64)> {
    let t = curve.len() / 3;
    if t == 0 {
        return None;
    }
    let mean = |s: &[Stage1Point]| s.iter().map(|p| p.score_std).sum::<f64>() / s.len() as f64;
    Some((mean(&curve[..t]), mean(&curve[curve.len() - t..])))
}

fn strictly_increasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[0] < w[1])
}

fn row(name: &str, eval: PolicyEval, bias_gap: Option<f64>) -> AblationRow {
    AblationRow {
        name: name.into(),
        eval,
        bias_gap,
    }
}

/// Trains every configuration of `kind` on the same scenes and reports
/// whether the expected ordering of held-out SRCC appears.
pub fn run_ablation(kind: AblationKind, seed: u64, cfg: &SimConfig) -> Result<AblationReport> {
    let data = datasets(seed, cfg)?;
    let init = initial_policy(cfg);
    let (s1, curve1) = run_stage1(&init, &data, seed, cfg)?;
    let mut checks = BTreeMap::new();
    let rows;
    let ordering_holds;
    match kind {
        AblationKind::Stages => {
            let (s12, _) = run_stage2(&s1, &data, cfg.strategy, seed, cfg)?;
            let (s123, _) = run_stage3(&s12, &data, &cfg.weights, seed, cfg)?;
            let (s2, _) = run_stage2(&init, &data, cfg.strategy, seed, cfg)?;
            let (s23, _) = run_stage3(&s2, &data, &cfg.weights, seed, cfg)?;
            rows = vec![
                row("stage1", evaluate_policy(&s1, &data.eval)?, None),
                row("stage2+3", evaluate_policy(&s23, &data.eval)?, None),
                row("stage1+2", evaluate_policy(&s12, &data.eval)?, None),
                row("stage1+2+3", evaluate_policy(&s123, &data.eval)?, None),
            ];
            let v: Vec<f64> = rows.iter().map(|r| r.eval.srcc).collect();
            ordering_holds = strictly_increasing(&v);
            checks.insert("full_curriculum_best".into(), v[3] > v[0] && v[3] > v[1] && v[3] > v[2]);
        }
        AblationKind::Rewards => {
            let (s12, _) = run_stage2(&s1, &data, cfg.strategy, seed, cfg)?;
            let acc = RewardWeights::score_only();
            let acc_fmt = RewardWeights {
                gamma_fmt: cfg.weights.gamma_fmt,
                ..acc
            };
            let (pa, _) = run_stage3(&s12, &data, &acc, seed, cfg)?;
            let (pf, _) = run_stage3(&s12, &data, &acc_fmt, seed, cfg)?;
            let (pl, _) = run_stage3(&s12, &data, &cfg.weights, seed, cfg)?;
            rows = vec![
                row("stage2_baseline", evaluate_policy(&s12, &data.eval)?, None),
                row("acc", evaluate_policy(&pa, &data.eval)?, None),
                row("acc+fmt", evaluate_policy(&pf, &data.eval)?, None),
                row("acc+fmt+loc", evaluate_policy(&pl, &data.eval)?, None),
            ];
            let (base, a, f, l) = (&rows[0].eval, &rows[1].eval, &rows[2].eval, &rows[3].eval);
            ordering_holds = a.srcc < f.srcc && f.srcc < l.srcc;
            checks.insert("loc_raises_srcc".into(), l.srcc > a.srcc);
            checks.insert("loc_raises_crop_hit".into(), l.crop_hit > a.crop_hit);
            checks.insert("loc_raises_crop_hit_over_stage2".into(), l.crop_hit > base.crop_hit);
            checks.insert("fmt_matches_acc".into(), f.srcc == a.srcc);
        }
        AblationKind::CropStrategy => {
            let mut out = Vec::new();
            for strategy in CropStrategy::ALL {
                let (p2, _) = run_stage2(&s1, &data, strategy, seed, cfg)?;
                let gap = bias_gap(&p2, &data.probes)?;
                let (p3, _) = run_stage3(&p2, &data, &cfg.weights, seed, cfg)?;
                out.push(row(strategy.as_str(), evaluate_policy(&p3, &data.eval)?, Some(gap)));
            }
            rows = out;
            let v: Vec<f64> = rows.iter().map(|r| r.eval.srcc).collect();
            ordering_holds = strictly_increasing(&v);
            checks.insert("degradation_only_below_all_plus_context".into(), v[0] < v[2]);
            let gaps: Vec<f64> = rows.iter().map(|r| r.bias_gap.unwrap_or(0.0)).collect();
            checks.insert("bias_gap_difference_at_least_0.3".into(), gaps[0] - gaps[2] >= 0.3);
        }
    }
    let std_thirds = thirds(&curve1);
    checks.insert(
        "stage1_std_contracts".into(),
        std_thirds.is_some_and(|(a, b)| b < a),
    );
    Ok(AblationReport {
        kind,
        seed,
        note: SYNTHETIC_NOTE.into(),
        rows,
        ordering_holds,
        checks,
        stage1_std_thirds: std_thirds,
    })
}

/// Score-group std curve of stage 1 as CSV.
pub fn stage1_csv(curve: &[Stage1Point]) -> String {
    let mut out = String::from("iteration,rank_reward,score_std\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.iter, p.rank_reward, p.score_std));
    }
    out
}

pub fn stage2_csv(curve: &[f64]) -> String {
    let mut out = String::from("iteration,bc_loss\n");
    for (i, l) in curve.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}

pub fn stage3_csv(curve: &[Stage3Point]) -> String {
    let mut out = String::from("iteration,r_acc,r_loc,r_fmt,r_total,crop_rate\n");
    for p in curve {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.iter, p.r_acc, p.r_loc, p.r_fmt, p.r_total, p.crop_rate
        ));
    }
    out
}

pub fn ablation_csv(reports: &[AblationReport]) -> String {
    let mut out = String::from("seed,config,srcc,plcc,srcc_lowres,srcc_hires,crop_hit,crop_rate,bias_gap\n");
    for r in reports {
        for row in &r.rows {
            let e = &row.eval;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.seed,
                row.name,
                e.srcc,
                e.plcc,
                e.lowres.map(|g| g.srcc.to_string()).unwrap_or_default(),
                e.hires.srcc,
                e.crop_hit,
                e.crop_rate,
                row.bias_gap.map(|g| g.to_string()).unwrap_or_default()
            ));
        }
    }
    out
}

/// Standard deviation of a score group (sample, K-1 denominator).
pub fn group_std(scores: &[f64]) -> Result<f64> {
    Ok(group_stats(scores)?.variance.sqrt())
}
