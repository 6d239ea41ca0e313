mod common;

use proptest::prelude::*;
use qprobe::eval::{average_ranks, plcc, srcc};
use qprobe::forge::{feathered_composite, forge_item, inject, synthesize_mos, ForgeConfig};
use qprobe::grpo::{clipped_surrogate, group_advantages, grpo_objective, kl_penalty, Policy, Rollout};
use qprobe::model::{parse_manifest, manifest_to_string, BenchmarkItem, DefectKind, DefectRecord, Raster, Region};
use qprobe::probe::{coverage, crop_all_plus_context, crop_degradation_only, generate_trajectory, CropStrategy, ProbeConfig, TrajectoryKind};
use qprobe::rank::{comp_prob, group_stats, pair_rewards, rank_reward, z_score, ScoreGroup};
use qprobe::rewards::{acc_reward, combine, iou, loc_reward, format_reward, RewardWeights};
use qprobe::sim::{bias_gap, generate_scene, sample_episode, ProbePolicy, SceneSpec};
use qprobe::wavelet::{dwt2, idwt2, select_texture_regions, texture_energy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn raster(w: usize, h: usize, c: usize, seed: u64) -> Raster {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Raster::from_fn(w, h, c, |_, _, _| rng.gen::<f64>()).unwrap()
}

fn rect() -> impl Strategy<Value = Region> {
    (0u32..40, 0u32..40, 1u32..24, 1u32..24).prop_map(|(x, y, w, h)| Region { x, y, w, h })
}

fn defect(region: Region, severity: f64, importance: f64) -> DefectRecord {
    DefectRecord { region, kind: DefectKind::Blur, severity, importance }
}

fn kind() -> impl Strategy<Value = DefectKind> {
    prop::sample::select(DefectKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wavelet_reconstructs_any_size(w in 1usize..40, h in 1usize..40, c in prop::sample::select(vec![1usize, 3]), levels in 1usize..4, seed: u64) {
        let r = raster(w, h, c, seed);
        if let Ok(p) = dwt2(&r, levels) {
            let back = idwt2(&p).unwrap();
            prop_assert_eq!((back.width(), back.height()), (w, h));
            for (a, b) in r.luma().iter().zip(back.data()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn wavelet_parseval_on_dyadic_sizes(wb in 1usize..6, hb in 1usize..6, levels in 1usize..4, seed: u64) {
        let (w, h) = (wb << levels, hb << levels);
        let r = raster(w, h, 1, seed);
        let p = dwt2(&r, levels).unwrap();
        let pixel: f64 = r.luma().iter().map(|v| v * v).sum();
        prop_assert!((p.energy() - pixel).abs() <= 1e-9 * pixel.max(1.0));
    }

    #[test]
    fn texture_energy_follows_whole_cell_shifts(cells in 2usize..5, shift in 1usize..3, seed: u64) {
        // A periodic raster shifted by whole cells permutes the energy map cyclically.
        let cell = 2usize;
        let side = cells * cell * 2;
        let base = raster(side, side, 1, seed);
        let px = shift * cell * 2;
        let moved = Raster::from_fn(side, side, 1, |x, y, _| base.get((x + px) % side, y, 0)).unwrap();
        let a = texture_energy(&dwt2(&base, 1).unwrap(), cell).unwrap();
        let b = texture_energy(&dwt2(&moved, 1).unwrap(), cell).unwrap();
        for row in 0..a.rows {
            for col in 0..a.cols {
                let src = (col + shift) % a.cols;
                prop_assert!((b.get(col, row) - a.get(src, row)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn selected_regions_are_separated_and_inside(w in 16usize..64, h in 16usize..64, k in 1usize..6, size in 4u32..16, sep in 0.0f64..20.0, seed: u64) {
        let r = raster(w, h, 1, seed);
        let map = texture_energy(&dwt2(&r, 1).unwrap(), 2).unwrap();
        let regions = select_texture_regions(&map, k, size, sep).unwrap();
        prop_assert!(regions.len() <= k);
        for (i, a) in regions.iter().enumerate() {
            prop_assert!(r.contains(a));
            for b in &regions[i + 1..] {
                let (ax, ay) = a.center();
                let (bx, by) = b.center();
                prop_assert!(((ax - bx).powi(2) + (ay - by).powi(2)).sqrt() >= sep - 1e-9);
            }
        }
    }

    #[test]
    fn injectors_leave_outside_pixels_untouched(kind in kind(), region in rect(), severity in 0.01f64..1.0, seed: u64) {
        let r = raster(64, 64, 3, seed);
        let out = inject(kind, &r, region, severity, seed).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let inside = (x as u64) >= region.x as u64 && (x as u64) < region.right() && (y as u64) >= region.y as u64 && (y as u64) < region.bottom();
                if !inside {
                    for c in 0..3 {
                        prop_assert_eq!(out.get(x, y, c).to_bits(), r.get(x, y, c).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn composite_is_local_to_feather_band(region in rect(), feather in 0u32..6, seed: u64) {
        let base = raster(64, 64, 1, seed);
        let degraded = raster(64, 64, 1, seed ^ 1);
        let out = feathered_composite(&base, &degraded, region, feather).unwrap();
        let f = feather as i64;
        for y in 0..64i64 {
            for x in 0..64i64 {
                let far = x < region.x as i64 - f || x >= region.right() as i64 + f || y < region.y as i64 - f || y >= region.bottom() as i64 + f;
                if far {
                    prop_assert_eq!(out.get(x as usize, y as usize, 0).to_bits(), base.get(x as usize, y as usize, 0).to_bits());
                }
            }
        }
    }

    #[test]
    fn mos_never_rises_with_severity_or_importance(
        items in prop::collection::vec((rect(), 0.01f64..1.0, 0.0f64..1.0), 1..5),
        pick in 0usize..5,
        bump in 0.0f64..1.0,
    ) {
        let defects: Vec<DefectRecord> = items.iter().map(|&(r, s, i)| defect(r, s, i)).collect();
        let i = pick % defects.len();
        let base = synthesize_mos(&defects, 4096.0);
        let mut sev = defects.clone();
        sev[i].severity = (sev[i].severity + bump).min(1.0);
        let mut imp = defects.clone();
        imp[i].importance = (imp[i].importance + bump).min(1.0);
        prop_assert!(synthesize_mos(&sev, 4096.0) <= base + 1e-12);
        prop_assert!(synthesize_mos(&imp, 4096.0) <= base + 1e-12);
        prop_assert!((1.0..=5.0).contains(&base));
    }

    #[test]
    fn manifest_round_trips(items in prop::collection::vec((rect(), kind(), 0.01f64..1.0, 0.0f64..1.0, 1.0f64..5.0), 0..4)) {
        let list: Vec<BenchmarkItem> = items
            .iter()
            .enumerate()
            .map(|(n, &(r, kind, s, i, mos))| BenchmarkItem {
                id: format!("i{n}"),
                image_path: format!("i{n}.png"),
                width: 64,
                height: 64,
                mos,
                seed: n as u64,
                source_tag: "t".into(),
                defects: vec![DefectRecord { region: r, kind, severity: s, importance: i }],
            })
            .collect();
        prop_assert_eq!(parse_manifest(&manifest_to_string(&list)).unwrap(), list);
    }

    #[test]
    fn rank_reward_is_order_symmetric(p in 0.0f64..=1.0, y in prop::sample::select(vec![0.0, 1.0])) {
        // Swapping the pair order flips both p and y and leaves the reward alone.
        prop_assert!((rank_reward(p, y).unwrap() - rank_reward(1.0 - p, 1.0 - y).unwrap()).abs() < 1e-12);
        let sum = rank_reward(p, y).unwrap() + rank_reward(p, 1.0 - y).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn comp_prob_is_increasing_and_symmetric(a in -8.0f64..8.0, d in 1e-3f64..4.0) {
        prop_assert!(comp_prob(a + d) > comp_prob(a));
        prop_assert!((comp_prob(a) + comp_prob(-a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pair_reward_rises_with_own_score(
        gi in prop::collection::vec(1.0f64..5.0, 2..6),
        gj in prop::collection::vec(1.0f64..5.0, 2..6),
        pick in 0usize..6,
        bump in 0.05f64..0.5,
    ) {
        // Group statistics held fixed, only q_k moves.
        let (si, sj) = (group_stats(&gi).unwrap(), group_stats(&gj).unwrap());
        let q = gi[pick % gi.len()];
        let r = |q: f64| rank_reward(comp_prob(z_score(q, si, sj, 1e-3).unwrap()), 1.0).unwrap();
        prop_assert!(r(q + bump) > r(q));
        let n = gi.len().min(gj.len());
        let half = pair_rewards(&ScoreGroup::new(gi[..n].to_vec()).unwrap(), &ScoreGroup::new(gj[..n].to_vec()).unwrap(), 0.5, 1e-3).unwrap();
        prop_assert!(half.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn z_score_ignores_common_shift(
        gi in prop::collection::vec(1.0f64..5.0, 2..6),
        gj in prop::collection::vec(1.0f64..5.0, 2..6),
        shift in -3.0f64..3.0,
    ) {
        let si = group_stats(&gi).unwrap();
        let sj = group_stats(&gj).unwrap();
        let mut sj_shift = sj;
        sj_shift.mean += shift;
        let z0 = z_score(gi[0], si, sj, 1e-3).unwrap();
        let z1 = z_score(gi[0] + shift, si, sj_shift, 1e-3).unwrap();
        prop_assert!((z0 - z1).abs() < 1e-9 * z0.abs().max(1.0));
    }

    #[test]
    fn advantages_are_standardized(rewards in prop::collection::vec(-5.0f64..5.0, 2..12)) {
        let a = group_advantages(&rewards).unwrap();
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        let spread = rewards.iter().cloned().fold(f64::MIN, f64::max) - rewards.iter().cloned().fold(f64::MAX, f64::min);
        if spread > 1e-3 {
            let std = (a.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
            prop_assert!((std - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn clipping_never_inflates_positive_advantage(lp_new in -6.0f64..0.0, lp_old in -6.0f64..0.0, adv in 0.0f64..5.0, eps in 0.01f64..0.5) {
        let s = clipped_surrogate(lp_new, lp_old, adv, eps).unwrap();
        prop_assert!(s <= (lp_new - lp_old).exp() * adv + 1e-12);
    }

    #[test]
    fn kl_is_nonnegative(a in -10.0f64..0.0, b in -10.0f64..0.0) {
        prop_assert!(kl_penalty(a, b) >= 0.0);
        prop_assert_eq!(kl_penalty(a, a), 0.0);
    }

    #[test]
    fn acc_reward_is_monotone(s in 1.0f64..5.0, mos in 1.0f64..5.0, d in 0.01f64..1.0, tau in 0.1f64..2.0) {
        let near = acc_reward(s, mos, tau).unwrap();
        let away = if s >= mos { s + d } else { s - d };
        prop_assert!(acc_reward(away, mos, tau).unwrap() < near);
        let err = (s - mos).abs();
        if err > 1e-9 {
            prop_assert!(acc_reward(s, mos, tau + d).unwrap() > near);
        }
    }

    #[test]
    fn iou_matches_pixel_sets(a in rect(), b in rect()) {
        let pixels = |r: &Region| {
            let mut s = std::collections::HashSet::new();
            for y in r.y..r.y + r.h {
                for x in r.x..r.x + r.w {
                    s.insert((x, y));
                }
            }
            s
        };
        let (pa, pb) = (pixels(&a), pixels(&b));
        let brute = pa.intersection(&pb).count() as f64 / pa.union(&pb).count() as f64;
        prop_assert!((iou(&a, &b) - brute).abs() < 1e-12);
        prop_assert_eq!(iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn no_defect_means_no_loc_reward(pred in rect()) {
        prop_assert_eq!(loc_reward(false, Some(&pred), &[]), 0.0);
        prop_assert_eq!(loc_reward(true, Some(&pred), &[]), 0.0);
    }

    #[test]
    fn total_reward_is_affine(acc in 0.0f64..1.0, loc in 0.0f64..1.0, fmt in 0.0f64..1.0, w in 0.0f64..2.0) {
        let base = RewardWeights { alpha: 1.0, beta_loc: w, gamma_fmt: 0.1 };
        let b = combine(acc, loc, fmt, &base);
        prop_assert!((b.r_total - (acc + w * loc + 0.1 * fmt)).abs() < 1e-12);
        let muted = RewardWeights { beta_loc: 0.0, ..base };
        prop_assert_eq!(combine(acc, loc, fmt, &muted).r_total, combine(acc, 0.0, fmt, &muted).r_total);
    }

    #[test]
    fn all_plus_context_covers_everything(regions in prop::collection::vec(rect(), 1..4), crop in 8u32..64, margin in 0.0f64..0.5) {
        let defects: Vec<DefectRecord> = regions.iter().map(|&r| defect(r, 0.5, 0.5)).collect();
        let image = (96, 96);
        let r = crop_all_plus_context(&defects, crop, margin, image).unwrap();
        prop_assert!(r.right() <= 96 && r.bottom() <= 96);
        let (cov, ctx) = coverage(&r, &defects);
        prop_assert_eq!(cov, 1.0);
        prop_assert!(ctx > 0.0);
        if defects.len() == 1 && regions[0].w < crop && regions[0].h < crop {
            let tight = crop_degradation_only(&defects, crop, image).unwrap();
            prop_assert!(coverage(&tight, &defects).1 < ctx || r == tight);
        }
    }

    #[test]
    fn traces_always_parse(mos in 1.0f64..5.0, region in rect(), seed: u64, strategy in prop::sample::select(vec![CropStrategy::DegradationOnly, CropStrategy::AllPlusContext])) {
        let item = BenchmarkItem {
            id: "x".into(),
            image_path: "x.png".into(),
            width: 96,
            height: 96,
            mos,
            seed,
            source_tag: "t".into(),
            defects: vec![defect(region, 0.5, 0.5)],
        };
        let cfg = ProbeConfig { crop: 32, context_margin: 0.3 };
        for kind in [TrajectoryKind::DistantView, TrajectoryKind::DegradationCapture] {
            let t = generate_trajectory(&item, strategy, kind, seed, &cfg, None).unwrap();
            prop_assert_eq!(format_reward(&t.trace_text), 1.0);
        }
    }

    #[test]
    fn srcc_ignores_monotone_maps(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..30), scale in 0.1f64..5.0, offset in -5.0f64..5.0) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        if let (Ok(s), Ok(p)) = (srcc(&a, &b), plcc(&a, &b)) {
            let cubed: Vec<f64> = a.iter().map(|v| v.powi(3) + 2.0 * v).collect();
            prop_assert!((srcc(&cubed, &b).unwrap() - s).abs() < 1e-12);
            let affine: Vec<f64> = a.iter().map(|v| scale * v + offset).collect();
            prop_assert!((plcc(&affine, &b).unwrap() - p).abs() < 1e-9);
            prop_assert!((srcc(&b, &a).unwrap() - s).abs() < 1e-12);
            prop_assert!((plcc(&b, &a).unwrap() - p).abs() < 1e-12);
        }
    }

    #[test]
    fn average_ranks_match_brute_force(v in prop::collection::vec(0u8..5, 1..12)) {
        let v: Vec<f64> = v.into_iter().map(f64::from).collect();
        let ranks = average_ranks(&v);
        for (i, x) in v.iter().enumerate() {
            let below = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            prop_assert_eq!(ranks[i], below + (equal + 1.0) / 2.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn forged_items_validate(seed: u64, pristine in prop::sample::select(vec![0.0, 1.0])) {
        let src = common::textured_source(seed, 128, 128);
        let cfg = ForgeConfig { seed, pristine_fraction: pristine, ..ForgeConfig::default() };
        let (img, item) = forge_item(&src, &cfg, "p").unwrap();
        item.validate().unwrap();
        prop_assert_eq!((img.width(), img.height()), (128, 128));
        if pristine == 1.0 {
            prop_assert_eq!(item.mos, 5.0);
            prop_assert!(item.defects.is_empty());
        } else {
            prop_assert!(item.mos < 5.0);
        }
    }

    #[test]
    fn episode_logprob_is_sum_of_steps(seed: u64, crop: bool) {
        let spec = SceneSpec::default();
        let scene = generate_scene(seed, &spec).unwrap();
        let mut policy = ProbePolicy::new(spec.grid, 3, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in policy.params.iter_mut() {
            *p = rand::Rng::gen_range(&mut rng, -0.5..0.5);
        }
        let e = sample_episode(&policy, &scene, crop, &mut rng);
        let score = policy.score_log_probs(&e.score.obs)[e.score.action];
        let crop_lp = e.crop.as_ref().map_or(0.0, |s| policy.crop_log_probs(&scene)[s.action]);
        prop_assert_eq!(policy.episode_log_prob(&e), score + crop_lp);
    }

    #[test]
    fn untrained_policy_has_no_bias_gap(seed: u64) {
        let spec = SceneSpec { pristine_fraction: 1.0, ..SceneSpec::default() };
        let scenes: Vec<_> = (0..5).map(|i| generate_scene(seed.wrapping_add(i), &spec).unwrap()).collect();
        let gap = bias_gap(&ProbePolicy::new(spec.grid, 3, 0.0), &scenes).unwrap();
        prop_assert!(gap.abs() < 1e-12);
    }
}

#[test]
fn grpo_objective_matches_oracle() {
    let cases = common::fixture("grpo_oracle.json");
    for case in cases.as_array().unwrap() {
        let rewards = common::f64s(&case["rewards"]);
        let group: Vec<Rollout<()>> = rewards
            .iter()
            .enumerate()
            .map(|(i, &reward)| Rollout {
                episode: (),
                logprob_new: common::f64s(&case["logp_new"])[i],
                logprob_old: common::f64s(&case["logp_old"])[i],
                logprob_ref: common::f64s(&case["logp_ref"])[i],
                reward,
            })
            .collect();
        let adv = group_advantages(&rewards).unwrap();
        for (a, b) in adv.iter().zip(common::f64s(&case["advantages"])) {
            assert!((a - b).abs() < 1e-9, "advantage {a} vs {b}");
        }
        let eps = case["epsilon"].as_f64().unwrap();
        let beta = case["beta_kl"].as_f64().unwrap();
        let got = grpo_objective(&group, eps, beta).unwrap();
        let want = case["objective"].as_f64().unwrap();
        assert!((got - want).abs() < 1e-9, "objective {got} vs {want}");
    }
}
