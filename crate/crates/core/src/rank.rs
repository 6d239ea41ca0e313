//! Pairwise ranking reward over GRPO score groups (Thurstone case V).
//!
//! For images `i` and `j`, each of the K scores of `i` is standardized against
//! the mean of `j`'s group and the pooled group variances, passed through the
//! Gaussian CDF, and scored against the MOS preference label.

use crate::error::{Error, Result};

/// Stability constant added to the pooled variance.
pub const DEFAULT_GAMMA: f64 = 1e-3;

/// MOS values closer than this count as a tie.
pub const TIE_EPS: f64 = 1e-9;

/// The K scores one policy emitted for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGroup {
    scores: Vec<f64>,
}

impl ScoreGroup {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.len() < 2 {
            return Err(Error::arg(format!(
                "score group needs K >= 2, got {}",
                scores.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::arg("score group contains a non-finite score"));
        }
        Ok(Self { scores })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn stats(&self) -> GroupStats {
        group_stats(&self.scores).expect("constructor enforces K >= 2")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupStats {
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
}

pub fn group_stats(scores: &[f64]) -> Result<GroupStats> {
    if scores.len() < 2 {
        return Err(Error::arg(format!("need K >= 2 scores, got {}", scores.len())));
    }
    let k = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / k;
    let variance = scores.iter().map(|q| (q - mean) * (q - mean)).sum::<f64>() / (k - 1.0);
    Ok(GroupStats { mean, variance })
}

/// Standardized difference of one score of `i` against group `j`.
pub fn z_score(q_ki: f64, stats_i: GroupStats, stats_j: GroupStats, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::arg(format!("gamma must be > 0, got {gamma}")));
    }
    Ok((q_ki - stats_j.mean) / (stats_i.variance + stats_j.variance + gamma).sqrt())
}

/// Standard normal CDF.
pub fn comp_prob(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Whether `y` is one of the admissible preference labels {0, 0.5, 1}.
pub fn is_label(y: f64) -> bool {
    y == 0.0 || y == 0.5 || y == 1.0
}

/// Fidelity reward `y p + (1 - y)(1 - p)`.
pub fn rank_reward(p: f64, y: f64) -> Result<f64> {
    if !is_label(y) {
        return Err(Error::arg(format!("preference label {y} not in {{0, 0.5, 1}}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::arg(format!("probability {p} outside [0,1]")));
    }
    Ok(y * p + (1.0 - y) * (1.0 - p))
}

/// 1 if `i` has the higher MOS, 0.5 on a tie, 0 otherwise.
pub fn preference_label(mos_i: f64, mos_j: f64) -> f64 {
    if (mos_i - mos_j).abs() <= TIE_EPS {
        0.5
    } else if mos_i > mos_j {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreferencePair {
    pub mos_i: f64,
    pub mos_j: f64,
    pub y: f64,
}

impl PreferencePair {
    pub fn from_mos(mos_i: f64, mos_j: f64) -> Self {
        Self {
            mos_i,
            mos_j,
            y: preference_label(mos_i, mos_j),
        }
    }
}

/// Per-sample ranking rewards for the scores of `group_i` against `group_j`.
pub fn pair_rewards(group_i: &ScoreGroup, group_j: &ScoreGroup, y: f64, gamma: f64) -> Result<Vec<f64>> {
    if group_i.len() != group_j.len() {
        return Err(Error::arg(format!(
            "group sizes differ: {} vs {}",
            group_i.len(),
            group_j.len()
        )));
    }
    if !is_label(y) {
        return Err(Error::arg(format!("preference label {y} not in {{0, 0.5, 1}}")));
    }
    let (si, sj) = (group_i.stats(), group_j.stats());
    group_i
        .scores()
        .iter()
        .map(|&q| rank_reward(comp_prob(z_score(q, si, sj, gamma)?), y))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(v: &[f64]) -> ScoreGroup {
        ScoreGroup::new(v.to_vec()).unwrap()
    }

    #[test]
    fn stats_examples() {
        assert_eq!(group_stats(&[2.0, 2.0, 2.0]).unwrap(), GroupStats { mean: 2.0, variance: 0.0 });
        assert_eq!(group_stats(&[1.0, 3.0]).unwrap(), GroupStats { mean: 2.0, variance: 2.0 });
        let s = group_stats(&[4.1, 3.9, 4.0, 4.0, 4.2, 3.8]).unwrap();
        // Direct summation: deviations .1,-.1,0,0,.2,-.2 -> squares sum .1, over 5.
        assert!((s.mean - 4.0).abs() < 1e-12);
        assert!((s.variance - 0.02).abs() < 1e-12);
        assert!(group_stats(&[1.0]).is_err());
        assert!(ScoreGroup::new(vec![1.0]).is_err());
        assert!(ScoreGroup::new(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn z_examples() {
        let st = |m, v| GroupStats { mean: m, variance: v };
        assert_eq!(z_score(3.0, st(9.0, 4.0), st(3.0, 1.0), 0.1).unwrap(), 0.0);
        assert_eq!(z_score(5.0, st(0.0, 0.0), st(3.0, 0.0), 1.0).unwrap(), 2.0);
        let z = z_score(4.0, st(0.0, 1.5), st(3.0, 2.4), 0.1).unwrap();
        assert!((z - 0.5).abs() < 1e-12);
        assert!(z_score(4.0, st(0.0, 1.0), st(3.0, 1.0), 0.0).is_err());
        assert!(z_score(4.0, st(0.0, 1.0), st(3.0, 1.0), -1.0).is_err());
    }

    #[test]
    fn cdf_values() {
        assert_eq!(comp_prob(0.0), 0.5);
        // mpmath, 30 digits: ncdf(1.96) = 0.975002104851779...
        assert!((comp_prob(1.96) - 0.975_002_104_851_779_5).abs() < 1e-12);
        assert!((comp_prob(-1.0) - 0.158_655_253_931_457_05).abs() < 1e-12);
        for z in [-7.3, -2.2, -0.4, 0.9, 3.3, 8.0] {
            assert!((comp_prob(z) + comp_prob(-z) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn reward_and_labels() {
        assert_eq!(rank_reward(0.123, 0.5).unwrap(), 0.5);
        assert!((rank_reward(0.8, 1.0).unwrap() - 0.8).abs() < 1e-15);
        assert!((rank_reward(0.8, 0.0).unwrap() - 0.2).abs() < 1e-15);
        assert!(rank_reward(0.8, 0.3).is_err());
        assert_eq!(preference_label(4.2, 3.1), 1.0);
        assert_eq!(preference_label(3.0, 3.0), 0.5);
        assert_eq!(preference_label(2.0, 4.0), 0.0);
        assert_eq!(PreferencePair::from_mos(3.0, 3.0 + 1e-12).y, 0.5);
    }

    #[test]
    fn pair_examples() {
        let r = pair_rewards(&g(&[3.0, 3.0]), &g(&[3.0, 3.0]), 0.5, DEFAULT_GAMMA).unwrap();
        assert_eq!(r, vec![0.5, 0.5]);

        let mut prev = 0.5;
        for gap in [1.5, 2.5, 4.0, 8.0] {
            let r = pair_rewards(&g(&[3.0 + gap, 5.0 + gap]), &g(&[3.0, 5.0]), 1.0, DEFAULT_GAMMA).unwrap();
            assert!(r.iter().all(|v| *v > 0.5));
            assert!(r[0] > prev);
            prev = r[0];
        }
        assert!(prev > 0.99);

        // Scripted oracle for {4,5} vs {2,3}: means 4.5 / 2.5, variances 0.5 / 0.5.
        let r = pair_rewards(&g(&[4.0, 5.0]), &g(&[2.0, 3.0]), 1.0, 0.01).unwrap();
        let denom = (0.5f64 + 0.5 + 0.01).sqrt();
        // mpmath ncdf(1.5/sqrt(1.01)), ncdf(2.5/sqrt(1.01))
        let expected = [0.932_223_247_788_451_8, 0.993_569_458_430_693_8];
        assert!(((4.0 - 2.5) / denom - 1.492_555_785_314_983_7).abs() < 1e-12);
        for (a, b) in r.iter().zip(expected) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert!(pair_rewards(&g(&[1.0, 2.0]), &g(&[1.0, 2.0, 3.0]), 1.0, 0.01).is_err());
    }
}
