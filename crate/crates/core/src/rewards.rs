//! Decoupled reward terms: scoring accuracy, crop localization and trace format.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DefectRecord, Region};

pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta_loc: f64,
    pub gamma_fmt: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta_loc: 0.15,
            gamma_fmt: 0.1,
        }
    }
}

impl RewardWeights {
    /// Accuracy only.
    pub fn score_only() -> Self {
        Self {
            alpha: 1.0,
            beta_loc: 0.0,
            gamma_fmt: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("alpha", self.alpha),
            ("beta_loc", self.beta_loc),
            ("gamma_fmt", self.gamma_fmt),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::arg(format!("weight {name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_acc: f64,
    pub r_loc: f64,
    pub r_fmt: f64,
    pub r_total: f64,
}

pub fn acc_reward(s_pred: f64, s_mos: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::arg(format!("tau must be > 0, got {tau}")));
    }
    Ok((-(s_pred - s_mos).abs() / tau).exp())
}

pub fn iou(a: &Region, b: &Region) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// IoU against the tight box around every defect; 0 without a defect or a box.
pub fn loc_reward(has_defect: bool, b_pred: Option<&Region>, defects: &[DefectRecord]) -> f64 {
    if !has_defect {
        return 0.0;
    }
    match (b_pred, Region::union_box(defects.iter().map(|d| &d.region))) {
        (Some(p), Some(gt)) => iou(p, &gt),
        _ => 0.0,
    }
}

fn trace_grammar() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let num = r"[0-9]+";
        let crop = format!(
            r#"<crop\s+x\s*=\s*"?{num}"?\s+y\s*=\s*"?{num}"?\s+w\s*=\s*"?{num}"?\s+h\s*=\s*"?{num}"?\s*/>\s*<observe\s*/>"#
        );
        Regex::new(&format!(
            r"(?s)\A\s*<think>(.*?)</think>\s*(?:{crop}\s*)*<score>\s*([+-]?[0-9]*\.?[0-9]+(?:[eE][+-]?[0-9]+)?)\s*</score>\s*\z"
        ))
        .expect("trace grammar compiles")
    })
}

/// 1 when the trace is `<think>..</think>`, then any number of crop+observe
/// pairs, then one `<score>v</score>` with v in [1,5]; otherwise 0.
pub fn format_reward(trace_text: &str) -> f64 {
    let Some(caps) = trace_grammar().captures(trace_text) else {
        return 0.0;
    };
    if caps[1].contains("<think>") || caps[1].contains("</think>") {
        return 0.0;
    }
    match caps[2].parse::<f64>() {
        Ok(v) if (1.0..=5.0).contains(&v) => 1.0,
        _ => 0.0,
    }
}

/// Everything a single prediction contributes to the reward.
#[derive(Debug, Clone, Copy)]
pub struct RewardInputs<'a> {
    pub s_pred: f64,
    pub s_mos: f64,
    pub tau: f64,
    pub b_pred: Option<&'a Region>,
    pub defects: &'a [DefectRecord],
    pub r_fmt: f64,
}

pub fn total_reward(inputs: &RewardInputs<'_>, weights: &RewardWeights) -> Result<RewardBreakdown> {
    weights.validate()?;
    let r_acc = acc_reward(inputs.s_pred, inputs.s_mos, inputs.tau)?;
    let r_loc = loc_reward(!inputs.defects.is_empty(), inputs.b_pred, inputs.defects);
    Ok(combine(r_acc, r_loc, inputs.r_fmt, weights))
}

/// Weighted sum of already-computed components.
pub fn combine(r_acc: f64, r_loc: f64, r_fmt: f64, w: &RewardWeights) -> RewardBreakdown {
    RewardBreakdown {
        r_acc,
        r_loc,
        r_fmt,
        r_total: w.alpha * r_acc + w.beta_loc * r_loc + w.gamma_fmt * r_fmt,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DefectKind;

    fn defect(x: u32, y: u32, w: u32, h: u32) -> DefectRecord {
        DefectRecord {
            region: Region { x, y, w, h },
            kind: DefectKind::Noise,
            severity: 0.5,
            importance: 1.0,
        }
    }

    #[test]
    fn acc_examples() {
        assert_eq!(acc_reward(3.3, 3.3, 0.5).unwrap(), 1.0);
        // mpmath exp(-1), exp(-2)
        assert!((acc_reward(3.0, 3.5, 0.5).unwrap() - 0.367_879_441_171_442_33).abs() < 1e-15);
        assert!((acc_reward(3.0, 4.0, 0.5).unwrap() - 0.135_335_283_236_612_7).abs() < 1e-15);
        assert!(acc_reward(3.0, 4.0, 0.0).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = Region { x: 0, y: 0, w: 2, h: 2 };
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &Region { x: 5, y: 5, w: 2, h: 2 }), 0.0);
        assert!((iou(&a, &Region { x: 1, y: 0, w: 2, h: 2 }) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn loc_examples() {
        let ds = [defect(10, 10, 20, 20)];
        let p = Region { x: 10, y: 10, w: 40, h: 20 };
        assert_eq!(loc_reward(false, Some(&p), &ds), 0.0);
        assert_eq!(loc_reward(true, Some(&ds[0].region), &ds), 1.0);
        assert!((loc_reward(true, Some(&p), &ds) - 0.5).abs() < 1e-15);
        assert_eq!(loc_reward(true, None, &ds), 0.0);
        let two = [defect(0, 0, 10, 10), defect(30, 30, 10, 10)];
        let union = Region { x: 0, y: 0, w: 40, h: 40 };
        assert_eq!(loc_reward(true, Some(&union), &two), 1.0);
    }

    #[test]
    fn format_examples() {
        assert_eq!(format_reward("<think>ok</think><score>4.5</score>"), 1.0);
        assert_eq!(format_reward("<think>ok</think>"), 0.0);
        assert_eq!(format_reward("<think>ok</think><score>9.0</score>"), 0.0);
        assert_eq!(
            format_reward(
                "<think>look</think>\n<crop x=1 y=2 w=3 h=4/><observe/>\n<crop x=\"0\" y=\"0\" w=\"8\" h=\"8\" /> <observe />\n<score> 1 </score>\n"
            ),
            1.0
        );
        // crop without observe
        assert_eq!(format_reward("<think>a</think><crop x=1 y=2 w=3 h=4/><score>3</score>"), 0.0);
        // two think blocks
        assert_eq!(format_reward("<think>a</think><think>b</think><score>3</score>"), 0.0);
        assert_eq!(format_reward("<think>a<think>b</think><score>3</score>"), 0.0);
        // two scores
        assert_eq!(format_reward("<think>a</think><score>3</score><score>3</score>"), 0.0);
        // trailing junk
        assert_eq!(format_reward("<think>a</think><score>3</score>x"), 0.0);
        assert_eq!(format_reward("<think>a</think><score>abc</score>"), 0.0);
        assert_eq!(format_reward("<think></think><score>5.0</score>"), 1.0);
        assert_eq!(format_reward("<think>a</think><score>0.99</score>"), 0.0);
    }

    #[test]
    fn total_examples() {
        let w = RewardWeights::default();
        let b = combine(1.0, 1.0, 1.0, &w);
        assert!((b.r_total - 1.25).abs() < 1e-15);
        let b = combine(0.5, 0.4, 1.0, &w);
        assert!((b.r_total - 0.66).abs() < 1e-12);
        let w0 = RewardWeights {
            beta_loc: 0.0,
            gamma_fmt: 0.0,
            ..w
        };
        assert_eq!(combine(0.3, 0.9, 1.0, &w0).r_total, 0.3);

        let ds = [defect(10, 10, 20, 20)];
        let inputs = RewardInputs {
            s_pred: 4.0,
            s_mos: 4.0,
            tau: DEFAULT_TAU,
            b_pred: Some(&ds[0].region),
            defects: &ds,
            r_fmt: 1.0,
        };
        assert!((total_reward(&inputs, &w).unwrap().r_total - 1.25).abs() < 1e-15);
        let bad = RewardWeights { alpha: -1.0, ..w };
        assert!(total_reward(&inputs, &bad).is_err());
    }
}
