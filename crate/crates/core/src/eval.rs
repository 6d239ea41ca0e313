//! SRCC / PLCC and per-source evaluation reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BenchmarkItem;

fn check_pair(preds: &[f64], gts: &[f64]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::arg(format!(
            "length mismatch: {} predictions vs {} targets",
            preds.len(),
            gts.len()
        )));
    }
    if preds.len() < 2 {
        return Err(Error::arg("correlation needs at least 2 points"));
    }
    Ok(())
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::arg("degenerate input: constant vector"));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = avg;
        }
        start = end;
    }
    ranks
}

pub fn srcc(preds: &[f64], gts: &[f64]) -> Result<f64> {
    check_pair(preds, gts)?;
    pearson(&average_ranks(preds), &average_ranks(gts))
}

pub fn plcc(preds: &[f64], gts: &[f64]) -> Result<f64> {
    check_pair(preds, gts)?;
    pearson(preds, gts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub group: String,
    pub n: usize,
    pub srcc: Option<f64>,
    pub plcc: Option<f64>,
    pub mae: f64,
    /// Set when a correlation was undefined for this group.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub average: ReportRow,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Groups predictions by `source_tag` and averages the rows without weighting.
pub fn evaluate(predictions: &[Prediction], manifest: &[BenchmarkItem]) -> Result<Report> {
    let by_id: HashMap<&str, &BenchmarkItem> = manifest.iter().map(|i| (i.id.as_str(), i)).collect();
    let missing: Vec<String> = predictions
        .iter()
        .filter(|p| !by_id.contains_key(p.id.as_str()))
        .map(|p| p.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingIds(missing));
    }
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for p in predictions {
        let item = by_id[p.id.as_str()];
        let g = groups.entry(item.source_tag.as_str()).or_default();
        g.0.push(p.score);
        g.1.push(item.mos);
    }
    let rows: Vec<ReportRow> = groups
        .into_iter()
        .map(|(tag, (ps, gs))| {
            let s = srcc(&ps, &gs).ok();
            let p = plcc(&ps, &gs).ok();
            let mae = ps.iter().zip(&gs).map(|(a, b)| (a - b).abs()).sum::<f64>() / ps.len() as f64;
            ReportRow {
                group: tag.to_string(),
                n: ps.len(),
                srcc: s,
                plcc: p,
                mae,
                degenerate: s.is_none() || p.is_none(),
            }
        })
        .collect();
    let average = ReportRow {
        group: "average".into(),
        n: rows.iter().map(|r| r.n).sum(),
        srcc: mean(rows.iter().filter_map(|r| r.srcc)),
        plcc: mean(rows.iter().filter_map(|r| r.plcc)),
        mae: mean(rows.iter().map(|r| r.mae)).unwrap_or(0.0),
        degenerate: rows.iter().any(|r| r.degenerate),
    };
    Ok(Report { rows, average })
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        let width = self
            .rows
            .iter()
            .map(|r| r.group.len())
            .chain([5, "average".len()])
            .max()
            .unwrap_or(7);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>6}  {:>7}  {:>7}  {:>7}", "group", "n", "srcc", "plcc", "mae");
        for r in self.rows.iter().chain(std::iter::once(&self.average)) {
            let _ = writeln!(
                out,
                "{:<width$}  {:>6}  {:>7}  {:>7}  {:>7.4}{}",
                r.group,
                r.n,
                fmt(r.srcc),
                fmt(r.plcc),
                r.mae,
                if r.degenerate { "  (degenerate)" } else { "" }
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["group", "n", "srcc", "plcc", "mae", "degenerate"]).expect("in-memory");
        for r in self.rows.iter().chain(std::iter::once(&self.average)) {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            w.write_record([
                r.group.clone(),
                r.n.to_string(),
                opt(r.srcc),
                opt(r.plcc),
                r.mae.to_string(),
                r.degenerate.to_string(),
            ])
            .expect("in-memory");
        }
        String::from_utf8(w.into_inner().expect("in-memory")).expect("utf8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn srcc_examples() {
        let g = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(srcc(&[0.1, 0.2, 0.5, 0.9, 7.0], &g).unwrap(), 1.0);
        assert_eq!(srcc(&[5.0, 4.0, 3.0, 2.0, 1.0], &g).unwrap(), -1.0);
        assert!((srcc(&[1.0, 2.0, 3.0, 5.0, 4.0], &g).unwrap() - 0.9).abs() < 1e-12);
        assert!(srcc(&[1.0, 2.0], &g).is_err());
        assert!(srcc(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).is_err());
    }

    #[test]
    fn plcc_examples() {
        let g = [1.0, 2.0, 3.0, 4.0];
        let p: Vec<f64> = g.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!((plcc(&p, &g).unwrap() - 1.0).abs() < 1e-15);
        let n: Vec<f64> = g.iter().map(|x| -x).collect();
        assert!((plcc(&n, &g).unwrap() + 1.0).abs() < 1e-15);
        // Covariance formula: cov 0.75, var_p 0.5, var_g 1.25 (population).
        let expect = 0.75 / (0.5f64 * 1.25).sqrt();
        assert!((plcc(&[1.0, 2.0, 2.0, 3.0], &g).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    fn item(id: &str, tag: &str, mos: f64) -> BenchmarkItem {
        BenchmarkItem {
            id: id.into(),
            image_path: format!("{id}.png"),
            width: 8,
            height: 8,
            mos,
            seed: 0,
            source_tag: tag.into(),
            defects: vec![],
        }
    }

    #[test]
    fn evaluate_examples() {
        let m = vec![
            item("a", "x", 1.0),
            item("b", "x", 2.0),
            item("c", "x", 3.0),
            item("d", "y", 4.0),
            item("e", "y", 2.5),
        ];
        let perfect: Vec<Prediction> = m.iter().map(|i| Prediction { id: i.id.clone(), score: i.mos }).collect();
        let r = evaluate(&perfect, &m).unwrap();
        assert_eq!(r.rows.len(), 2);
        for row in &r.rows {
            assert_eq!(row.srcc, Some(1.0));
            assert!((row.plcc.unwrap() - 1.0).abs() < 1e-12);
            assert_eq!(row.mae, 0.0);
        }
        assert_eq!(r.average.n, 5);

        let constant: Vec<Prediction> = m.iter().map(|i| Prediction { id: i.id.clone(), score: 3.0 }).collect();
        let r = evaluate(&constant, &m).unwrap();
        assert!(r.rows.iter().all(|row| row.degenerate && row.srcc.is_none()));
        assert!(r.to_table().contains("degenerate"));

        let bad = vec![Prediction { id: "zz".into(), score: 1.0 }];
        match evaluate(&bad, &m) {
            Err(Error::MissingIds(ids)) => assert_eq!(ids, vec!["zz".to_string()]),
            other => panic!("{other:?}"),
        }
    }
}
