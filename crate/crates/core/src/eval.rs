//! Average recall at a fixed number of proposals per video (AR@AN) and the
//! area under the AR-vs-AN curve.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::exec::{self, Execution};
use crate::interval::{iou_unchecked, sort_by_score, Interval, ScoredInterval};
use crate::{Error, Result};

pub const MAX_AN: usize = 100;

pub type ProposalMap = BTreeMap<String, Vec<ScoredInterval>>;
pub type GroundTruthMap = BTreeMap<String, Vec<Interval>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetStyle {
    /// tIoU 0.50:0.05:0.95
    #[default]
    Anet,
    /// tIoU 0.50:0.05:1.00
    Thumos,
    /// tIoU 0.50:0.05:0.90
    AnetNarrow,
}

impl DatasetStyle {
    pub fn thresholds(self) -> Vec<f64> {
        let last = match self {
            DatasetStyle::Anet => 9,
            DatasetStyle::Thumos => 10,
            DatasetStyle::AnetNarrow => 8,
        };
        (0..=last).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
    }
}

/// Per-video proposals in evaluation order (score descending, then start, then end).
fn ranked(props: &ProposalMap, video: &str) -> Vec<ScoredInterval> {
    let mut p = props.get(video).cloned().unwrap_or_default();
    sort_by_score(&mut p);
    p
}

fn total_gts(gts: &GroundTruthMap) -> Result<usize> {
    let n: usize = gts.values().map(Vec::len).sum();
    if n == 0 {
        return Err(Error::Undefined("recall needs at least one ground truth".into()));
    }
    Ok(n)
}

/// Walks proposals in rank order; each one claims the unmatched ground truth
/// of highest IoU (lowest index on ties) if that IoU reaches `tiou`. Returns
/// the number of matches after each of the first `limit` proposals.
fn cumulative_matches(props: &[ScoredInterval], gts: &[Interval], tiou: f64, limit: usize) -> Vec<usize> {
    let mut used = vec![false; gts.len()];
    let mut count = 0;
    let mut out = Vec::with_capacity(limit);
    for k in 0..limit {
        if let Some(p) = props.get(k) {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] {
                    continue;
                }
                let v = iou_unchecked(&p.interval, gt);
                if v >= tiou && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                used[g] = true;
                count += 1;
            }
        }
        out.push(count);
    }
    out
}

/// Fraction of all ground truths recalled by the top `an` proposals of each video.
pub fn recall_at(props: &ProposalMap, gts: &GroundTruthMap, tiou: f64, an: usize) -> Result<f64> {
    let total = total_gts(gts)?;
    if an == 0 {
        return Ok(0.0);
    }
    let hit: usize = gts
        .iter()
        .map(|(v, g)| cumulative_matches(&ranked(props, v), g, tiou, an)[an - 1])
        .sum();
    Ok(hit as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCurve {
    pub an_values: Vec<usize>,
    pub tiou_thresholds: Vec<f64>,
    /// `[tiou][an]`
    pub recall: Vec<Vec<f64>>,
    pub average_recall: Vec<f64>,
    /// Percentage.
    pub auc: f64,
}

/// Recall over the full (tIoU, AN = 1..100) grid.
pub fn build_curve(
    props: &ProposalMap,
    gts: &GroundTruthMap,
    style: DatasetStyle,
    exec: Execution,
) -> Result<EvalCurve> {
    let total = total_gts(gts)? as f64;
    let thresholds = style.thresholds();
    let videos: Vec<(Vec<ScoredInterval>, &Vec<Interval>)> = gts.iter().map(|(v, g)| (ranked(props, v), g)).collect();
    let recall: Vec<Vec<f64>> = exec::map(exec, &thresholds, |&tiou| {
        let mut hits = vec![0usize; MAX_AN];
        for (p, g) in &videos {
            for (h, c) in hits.iter_mut().zip(cumulative_matches(p, g, tiou, MAX_AN)) {
                *h += c;
            }
        }
        hits.into_iter().map(|h| h as f64 / total).collect()
    });
    let average_recall: Vec<f64> = (0..MAX_AN)
        .map(|a| recall.iter().map(|r| r[a]).sum::<f64>() / thresholds.len() as f64)
        .collect();
    let auc = 100.0 * average_recall.iter().sum::<f64>() / MAX_AN as f64;
    Ok(EvalCurve {
        an_values: (1..=MAX_AN).collect(),
        tiou_thresholds: thresholds,
        recall,
        average_recall,
        auc,
    })
}

impl EvalCurve {
    pub fn ar_at(&self, an: usize) -> f64 {
        self.average_recall[an - 1]
    }

    /// `{auc, ar: {an: value}, recall: {tiou: {an: value}}}`
    pub fn to_json(&self) -> serde_json::Value {
        let ar: serde_json::Map<String, serde_json::Value> = self
            .an_values
            .iter()
            .zip(&self.average_recall)
            .map(|(a, v)| (a.to_string(), (*v).into()))
            .collect();
        let recall: serde_json::Map<String, serde_json::Value> = self
            .tiou_thresholds
            .iter()
            .zip(&self.recall)
            .map(|(t, row)| {
                let inner: serde_json::Map<String, serde_json::Value> = self
                    .an_values
                    .iter()
                    .zip(row)
                    .map(|(a, v)| (a.to_string(), (*v).into()))
                    .collect();
                (format!("{t:.2}"), inner.into())
            })
            .collect();
        serde_json::json!({ "auc": self.auc, "ar": ar, "recall": recall })
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>8} {:>8} {:>8} {:>8} {:>8}",
            "AR@1", "AR@5", "AR@10", "AR@100", "AUC"
        );
        let _ = writeln!(
            s,
            "{:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
            100.0 * self.ar_at(1),
            100.0 * self.ar_at(5),
            100.0 * self.ar_at(10),
            100.0 * self.ar_at(100),
            self.auc
        );
        s
    }
}
