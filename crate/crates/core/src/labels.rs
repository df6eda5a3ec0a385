//! Training targets: one positive anchor instance per ground truth, negatives
//! screened against the current decoded predictions, and per-snippet
//! actionness labels.

use crate::anchors::AnchorSet;
use crate::interval::{iou_unchecked, Interval, ScoredInterval};
use crate::network::{default_box, encode_offsets, NetworkConfig};
use crate::{Error, Result};

/// Negatives whose decoded prediction overlaps a ground truth by more than this are ignored.
pub const SCREEN_IOU: f64 = 0.5;
/// Relative expansion of each ground truth for actionness labels.
pub const ACTIONNESS_ETA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Positive {
    /// Flat (level, cell, slot) index.
    pub index: usize,
    pub level: usize,
    pub cell: usize,
    pub slot: usize,
    pub gt_index: usize,
    pub gt: Interval,
    /// Center offset in cells; may leave `[0, 1)` when a ground truth is
    /// claimed by a neighbouring cell.
    pub center_target: f64,
    pub logwidth_target: f64,
    /// IoU of the default box with the ground truth.
    pub anchor_iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    pub total: usize,
    pub positives: Vec<Positive>,
    /// Flat indices, ascending.
    pub negatives: Vec<usize>,
    /// Flat indices, ascending.
    pub ignored: Vec<usize>,
}

/// Default boxes of every anchor instance in flat order.
pub fn default_boxes(cfg: &NetworkConfig, anchors: &AnchorSet) -> Vec<Interval> {
    let mut out = Vec::with_capacity(cfg.total_anchors());
    for level in 0..cfg.depth {
        let len = cfg.level_len(level);
        for cell in 0..len {
            for slot in 0..cfg.anchors_per_cell {
                out.push(default_box(len, cell, anchors.width(level, slot)));
            }
        }
    }
    out
}

fn check_compatible(cfg: &NetworkConfig, anchors: &AnchorSet) -> Result<()> {
    if anchors.depth != cfg.depth || anchors.per_cell != cfg.anchors_per_cell {
        return Err(Error::Config(format!(
            "anchor set is {}x{} but the network expects {}x{}",
            anchors.depth, anchors.per_cell, cfg.depth, cfg.anchors_per_cell
        )));
    }
    Ok(())
}

pub fn assign_proposal_labels(
    gts: &[Interval],
    anchors: &AnchorSet,
    cfg: &NetworkConfig,
    decoded: &[ScoredInterval],
) -> Result<AssignmentResult> {
    check_compatible(cfg, anchors)?;
    let total = cfg.total_anchors();
    if decoded.len() != total {
        return Err(Error::InvalidArgument(format!(
            "expected {total} decoded predictions, got {}",
            decoded.len()
        )));
    }
    for g in gts {
        Interval::checked(g.start, g.end)?;
    }
    let boxes = default_boxes(cfg, anchors);

    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by(|&a, &b| gts[b].width().total_cmp(&gts[a].width()));

    let mut claimed = vec![false; total];
    let mut positives = Vec::with_capacity(gts.len());
    for gi in order {
        let gt = gts[gi];
        let mut best: Option<(usize, f64)> = None;
        for (idx, b) in boxes.iter().enumerate() {
            if claimed[idx] {
                continue;
            }
            let v = iou_unchecked(b, &gt);
            // strict comparison keeps the lowest flat index on ties
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((idx, v));
            }
        }
        let Some((idx, anchor_iou)) = best else { break };
        claimed[idx] = true;
        let (level, cell, slot) = cfg.instance_of(idx);
        let len = cfg.level_len(level);
        let (center_target, logwidth_target) = encode_offsets(len, cell, anchors.width(level, slot), &gt);
        positives.push(Positive {
            index: idx,
            level,
            cell,
            slot,
            gt_index: gi,
            gt,
            center_target,
            logwidth_target,
            anchor_iou,
        });
    }
    positives.sort_by_key(|p| p.index);

    let mut negatives = Vec::new();
    let mut ignored = Vec::new();
    for idx in 0..total {
        if claimed[idx] {
            continue;
        }
        let pred = &decoded[idx].interval;
        if gts.iter().any(|g| iou_unchecked(pred, g) > SCREEN_IOU) {
            ignored.push(idx);
        } else {
            negatives.push(idx);
        }
    }
    Ok(AssignmentResult {
        total,
        positives,
        negatives,
        ignored,
    })
}

/// 1 for each snippet whose center lies in a ground truth expanded by
/// `eta` times its width on both sides.
pub fn assign_actionness_labels(gts: &[Interval], t: usize, eta: f64) -> Vec<f64> {
    let regions: Vec<(f64, f64)> = gts
        .iter()
        .map(|g| {
            let d = g.width() * eta;
            ((g.start - d).max(0.0), (g.end + d).min(1.0))
        })
        .collect();
    (0..t)
        .map(|u| {
            let c = (u as f64 + 0.5) / t as f64;
            if regions.iter().any(|&(s, e)| c >= s && c <= e) {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}
