use serde::{Deserialize, Serialize};

use crate::interval::{iou_unchecked, Interval, ScoredInterval};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjustConfig {
    /// Weight of the TAG boundary in the blend.
    pub ratio: f64,
    /// Minimum IoU (exclusive) for a TAG candidate to count as a match.
    pub match_threshold: f64,
}

impl Default for AdjustConfig {
    fn default() -> Self {
        Self {
            ratio: 0.5,
            match_threshold: 0.5,
        }
    }
}

/// Blends each proposal's boundaries with its best-overlapping TAG
/// candidate: `s* = r·s_tag + (1−r)·s_prop`, likewise for the end. Proposals
/// without a candidate above the threshold pass through unchanged. Scores
/// are never touched.
pub fn adjust_boundaries(rap: &[ScoredInterval], tag: &[ScoredInterval], cfg: AdjustConfig) -> Vec<ScoredInterval> {
    let r = cfg.ratio;
    rap.iter()
        .map(|p| {
            let mut best: Option<(f64, &ScoredInterval)> = None;
            for c in tag {
                let v = iou_unchecked(&p.interval, &c.interval);
                if best.is_none_or(|(bv, _)| v > bv) {
                    best = Some((v, c));
                }
            }
            match best {
                Some((v, c)) if v > cfg.match_threshold && r != 0.0 => {
                    let blend = |t: f64, q: f64| t * r + q * (1.0 - r);
                    ScoredInterval {
                        interval: Interval::new(
                            blend(c.interval.start, p.interval.start),
                            blend(c.interval.end, p.interval.end),
                        ),
                        ..*p
                    }
                }
                _ => *p,
            }
        })
        .collect()
}
