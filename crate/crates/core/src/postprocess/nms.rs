use serde::{Deserialize, Serialize};

use crate::interval::{iou_unchecked, ScoredInterval};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftNmsConfig {
    pub sigma: f64,
    pub min_score: f64,
    pub top_k: usize,
    /// Overlaps at or below this leave a score untouched.
    pub overlap_threshold: f64,
}

impl Default for SoftNmsConfig {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            min_score: 1e-4,
            top_k: 100,
            overlap_threshold: 0.65,
        }
    }
}

fn better(a: &ScoredInterval, b: &ScoredInterval) -> bool {
    a.score
        .total_cmp(&b.score)
        .then(b.interval.start.total_cmp(&a.interval.start))
        .then(b.interval.end.total_cmp(&a.interval.end))
        .is_gt()
}

/// Gaussian Soft-NMS. Repeatedly picks the best remaining proposal (ties
/// broken by start, then end, then input order) and decays every remaining
/// score that overlaps it above the threshold by `exp(−iou²/σ)`. Returns
/// picks in selection order.
pub fn soft_nms(props: &[ScoredInterval], cfg: SoftNmsConfig) -> Vec<ScoredInterval> {
    let mut remaining = props.to_vec();
    let mut picks = Vec::with_capacity(cfg.top_k.min(props.len()));
    while picks.len() < cfg.top_k && !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            if better(&remaining[i], &remaining[best]) {
                best = i;
            }
        }
        if remaining[best].score < cfg.min_score {
            break;
        }
        let pick = remaining.remove(best);
        for r in remaining.iter_mut() {
            let v = iou_unchecked(&pick.interval, &r.interval);
            if v > cfg.overlap_threshold {
                r.score *= (-v * v / cfg.sigma).exp();
            }
        }
        picks.push(pick);
    }
    picks
}
