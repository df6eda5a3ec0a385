use crate::interval::{Interval, ProposalSource, ScoredInterval};

pub const DEFAULT_TAG_THRESHOLDS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Maximal runs of snippets with actionness above each threshold. Snippet
/// `u` spans `[u/T, (u+1)/T]`; identical intervals from different thresholds
/// are kept once. Scores are the mean actionness over the run.
pub fn tag_group(p_a: &[f64], thresholds: &[f64]) -> Vec<ScoredInterval> {
    let t = p_a.len();
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &tau in thresholds {
        let mut u = 0;
        while u < t {
            if p_a[u] > tau {
                let start = u;
                while u < t && p_a[u] > tau {
                    u += 1;
                }
                if !runs.contains(&(start, u)) {
                    runs.push((start, u));
                }
            } else {
                u += 1;
            }
        }
    }
    runs.into_iter()
        .map(|(s, e)| {
            let score = p_a[s..e].iter().sum::<f64>() / (e - s) as f64;
            ScoredInterval::new(
                Interval::new(s as f64 / t as f64, e as f64 / t as f64),
                score,
                ProposalSource::Tag,
            )
        })
        .collect()
}
