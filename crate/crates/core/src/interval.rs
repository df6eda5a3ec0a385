use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A temporal segment in normalized video time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    /// Validating constructor: finite endpoints with `start <= end`.
    pub fn checked(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) || start > end {
            return Err(Error::InvalidArgument(format!("invalid interval [{start}, {end}]")));
        }
        Ok(Self { start, end })
    }

    pub fn width(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn clamp_unit(&self) -> Self {
        Self {
            start: self.start.clamp(0.0, 1.0),
            end: self.end.clamp(0.0, 1.0),
        }
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t <= self.end
    }
}

/// Temporal intersection-over-union. Disjoint or empty intervals give 0.
pub fn iou(a: &Interval, b: &Interval) -> Result<f64> {
    if a.start > a.end || b.start > b.end {
        return Err(Error::InvalidArgument(format!(
            "inverted interval in iou: [{}, {}] / [{}, {}]",
            a.start, a.end, b.start, b.end
        )));
    }
    Ok(iou_unchecked(a, b))
}

/// [`iou`] for intervals already known to be well-formed.
pub fn iou_unchecked(a: &Interval, b: &Interval) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.width() + b.width() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalSource {
    Rap,
    Tag,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredInterval {
    pub interval: Interval,
    pub score: f64,
    pub source: ProposalSource,
}

impl ScoredInterval {
    pub fn new(interval: Interval, score: f64, source: ProposalSource) -> Self {
        Self {
            interval,
            score,
            source,
        }
    }
}

/// Sorts by score descending, breaking ties by interval lexicographic order.
pub fn sort_by_score(props: &mut [ScoredInterval]) {
    props.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.interval.start.total_cmp(&b.interval.start))
            .then(a.interval.end.total_cmp(&b.interval.end))
    });
}
