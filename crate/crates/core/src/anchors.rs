//! Anchor widths: 1-D k-means over ground-truth widths, assigned to pyramid
//! levels from finest (smallest widths) to coarsest.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const KMEANS_MAX_ITERS: usize = 300;
/// Seeded k-means++ restarts in addition to the quantile start.
pub const KMEANS_RESTARTS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "AnchorFile", try_from = "AnchorFile")]
pub struct AnchorSet {
    pub depth: usize,
    pub per_cell: usize,
    /// Ascending; level `i` owns `widths[i*M .. (i+1)*M]`.
    pub widths: Vec<f64>,
}

/// On-disk layout: widths as an `N × M` nested list.
#[derive(Serialize, Deserialize)]
struct AnchorFile {
    #[serde(rename = "N")]
    depth: usize,
    #[serde(rename = "M")]
    per_cell: usize,
    widths: Vec<Vec<f64>>,
}

impl From<AnchorSet> for AnchorFile {
    fn from(a: AnchorSet) -> Self {
        let widths = a.widths.chunks(a.per_cell.max(1)).map(<[f64]>::to_vec).collect();
        Self {
            depth: a.depth,
            per_cell: a.per_cell,
            widths,
        }
    }
}

impl TryFrom<AnchorFile> for AnchorSet {
    type Error = Error;

    fn try_from(f: AnchorFile) -> Result<Self> {
        if f.widths.len() != f.depth || f.widths.iter().any(|row| row.len() != f.per_cell) {
            return Err(Error::Config(format!(
                "anchor widths must form a {}x{} matrix",
                f.depth, f.per_cell
            )));
        }
        Self::from_sorted(f.depth, f.per_cell, f.widths.concat())
    }
}

impl AnchorSet {
    pub fn from_sorted(depth: usize, per_cell: usize, widths: Vec<f64>) -> Result<Self> {
        let set = Self {
            depth,
            per_cell,
            widths,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != self.depth * self.per_cell {
            return Err(Error::Config(format!(
                "expected {} anchor widths, got {}",
                self.depth * self.per_cell,
                self.widths.len()
            )));
        }
        if self.widths.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Config("anchor widths must be positive".into()));
        }
        if self.widths.windows(2).any(|p| p[0] > p[1]) {
            return Err(Error::Config("anchor widths must be ascending".into()));
        }
        Ok(())
    }

    pub fn width(&self, level: usize, slot: usize) -> f64 {
        self.widths[level * self.per_cell + slot]
    }

    pub fn level(&self, level: usize) -> &[f64] {
        &self.widths[level * self.per_cell..(level + 1) * self.per_cell]
    }

    /// Clusters `samples` into `depth * per_cell` widths.
    pub fn fit(samples: &[f64], depth: usize, per_cell: usize, seed: u64) -> Result<Self> {
        let widths = kmeans_1d(samples, depth * per_cell, seed)?.centers;
        Self::from_sorted(depth, per_cell, widths)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let set: Self = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    /// Ascending.
    pub centers: Vec<f64>,
    pub inertia: f64,
}

/// Lloyd's algorithm in one dimension. Runs a quantile start and
/// [`KMEANS_RESTARTS`] seeded k-means++ starts and keeps the lowest inertia.
pub fn kmeans_1d(samples: &[f64], k: usize, seed: u64) -> Result<KMeansFit> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if samples.len() < k {
        return Err(Error::NotEnoughSamples {
            needed: k,
            got: samples.len(),
        });
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("k-means samples must be finite".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = lloyd(&sorted, quantile_init(&sorted, k));
    for _ in 0..KMEANS_RESTARTS {
        let fit = lloyd(&sorted, plus_plus_init(&sorted, k, &mut rng));
        if fit.inertia < best.inertia {
            best = fit;
        }
    }
    Ok(best)
}

fn quantile_init(sorted: &[f64], k: usize) -> Vec<f64> {
    let n = sorted.len();
    (0..k).map(|i| sorted[((2 * i + 1) * n) / (2 * k)]).collect()
}

fn plus_plus_init(sorted: &[f64], k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut centers = vec![sorted[rng.gen_range(0..sorted.len())]];
    while centers.len() < k {
        let d2: Vec<f64> = sorted.iter().map(|&x| nearest(&centers, x).1).collect();
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..sorted.len())
        } else {
            let mut u = rng.gen_range(0.0..total);
            let mut idx = sorted.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        };
        centers.push(sorted[pick]);
    }
    centers
}

fn nearest(centers: &[f64], x: f64) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = (x - c) * (x - c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn lloyd(samples: &[f64], mut centers: Vec<f64>) -> KMeansFit {
    let k = centers.len();
    let mut assign = vec![usize::MAX; samples.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, &x) in samples.iter().enumerate() {
            let c = nearest(&centers, x).0;
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        let mut sum = vec![0.0; k];
        let mut count = vec![0usize; k];
        for (i, &x) in samples.iter().enumerate() {
            sum[assign[i]] += x;
            count[assign[i]] += 1;
        }
        for c in 0..k {
            if count[c] > 0 {
                centers[c] = sum[c] / count[c] as f64;
            } else {
                // reseed an empty cluster at the worst-served point
                let far = samples
                    .iter()
                    .enumerate()
                    .max_by(|a, b| nearest(&centers, *a.1).1.total_cmp(&nearest(&centers, *b.1).1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                centers[c] = samples[far];
                assign[far] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = samples.iter().map(|&x| nearest(&centers, x).1).sum();
    centers.sort_by(f64::total_cmp);
    KMeansFit { centers, inertia }
}
