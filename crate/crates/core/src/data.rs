//! Videos, splits and on-disk formats, plus the synthetic dataset generator.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! annotations.json     {"videos":[{"id":..,"segments":[[s,e],..],"split":"train"|"val"}]}
//! features/<id>.rapf   "RAPF", u32 T', u32 C, little-endian f32 row-major T'×C
//! ```

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::{GroundTruthMap, ProposalMap};
use crate::interval::{sort_by_score, Interval, ProposalSource, ScoredInterval};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"RAPF";
pub const ANNOTATION_FILE: &str = "annotations.json";
pub const FEATURE_DIR: &str = "features";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    /// `T×C`
    pub features: Tensor,
    pub segments: Vec<Interval>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub id: String,
    pub segments: Vec<[f64; 2]>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Annotations {
    pub videos: Vec<AnnotationEntry>,
}

impl AnnotationEntry {
    pub fn intervals(&self) -> Result<Vec<Interval>> {
        self.segments
            .iter()
            .map(|&[s, e]| {
                if !(s.is_finite() && e.is_finite()) || s < 0.0 || e > 1.0 || s >= e {
                    return Err(Error::Format(format!("video {}: invalid segment [{s}, {e}]", self.id)));
                }
                Ok(Interval::new(s, e))
            })
            .collect()
    }
}

impl Annotations {
    pub fn load(path: &Path) -> Result<Self> {
        let a: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        for v in &a.videos {
            v.intervals()?;
        }
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn ground_truth(&self, split: Option<Split>) -> Result<GroundTruthMap> {
        self.videos
            .iter()
            .filter(|v| split.is_none_or(|s| v.split == s))
            .map(|v| Ok((v.id.clone(), v.intervals()?)))
            .collect()
    }

    /// Normalized widths of every segment in `split`.
    pub fn widths(&self, split: Option<Split>) -> Result<Vec<f64>> {
        Ok(self
            .ground_truth(split)?
            .values()
            .flat_map(|g| g.iter().map(Interval::width).collect::<Vec<_>>())
            .collect())
    }
}

pub fn write_features<W: Write>(features: &Tensor, mut w: W) -> Result<()> {
    let s = features.shape();
    if s.len() != 2 {
        return Err(Error::InvalidArgument(format!("features must be rank 2, got {s:?}")));
    }
    w.write_all(FEATURE_MAGIC)?;
    let dim = |n: usize| u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("extent {n} too large")));
    w.write_all(&dim(s[0])?.to_le_bytes())?;
    w.write_all(&dim(s[1])?.to_le_bytes())?;
    for v in features.data() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_features<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format(format!("bad feature magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let t = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let c = u32::from_le_bytes(word) as usize;
    if t == 0 || c == 0 {
        return Err(Error::Format(format!("empty feature sequence {t}x{c}")));
    }
    let n = t
        .checked_mul(c)
        .ok_or_else(|| Error::Format(format!("feature extent {t}x{c} overflows")))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 4 * n {
        return Err(Error::Format(format!(
            "feature payload has {} bytes, expected {}",
            bytes.len(),
            4 * n
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite feature value".into()));
    }
    Ok(Tensor::new(vec![t, c], data)?)
}

/// Linear resampling of a `T'×C` sequence to `T×C`. The first and last
/// snippets map onto each other, so linear ramps survive any down/up trip.
pub fn rescale_features(raw: &Tensor, t: usize) -> Result<Tensor> {
    let s = raw.shape();
    if s.len() != 2 || s[0] == 0 || t == 0 {
        return Err(Error::InvalidArgument(format!("cannot rescale {s:?} to length {t}")));
    }
    let (src, c) = (s[0], s[1]);
    if src == t {
        return Ok(raw.clone());
    }
    let d = raw.data();
    let mut out = Vec::with_capacity(t * c);
    for u in 0..t {
        let pos = if t == 1 {
            (src - 1) as f64 / 2.0
        } else {
            u as f64 * (src - 1) as f64 / (t - 1) as f64
        };
        let i = (pos.floor() as usize).min(src - 1);
        let j = (i + 1).min(src - 1);
        let frac = pos - i as f64;
        for k in 0..c {
            out.push(d[i * c + k] * (1.0 - frac) + d[j * c + k] * frac);
        }
    }
    Ok(Tensor::new(vec![t, c], out)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub t: usize,
    pub c: usize,
    pub videos: Vec<VideoRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&VideoRecord> {
        self.videos.iter().filter(|v| v.split == split).collect()
    }

    pub fn annotations(&self) -> Annotations {
        Annotations {
            videos: self
                .videos
                .iter()
                .map(|v| AnnotationEntry {
                    id: v.id.clone(),
                    segments: v.segments.iter().map(|i| [i.start, i.end]).collect(),
                    split: v.split,
                })
                .collect(),
        }
    }

    pub fn ground_truth(&self, split: Split) -> GroundTruthMap {
        self.split(split)
            .into_iter()
            .map(|v| (v.id.clone(), v.segments.clone()))
            .collect()
    }

    pub fn feature_path(dir: &Path, id: &str) -> PathBuf {
        dir.join(FEATURE_DIR).join(format!("{id}.rapf"))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join(FEATURE_DIR))?;
        self.annotations().save(&dir.join(ANNOTATION_FILE))?;
        for v in &self.videos {
            let mut w = BufWriter::new(File::create(Self::feature_path(dir, &v.id))?);
            write_features(&v.features, &mut w)?;
            w.flush()?;
        }
        Ok(())
    }

    /// Loads a dataset directory, rescaling every sequence to length `t`.
    pub fn load(dir: &Path, t: usize) -> Result<Self> {
        let ann = Annotations::load(&dir.join(ANNOTATION_FILE))?;
        let mut videos = Vec::with_capacity(ann.videos.len());
        let mut channels = None;
        for v in &ann.videos {
            let raw = read_features(BufReader::new(File::open(Self::feature_path(dir, &v.id))?))?;
            let c = raw.shape()[1];
            if *channels.get_or_insert(c) != c {
                return Err(Error::Format(format!(
                    "video {} has {c} channels, expected {channels:?}",
                    v.id
                )));
            }
            videos.push(VideoRecord {
                id: v.id.clone(),
                features: rescale_features(&raw, t)?,
                segments: v.intervals()?,
                split: v.split,
            });
        }
        Ok(Self {
            t,
            c: channels.unwrap_or(0),
            videos,
        })
    }
}

/// Width mixture of planted segments: (low, high) per component, equally likely.
pub const WIDTH_MIXTURE: [(f64, f64); 3] = [(0.05, 0.1), (0.15, 0.3), (0.4, 0.7)];
pub const MAX_SEGMENTS: usize = 3;
pub const VAL_FRACTION: f64 = 0.2;
/// Foreground shift relative to the bound that makes difficulty 0 separable.
const SEPARATION_MARGIN: f64 = 2.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub t: usize,
    pub c: usize,
    pub seed: u64,
    pub difficulty: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_videos: 250,
            t: 64,
            c: 16,
            seed: 0,
            difficulty: 0.3,
        }
    }
}

/// Generator state shared by every video of one dataset.
struct Synth {
    rng: ChaCha8Rng,
    direction: Vec<f64>,
    shift: f64,
    widths: VecDeque<f64>,
}

impl Synth {
    fn new(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut direction: Vec<f64> = (0..cfg.c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        direction.iter_mut().for_each(|v| *v /= norm);
        let l1: f64 = direction.iter().map(|v| v.abs()).sum();
        let shift = SEPARATION_MARGIN * (1.0 - cfg.difficulty) * l1;
        Self {
            rng,
            direction,
            shift,
            widths: VecDeque::new(),
        }
    }

    fn peek_width(&mut self) -> f64 {
        if self.widths.is_empty() {
            let (lo, hi) = WIDTH_MIXTURE[self.rng.gen_range(0..WIDTH_MIXTURE.len())];
            let w = self.rng.gen_range(lo..hi);
            self.widths.push_back(w);
        }
        self.widths[0]
    }

    /// Draws 1–3 widths from the shared stream and packs them with random
    /// gaps of at least one snippet. A width that does not fit stays at the
    /// head of the stream for the next video, so the dataset's width
    /// histogram follows the mixture.
    fn segments(&mut self, t: usize) -> Vec<Interval> {
        let gap = 1.0 / t as f64;
        let want = self.rng.gen_range(1..=MAX_SEGMENTS);
        let mut widths = Vec::with_capacity(want);
        let mut used = 0.0;
        while widths.len() < want {
            let w = self.peek_width();
            if used + w + (widths.len() + 2) as f64 * gap > 1.0 {
                break;
            }
            used += w;
            widths.push(self.widths.pop_front().expect("peeked"));
        }
        if widths.is_empty() {
            // unreachable for t >= 4: every mixture width leaves room for two gaps
            let w = self.widths.pop_front().expect("peeked").min(1.0 - 2.0 * gap);
            used = w;
            widths.push(w);
        }
        // shuffle order, then split the slack across the m+1 gaps
        for i in (1..widths.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            widths.swap(i, j);
        }
        let m = widths.len();
        let slack = (1.0 - used - (m + 1) as f64 * gap).max(0.0);
        let mut cuts: Vec<f64> = (0..m).map(|_| self.rng.gen_range(0.0..1.0)).collect();
        cuts.sort_by(f64::total_cmp);
        let mut parts = Vec::with_capacity(m + 1);
        let mut prev = 0.0;
        for c in &cuts {
            parts.push(c - prev);
            prev = *c;
        }
        parts.push(1.0 - prev);
        let mut pos = 0.0;
        let mut out = Vec::with_capacity(m);
        for (w, p) in widths.iter().zip(&parts) {
            pos += gap + p * slack;
            out.push(Interval::new(pos, (pos + w).min(1.0)));
            pos += w;
        }
        out
    }

    fn features(&mut self, t: usize, c: usize, segments: &[Interval]) -> Tensor {
        let mut data = Vec::with_capacity(t * c);
        for u in 0..t {
            let center = (u as f64 + 0.5) / t as f64;
            let fg = segments.iter().any(|s| s.contains(center));
            for k in 0..c {
                let noise = self.rng.gen_range(-1.0..1.0);
                data.push(if fg {
                    noise + self.shift * self.direction[k]
                } else {
                    noise
                });
            }
        }
        Tensor::new(vec![t, c], data).expect("shape and data agree")
    }
}

/// Synthetic feature sequences with planted action segments. The last
/// [`VAL_FRACTION`] of videos form the validation split.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.t < 4 || cfg.c == 0 || cfg.num_videos == 0 {
        return Err(Error::Config(format!(
            "synthetic data needs T >= 4, C >= 1 and at least one video (got T={}, C={}, n={})",
            cfg.t, cfg.c, cfg.num_videos
        )));
    }
    if !(0.0..=1.0).contains(&cfg.difficulty) {
        return Err(Error::Config(format!(
            "difficulty must be in [0, 1], got {}",
            cfg.difficulty
        )));
    }
    let num_val = (cfg.num_videos as f64 * VAL_FRACTION).round() as usize;
    let mut synth = Synth::new(cfg);
    let videos = (0..cfg.num_videos)
        .map(|i| {
            let segments = synth.segments(cfg.t);
            let features = synth.features(cfg.t, cfg.c, &segments);
            VideoRecord {
                id: format!("video_{i:05}"),
                features,
                segments,
                split: if i + num_val >= cfg.num_videos {
                    Split::Val
                } else {
                    Split::Train
                },
            }
        })
        .collect();
    Ok(Dataset {
        t: cfg.t,
        c: cfg.c,
        videos,
    })
}

/// Foreground direction and shift used by [`synth_dataset`] for `cfg`; the
/// midpoint `shift/2` of the projection separates snippets at difficulty 0.
pub fn synth_foreground_direction(cfg: &SynthConfig) -> (Vec<f64>, f64) {
    let s = Synth::new(cfg);
    (s.direction, s.shift)
}

pub const PROPOSAL_HEADER: [&str; 4] = ["video_id", "start", "end", "score"];

/// Proposal CSV: videos in id order, each sorted by score descending, six decimals.
pub fn write_proposals<W: Write>(props: &ProposalMap, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(PROPOSAL_HEADER)?;
    for (id, list) in props {
        let mut list = list.clone();
        sort_by_score(&mut list);
        for p in &list {
            out.write_record([
                id.as_str(),
                &format!("{:.6}", p.interval.start),
                &format!("{:.6}", p.interval.end),
                &format!("{:.6}", p.score),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_proposals<R: Read>(r: R) -> Result<ProposalMap> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != PROPOSAL_HEADER {
        return Err(Error::Format(format!("unexpected proposal header {headers:?}")));
    }
    let mut out: ProposalMap = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("line {:?}: {e}", rec.position().map(|p| p.line()))))
        };
        let (s, e, score) = (num(1)?, num(2)?, num(3)?);
        let iv = Interval::checked(s, e)?;
        out.entry(rec[0].to_string())
            .or_default()
            .push(ScoredInterval::new(iv, score, ProposalSource::Rap));
    }
    Ok(out)
}
