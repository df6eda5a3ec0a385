//! The full proposal network: global context extractor (GCE), temporal
//! pyramid backbone (TPB) with lateral fusion, actionness head and one
//! proposal generator per pyramid level, plus anchor decoding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::interval::{Interval, ProposalSource, ScoredInterval};
use crate::layers::{Conv1d, ConvBnRelu};
use crate::ram::{RamConfig, RelationAwareModule};
use crate::tensor::{Binder, ParamStore, Tensor, TensorResult, Var};
use crate::{Error, Result};

/// Channel layout of a generator head: slot `k` owns channels `4k..4k+4`.
pub const HEAD_CONF: usize = 0;
pub const HEAD_IOU: usize = 1;
pub const HEAD_CENTER: usize = 2;
pub const HEAD_LOGWIDTH: usize = 3;
pub const HEAD_FIELDS: usize = 4;

fn default_reduction() -> usize {
    4
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Input length in snippets.
    #[serde(rename = "T")]
    pub t: usize,
    /// Feature channels.
    #[serde(rename = "C")]
    pub c: usize,
    /// Pyramid depth.
    #[serde(rename = "N")]
    pub depth: usize,
    /// Anchors per cell.
    #[serde(rename = "M")]
    pub anchors_per_cell: usize,
    /// RAM reduction ratio.
    #[serde(rename = "r", default = "default_reduction")]
    pub reduction: usize,
    #[serde(default)]
    pub raw_affinity: bool,
    #[serde(default = "default_true")]
    pub use_ram: bool,
    #[serde(default)]
    pub self_value_aggregation: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetworkConfig {
    /// Small configuration used for CI-scale runs.
    pub fn desk() -> Self {
        Self {
            t: 64,
            c: 16,
            depth: 4,
            anchors_per_cell: 2,
            reduction: 4,
            raw_affinity: false,
            use_ram: true,
            self_value_aggregation: false,
        }
    }

    /// `T = 128`, `N = 6`, `M = 2`.
    pub fn paper_scale(c: usize) -> Self {
        Self {
            t: 128,
            c,
            depth: 6,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("pyramid depth must be >= 2, got {}", self.depth)));
        }
        if self.anchors_per_cell == 0 {
            return Err(Error::Config("anchors per cell must be >= 1".into()));
        }
        let stride = 1usize << (self.depth - 1);
        if self.t == 0 || !self.t.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "T = {} must be divisible by 2^(N-1) = {stride}",
                self.t
            )));
        }
        if self.c < 2 || !self.c.is_multiple_of(2) {
            return Err(Error::Config(format!("C = {} must be even", self.c)));
        }
        if self.use_ram {
            self.ram_config().validate()?;
        }
        Ok(())
    }

    pub fn ram_config(&self) -> RamConfig {
        RamConfig {
            channels: self.c,
            reduction: self.reduction,
            raw_affinity: self.raw_affinity,
            self_value_aggregation: self.self_value_aggregation,
        }
    }

    /// Temporal extent of level `i`: `T / 2^i`.
    pub fn level_len(&self, level: usize) -> usize {
        self.t >> level
    }

    pub fn level_lens(&self) -> Vec<usize> {
        (0..self.depth).map(|i| self.level_len(i)).collect()
    }

    /// `M · Σ_i T/2^i`
    pub fn total_anchors(&self) -> usize {
        self.anchors_per_cell * self.level_lens().iter().sum::<usize>()
    }

    /// Offset of level `i` in the flat (level, cell, slot) anchor ordering.
    pub fn level_offset(&self, level: usize) -> usize {
        self.anchors_per_cell * (0..level).map(|i| self.level_len(i)).sum::<usize>()
    }

    /// Flat index of anchor instance `(level, cell, slot)`.
    pub fn instance_index(&self, level: usize, cell: usize, slot: usize) -> usize {
        self.level_offset(level) + cell * self.anchors_per_cell + slot
    }

    /// Inverse of [`instance_index`](Self::instance_index).
    pub fn instance_of(&self, flat: usize) -> (usize, usize, usize) {
        let m = self.anchors_per_cell;
        let mut rest = flat;
        for level in 0..self.depth {
            let n = self.level_len(level) * m;
            if rest < n {
                return (level, rest / m, rest % m);
            }
            rest -= n;
        }
        panic!("anchor index {flat} out of range");
    }
}

/// Index into a generator head output `[4M × T_i]`.
pub fn head_index(level_len: usize, slot: usize, field: usize, cell: usize) -> usize {
    (slot * HEAD_FIELDS + field) * level_len + cell
}

#[derive(Debug, Clone)]
struct PyramidLevel {
    ram: Option<RelationAwareModule>,
    blocks: [ConvBnRelu; 2],
}

#[derive(Debug, Clone)]
struct Lateral {
    halve: Conv1d,
    fuse: Conv1d,
}

#[derive(Debug, Clone)]
struct Generator {
    blocks: [ConvBnRelu; 2],
    head: Conv1d,
}

/// Per-level raw head outputs, each field stored cell-major (`cell * M + slot`).
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPrediction {
    pub level: usize,
    pub len: usize,
    pub conf_logit: Vec<f64>,
    pub iou_logit: Vec<f64>,
    pub center_logit: Vec<f64>,
    pub logwidth: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawPrediction {
    pub anchors_per_cell: usize,
    pub levels: Vec<LevelPrediction>,
}

impl RawPrediction {
    pub fn total(&self) -> usize {
        self.levels.iter().map(|l| l.conf_logit.len()).sum()
    }
}

/// Vars recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub gce: Var,
    /// `[1 × T]` probabilities.
    pub actionness: Var,
    pub top_down: Vec<Var>,
    pub bottom_up: Vec<Var>,
    /// `[4M × T_i]` per level.
    pub heads: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct RapNet {
    pub cfg: NetworkConfig,
    gce_blocks: [ConvBnRelu; 2],
    gce_ram: Option<RelationAwareModule>,
    levels: Vec<PyramidLevel>,
    laterals: Vec<Lateral>,
    actionness: Conv1d,
    generators: Vec<Generator>,
}

impl RapNet {
    pub fn new(cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.c;
        let ram = |prefix: String| -> Result<Option<RelationAwareModule>> {
            if cfg.use_ram {
                Ok(Some(RelationAwareModule::new(prefix, cfg.ram_config())?))
            } else {
                Ok(None)
            }
        };
        let gce_blocks = [
            ConvBnRelu::new("gce.block0", c, c, 3, 1),
            ConvBnRelu::new("gce.block1", c, c, 3, 1),
        ];
        let gce_ram = ram("gce.ram".into())?;
        let mut levels = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let stride = if i == 0 { 1 } else { 2 };
            levels.push(PyramidLevel {
                ram: ram(format!("tpb.level{i}.ram"))?,
                blocks: [
                    ConvBnRelu::new(&format!("tpb.level{i}.block0"), c, c, 3, stride),
                    ConvBnRelu::new(&format!("tpb.level{i}.block1"), c, c, 3, 1),
                ],
            });
        }
        let laterals = (0..cfg.depth - 1)
            .map(|i| Lateral {
                halve: Conv1d::new(format!("tpb.lateral{i}.halve"), c, c / 2, 1, 1, true),
                fuse: Conv1d::new(format!("tpb.lateral{i}.fuse"), c + c / 2, c, 1, 1, true),
            })
            .collect();
        let generators = (0..cfg.depth)
            .map(|i| Generator {
                blocks: [
                    ConvBnRelu::new(&format!("pg.level{i}.block0"), c, c, 3, 1),
                    ConvBnRelu::new(&format!("pg.level{i}.block1"), c, c, 3, 1),
                ],
                head: Conv1d::new(
                    format!("pg.level{i}.head"),
                    c,
                    HEAD_FIELDS * cfg.anchors_per_cell,
                    1,
                    1,
                    true,
                ),
            })
            .collect();
        Ok(Self {
            cfg,
            gce_blocks,
            gce_ram,
            levels,
            laterals,
            actionness: Conv1d::new("actionness.conv", c, 1, 3, 1, true),
            generators,
        })
    }

    /// Freshly initialized parameters, deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for b in &self.gce_blocks {
            b.init(&mut store, &mut rng);
        }
        if let Some(r) = &self.gce_ram {
            r.init(&mut store, &mut rng);
        }
        for level in &self.levels {
            if let Some(r) = &level.ram {
                r.init(&mut store, &mut rng);
            }
            for b in &level.blocks {
                b.init(&mut store, &mut rng);
            }
        }
        for l in &self.laterals {
            l.halve.init(&mut store, &mut rng);
            l.fuse.init(&mut store, &mut rng);
        }
        self.actionness.init(&mut store, &mut rng);
        for g in &self.generators {
            for b in &g.blocks {
                b.init(&mut store, &mut rng);
            }
            g.head.init(&mut store, &mut rng);
        }
        store
    }

    /// Records a `T×C` feature sequence as a `C×T` constant.
    pub fn input(&self, b: &mut Binder, features: &Tensor) -> Result<Var> {
        let s = features.shape();
        if s.len() != 2 || s[0] != self.cfg.t || s[1] != self.cfg.c {
            return Err(Error::InvalidArgument(format!(
                "expected a {}x{} feature sequence, got {s:?}",
                self.cfg.t, self.cfg.c
            )));
        }
        Ok(b.graph.constant(features.transposed()?)?)
    }

    pub fn gce_forward(&self, b: &mut Binder, x: Var) -> TensorResult<Var> {
        let mut h = x;
        for block in &self.gce_blocks {
            h = block.forward(b, h)?;
        }
        match &self.gce_ram {
            Some(r) => r.forward(b, h),
            None => Ok(h),
        }
    }

    /// Returns `(top_down, bottom_up)`, finest level first.
    pub fn tpb_forward(&self, b: &mut Binder, g: Var) -> TensorResult<(Vec<Var>, Vec<Var>)> {
        let mut top_down = Vec::with_capacity(self.cfg.depth);
        let mut h = g;
        for level in &self.levels {
            if let Some(r) = &level.ram {
                h = r.forward(b, h)?;
            }
            for block in &level.blocks {
                h = block.forward(b, h)?;
            }
            top_down.push(h);
        }
        let n = self.cfg.depth;
        let mut bottom_up = vec![top_down[n - 1]; n];
        for i in (0..n - 1).rev() {
            let lat = &self.laterals[i];
            let reduced = lat.halve.forward(b, bottom_up[i + 1])?;
            let up = b.graph.upsample_linear2(reduced)?;
            let cat = b.graph.concat(&[top_down[i], up], 0)?;
            bottom_up[i] = lat.fuse.forward(b, cat)?;
        }
        Ok((top_down, bottom_up))
    }

    /// `[1 × T]` actionness probabilities.
    pub fn actionness_head(&self, b: &mut Binder, g: Var) -> TensorResult<Var> {
        let logits = self.actionness.forward(b, g)?;
        b.graph.sigmoid(logits)
    }

    /// `[4M × T_i]` raw predictions for one level.
    pub fn proposal_generator(&self, b: &mut Binder, f_bu: Var, level: usize) -> TensorResult<Var> {
        let gen = &self.generators[level];
        let mut h = f_bu;
        for block in &gen.blocks {
            h = block.forward(b, h)?;
        }
        gen.head.forward(b, h)
    }

    pub fn forward(&self, b: &mut Binder, features: &Tensor) -> Result<ForwardOutput> {
        let x = self.input(b, features)?;
        let gce = self.gce_forward(b, x)?;
        let actionness = self.actionness_head(b, gce)?;
        let (top_down, bottom_up) = self.tpb_forward(b, gce)?;
        let heads = bottom_up
            .iter()
            .enumerate()
            .map(|(i, f)| self.proposal_generator(b, *f, i))
            .collect::<TensorResult<Vec<_>>>()?;
        Ok(ForwardOutput {
            gce,
            actionness,
            top_down,
            bottom_up,
            heads,
        })
    }

    pub fn raw_prediction(&self, b: &Binder, out: &ForwardOutput) -> RawPrediction {
        let m = self.cfg.anchors_per_cell;
        let levels = out
            .heads
            .iter()
            .enumerate()
            .map(|(level, head)| {
                let data = b.graph.data(*head);
                let len = self.cfg.level_len(level);
                let field = |f: usize| -> Vec<f64> {
                    (0..len)
                        .flat_map(|j| (0..m).map(move |k| (j, k)))
                        .map(|(j, k)| data[head_index(len, k, f, j)])
                        .collect()
                };
                LevelPrediction {
                    level,
                    len,
                    conf_logit: field(HEAD_CONF),
                    iou_logit: field(HEAD_IOU),
                    center_logit: field(HEAD_CENTER),
                    logwidth: field(HEAD_LOGWIDTH),
                }
            })
            .collect();
        RawPrediction {
            anchors_per_cell: m,
            levels,
        }
    }

    /// Inference-mode forward pass returning raw predictions and actionness.
    pub fn predict(&self, store: &ParamStore, features: &Tensor) -> Result<(RawPrediction, Vec<f64>)> {
        let mut b = Binder::new(store, false, false);
        let out = self.forward(&mut b, features)?;
        let raw = self.raw_prediction(&b, &out);
        let actionness = b.graph.data(out.actionness).to_vec();
        Ok((raw, actionness))
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Interval from an anchor at `cell` on a grid of `scale` cells with width
/// `anchor_width`, shifted by center offset `center` (in cells) and
/// log-width offset `logwidth`. No clamping.
pub fn decode_offsets(scale: usize, cell: usize, anchor_width: f64, center: f64, logwidth: f64) -> Interval {
    let c = (cell as f64 + center) / scale as f64;
    let w = anchor_width * logwidth.exp();
    Interval::new(c - 0.5 * w, c + 0.5 * w)
}

/// Regression targets `(center offset, log-width)` that make
/// [`decode_offsets`] reproduce `gt`.
pub fn encode_offsets(scale: usize, cell: usize, anchor_width: f64, gt: &Interval) -> (f64, f64) {
    let center = gt.center() * scale as f64 - cell as f64;
    let logwidth = (gt.width() / anchor_width).ln();
    (center, logwidth)
}

/// Default box of an anchor: centered on its cell with the anchor's width.
pub fn default_box(scale: usize, cell: usize, anchor_width: f64) -> Interval {
    decode_offsets(scale, cell, anchor_width, 0.5, 0.0)
}

/// Decodes every anchor instance into a scored interval, in flat
/// (level, cell, slot) order. Widths are floored at `1/T` and intervals clamped to `[0, 1]`.
pub fn decode(raw: &RawPrediction, anchors: &AnchorSet, t: usize) -> Vec<ScoredInterval> {
    let m = raw.anchors_per_cell;
    let min_width = 1.0 / t as f64;
    let mut out = Vec::with_capacity(raw.total());
    for lvl in &raw.levels {
        for j in 0..lvl.len {
            for k in 0..m {
                let idx = j * m + k;
                let anchor_w = anchors.width(lvl.level, k);
                let raw_iv = decode_offsets(lvl.len, j, anchor_w, sigmoid(lvl.center_logit[idx]), lvl.logwidth[idx]);
                let iv = if raw_iv.width() < min_width {
                    let c = raw_iv.center();
                    Interval::new(c - 0.5 * min_width, c + 0.5 * min_width)
                } else {
                    raw_iv
                };
                let score = sigmoid(lvl.conf_logit[idx]) * sigmoid(lvl.iou_logit[idx]);
                out.push(ScoredInterval::new(iv.clamp_unit(), score, ProposalSource::Rap));
            }
        }
    }
    out
}
