//! Training objective: proposal loss, actionness loss and weight decay.

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::interval::Interval;
use crate::labels::{assign_actionness_labels, assign_proposal_labels, AssignmentResult, ACTIONNESS_ETA};
use crate::network::{
    decode, head_index, ForwardOutput, NetworkConfig, RapNet, HEAD_CENTER, HEAD_CONF, HEAD_FIELDS, HEAD_IOU,
    HEAD_LOGWIDTH,
};
use crate::tensor::{Binder, Graph, ParamKind, Tensor, TensorResult, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda_conf: f64,
    pub lambda_c: f64,
    pub lambda_w: f64,
    pub lambda_iou: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.1,
            lambda3: 0.0005,
            lambda_conf: 0.2,
            lambda_c: 1.0,
            lambda_w: 1.0,
            lambda_iou: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda_conf,
            self.lambda_c,
            self.lambda_w,
            self.lambda_iou,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if (self.lambda1 - 10.0 * self.lambda2).abs() > 1e-12 * self.lambda1.max(1.0) {
            return Err(Error::Config(format!(
                "lambda1 ({}) must be 10 x lambda2 ({})",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

/// Per-step scalar breakdown, in the column order of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub prop_conf_pos: f64,
    pub prop_conf_neg: f64,
    pub prop_center: f64,
    pub prop_width: f64,
    pub prop_iou: f64,
    pub actionness: f64,
    pub l2: f64,
    pub total: f64,
}

impl LossReport {
    pub const COLUMNS: [&'static str; 8] = [
        "prop_conf_pos",
        "prop_conf_neg",
        "prop_center",
        "prop_width",
        "prop_iou",
        "actionness",
        "l2",
        "total",
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.prop_conf_pos,
            self.prop_conf_neg,
            self.prop_center,
            self.prop_width,
            self.prop_iou,
            self.actionness,
            self.l2,
            self.total,
        ]
    }

    /// Proposal loss before the `lambda1` weight.
    pub fn proposal(&self, cfg: &LossConfig) -> f64 {
        cfg.lambda_conf * (self.prop_conf_pos + self.prop_conf_neg)
            + cfg.lambda_c * self.prop_center
            + cfg.lambda_w * self.prop_width
            + cfg.lambda_iou * self.prop_iou
    }

    /// Recomputes `total` from the parts.
    pub fn combined(&self, cfg: &LossConfig) -> f64 {
        cfg.lambda1 * self.proposal(cfg) + cfg.lambda2 * self.actionness + cfg.lambda3 * self.l2
    }

    /// Name of the first non-finite part, if any.
    pub fn non_finite_part(&self) -> Option<&'static str> {
        Self::COLUMNS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut acc = [0.0; 8];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        let v = acc.map(|x| x / n);
        LossReport {
            prop_conf_pos: v[0],
            prop_conf_neg: v[1],
            prop_center: v[2],
            prop_width: v[3],
            prop_iou: v[4],
            actionness: v[5],
            l2: v[6],
            total: v[7],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProposalLossVars {
    pub conf_pos: Var,
    pub conf_neg: Var,
    pub center: Var,
    pub width: Var,
    pub iou: Var,
    /// Detached IoU of each positive's decoded box, the target of the IoU head.
    pub iou_targets: Vec<f64>,
}

/// Targets held fixed across forward passes, for finite-difference checks.
#[derive(Debug, Clone)]
pub struct FrozenTargets {
    pub assign: AssignmentResult,
    pub iou_targets: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LossVars {
    pub proposal: ProposalLossVars,
    pub actionness: Var,
    pub l2: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn report(&self, g: &Graph) -> LossReport {
        let v = |x: Var| g.value(x).item();
        LossReport {
            prop_conf_pos: v(self.proposal.conf_pos),
            prop_conf_neg: v(self.proposal.conf_neg),
            prop_center: v(self.proposal.center),
            prop_width: v(self.proposal.width),
            prop_iou: v(self.proposal.iou),
            actionness: v(self.actionness),
            l2: self.l2.map_or(0.0, v),
            total: v(self.total),
        }
    }
}

/// All generator head outputs flattened into one vector, level by level.
/// Returns the vector and the offset of each level.
pub fn flatten_heads(g: &mut Graph, heads: &[Var]) -> TensorResult<(Var, Vec<usize>)> {
    let mut parts = Vec::with_capacity(heads.len());
    let mut offsets = Vec::with_capacity(heads.len());
    let mut offset = 0;
    for h in heads {
        let n = g.value(*h).len();
        offsets.push(offset);
        offset += n;
        parts.push(g.reshape(*h, &[n])?);
    }
    Ok((g.concat(&parts, 0)?, offsets))
}

fn zero(g: &mut Graph) -> TensorResult<Var> {
    g.constant(Tensor::scalar(0.0))
}

fn binary_entropy(t: f64) -> f64 {
    let term = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    term(t) + term(1.0 - t)
}

pub fn proposal_loss(
    g: &mut Graph,
    net: &NetworkConfig,
    anchors: &AnchorSet,
    heads: &[Var],
    assign: &AssignmentResult,
    iou_targets: Option<&[f64]>,
) -> Result<ProposalLossVars> {
    let (flat, offsets) = flatten_heads(g, heads)?;
    let m = net.anchors_per_cell;
    let field_index = |flat_anchor: usize, field: usize| {
        let (level, cell, slot) = net.instance_of(flat_anchor);
        offsets[level] + head_index(net.level_len(level), slot, field, cell)
    };
    debug_assert_eq!(
        g.value(flat).len(),
        HEAD_FIELDS * m * net.level_lens().iter().sum::<usize>()
    );

    let conf_neg = if assign.negatives.is_empty() {
        zero(g)?
    } else {
        let idx = assign.negatives.iter().map(|&a| field_index(a, HEAD_CONF)).collect();
        let z = g.gather(flat, idx)?;
        let l = g.bce_with_logits(z, vec![0.0; assign.negatives.len()])?;
        g.mean_all(l)?
    };

    let p = assign.positives.len();
    if p == 0 {
        return Ok(ProposalLossVars {
            conf_pos: zero(g)?,
            conf_neg,
            center: zero(g)?,
            width: zero(g)?,
            iou: zero(g)?,
            iou_targets: Vec::new(),
        });
    }
    let pos_idx =
        |field: usize| -> Vec<usize> { assign.positives.iter().map(|q| field_index(q.index, field)).collect() };

    let z = g.gather(flat, pos_idx(HEAD_CONF))?;
    let l = g.bce_with_logits(z, vec![1.0; p])?;
    let conf_pos = g.mean_all(l)?;

    // soft-target cross-entropy shifted by the target entropy, so the floor is zero
    let center_logit = g.gather(flat, pos_idx(HEAD_CENTER))?;
    let targets: Vec<f64> = assign
        .positives
        .iter()
        .map(|q| q.center_target.clamp(0.0, 1.0))
        .collect();
    let entropy = targets.iter().map(|&t| binary_entropy(t)).sum::<f64>() / p as f64;
    let l = g.bce_with_logits(center_logit, targets)?;
    let l = g.mean_all(l)?;
    let center = g.add_scalar(l, -entropy)?;

    let logwidth = g.gather(flat, pos_idx(HEAD_LOGWIDTH))?;
    let l = g.smooth_l1(logwidth, assign.positives.iter().map(|q| q.logwidth_target).collect())?;
    let width = g.mean_all(l)?;

    // differentiable decoded boxes of the positives
    let inv_scale: Vec<f64> = assign
        .positives
        .iter()
        .map(|q| 1.0 / net.level_len(q.level) as f64)
        .collect();
    let cell_shift: Vec<f64> = assign
        .positives
        .iter()
        .map(|q| q.cell as f64 / net.level_len(q.level) as f64)
        .collect();
    let half_anchor: Vec<f64> = assign
        .positives
        .iter()
        .map(|q| 0.5 * anchors.width(q.level, q.slot))
        .collect();
    let s = g.sigmoid(center_logit)?;
    let centers = g.affine_const(s, inv_scale, cell_shift)?;
    let e = g.exp(logwidth)?;
    let half = g.affine_const(e, half_anchor, vec![0.0; p])?;
    let start = g.sub(centers, half)?;
    let end = g.add(centers, half)?;
    let gt: Vec<(f64, f64)> = assign.positives.iter().map(|q| (q.gt.start, q.gt.end)).collect();
    let ious = g.interval_iou(start, end, gt)?;
    let detached = match iou_targets {
        Some(t) if t.len() == p => t.to_vec(),
        Some(t) => {
            return Err(Error::InvalidArgument(format!(
                "expected {p} IoU targets, got {}",
                t.len()
            )));
        }
        None => g.data(ious).to_vec(),
    };
    let miss = g.affine_const(ious, vec![-1.0; p], vec![1.0; p])?;
    let miss = g.mean_all(miss)?;
    let iou_logit = g.gather(flat, pos_idx(HEAD_IOU))?;
    let iou_prob = g.sigmoid(iou_logit)?;
    let l = g.smooth_l1(iou_prob, detached.clone())?;
    let check = g.mean_all(l)?;
    let iou = g.add(miss, check)?;

    Ok(ProposalLossVars {
        conf_pos,
        conf_neg,
        center,
        width,
        iou,
        iou_targets: detached,
    })
}

/// Mean binary cross-entropy of `[1 × T]` probabilities against 0/1 labels.
pub fn actionness_loss(g: &mut Graph, p_a: Var, labels: &[f64]) -> TensorResult<Var> {
    let l = g.bce_prob(p_a, labels.to_vec())?;
    g.mean_all(l)
}

/// `Σ‖W‖²` over every weight tensor in the binder's store (biases and
/// normalization parameters excluded).
pub fn l2_penalty(b: &mut Binder) -> TensorResult<Var> {
    let names: Vec<String> = b
        .store()
        .iter()
        .filter(|(_, _, k)| *k == ParamKind::Weight)
        .map(|(n, _, _)| n.to_string())
        .collect();
    let mut acc = zero(&mut b.graph)?;
    for n in names {
        let w = b.param(&n)?;
        let s = b.graph.sum_squares(w)?;
        acc = b.graph.add(acc, s)?;
    }
    Ok(acc)
}

pub fn total_loss(
    g: &mut Graph,
    prop: ProposalLossVars,
    actionness: Var,
    l2: Option<Var>,
    cfg: &LossConfig,
) -> TensorResult<LossVars> {
    let conf = g.add(prop.conf_pos, prop.conf_neg)?;
    let mut l_prop = g.scale(conf, cfg.lambda_conf)?;
    for (part, w) in [
        (prop.center, cfg.lambda_c),
        (prop.width, cfg.lambda_w),
        (prop.iou, cfg.lambda_iou),
    ] {
        let s = g.scale(part, w)?;
        l_prop = g.add(l_prop, s)?;
    }
    let a = g.scale(l_prop, cfg.lambda1)?;
    let b = g.scale(actionness, cfg.lambda2)?;
    let mut total = g.add(a, b)?;
    if let Some(l2) = l2 {
        let r = g.scale(l2, cfg.lambda3)?;
        total = g.add(total, r)?;
    }
    Ok(LossVars {
        proposal: prop,
        actionness,
        l2,
        total,
    })
}

/// A training sample: features plus ground truths.
#[derive(Debug, Clone, Copy)]
pub struct SampleRef<'a> {
    pub features: &'a Tensor,
    pub gts: &'a [Interval],
}

/// Forward pass, label assignment and loss for one video. If `frozen` is
/// given it replaces the assignment and IoU targets derived from the current
/// predictions. `with_l2` adds the weight penalty to this tape.
pub fn sample_loss(
    net: &RapNet,
    b: &mut Binder,
    anchors: &AnchorSet,
    sample: SampleRef,
    cfg: &LossConfig,
    frozen: Option<&FrozenTargets>,
    with_l2: bool,
) -> Result<(ForwardOutput, LossVars, FrozenTargets)> {
    let out = net.forward(b, sample.features)?;
    let assign = match frozen {
        Some(f) => f.assign.clone(),
        None => {
            let raw = net.raw_prediction(b, &out);
            let decoded = decode(&raw, anchors, net.cfg.t);
            assign_proposal_labels(sample.gts, anchors, &net.cfg, &decoded)?
        }
    };
    let prop = proposal_loss(
        &mut b.graph,
        &net.cfg,
        anchors,
        &out.heads,
        &assign,
        frozen.map(|f| f.iou_targets.as_slice()),
    )?;
    let iou_targets = prop.iou_targets.clone();
    let labels = assign_actionness_labels(sample.gts, net.cfg.t, ACTIONNESS_ETA);
    let act = actionness_loss(&mut b.graph, out.actionness, &labels)?;
    let l2 = if with_l2 { Some(l2_penalty(b)?) } else { None };
    let vars = total_loss(&mut b.graph, prop, act, l2, cfg)?;
    Ok((out, vars, FrozenTargets { assign, iou_targets }))
}
