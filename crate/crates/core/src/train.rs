//! Two-stage training. Stage 1 fits the network with SGD on the composite
//! loss; each batch element gets its own tape, gradients are averaged in
//! batch order, and the weight penalty is differentiated once per step on a
//! separate tape. Stage 2 freezes the network and fits the ranker on
//! refined proposals of the training split.

use std::collections::BTreeMap;
use std::io::Write;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::VideoRecord;
use crate::eval::{build_curve, DatasetStyle, GroundTruthMap};
use crate::exec::{self, Execution};
use crate::interval::{iou_unchecked, sort_by_score};
use crate::losses::{l2_penalty, sample_loss, LossConfig, LossReport, SampleRef};
use crate::network::decode;
use crate::optim::{add_scaled, average_gradients, LrSchedule, Sgd};
use crate::pipeline::{propose, Model, PostprocessConfig};
use crate::postprocess::{adjust_boundaries, fit_ranker, ranker_features, tag_group, RankerTrainConfig};
use crate::tensor::{BnStats, ParamStore, Tensor, TensorError};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub bn_momentum: f64,
    pub seed: u64,
    pub loss: LossConfig,
    /// Proposals per training video used as ranker examples.
    pub ranker_top: usize,
    pub ranker: RankerTrainConfig,
    pub train_ranker: bool,
    /// Select the checkpoint by validation AUC after every epoch.
    pub select_by_val: bool,
    /// Stop after this many optimizer steps; the schedule still spans `epochs`.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            base_lr: 0.005,
            epochs: 18,
            warmup_epochs: 4,
            momentum: 0.9,
            bn_momentum: 0.1,
            seed: 0,
            loss: LossConfig::default(),
            ranker_top: 32,
            ranker: RankerTrainConfig::default(),
            train_ranker: true,
            select_by_val: true,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    /// Settings for the desk-scale synthetic runs. A 200-video training split
    /// yields about 13 steps per epoch, so the base rate is raised from 0.005.
    pub fn desk() -> Self {
        Self {
            base_lr: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup ({}) must be shorter than training ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        self.loss.validate()
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(self.base_lr, self.warmup_epochs as f64, self.epochs as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub report: LossReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<StepLog>,
    /// Base-pipeline validation AUC after each epoch (empty without a validation split).
    pub val_auc: Vec<f64>,
    pub best_epoch: usize,
    pub ranker_loss: Vec<f64>,
}

/// `step,prop_conf_pos,...,total`
pub fn write_train_log<W: Write>(log: &[StepLog], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["step"];
    header.extend(LossReport::COLUMNS);
    out.write_record(&header)?;
    for s in log {
        let mut row = vec![s.step.to_string()];
        row.extend(s.report.values().iter().map(|v| format!("{v:.9}")));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

fn non_finite(step: usize, e: Error) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::NonFiniteLoss {
            step,
            part: op.to_string(),
        },
        other => other,
    }
}

/// Folds one batch of per-sample BatchNorm statistics into the running buffers.
fn update_running_stats(store: &mut ParamStore, per_sample: &[Vec<BnStats>], momentum: f64) -> Result<()> {
    let mut acc: BTreeMap<&str, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for stats in per_sample {
        for s in stats {
            let unbias = if s.count > 1 {
                s.count as f64 / (s.count - 1) as f64
            } else {
                1.0
            };
            let e = acc
                .entry(s.prefix.as_str())
                .or_insert_with(|| (vec![0.0; s.mean.len()], vec![0.0; s.var.len()], 0));
            for (a, m) in e.0.iter_mut().zip(&s.mean) {
                *a += m;
            }
            for (a, v) in e.1.iter_mut().zip(&s.var) {
                *a += v * unbias;
            }
            e.2 += 1;
        }
    }
    for (prefix, (mean, var, n)) in acc {
        for (name, batch) in [("running_mean", mean), ("running_var", var)] {
            let key = format!("{prefix}.{name}");
            let cur = store.get(&key)?;
            let next: Vec<f64> = cur
                .data()
                .iter()
                .zip(&batch)
                .map(|(r, b)| (1.0 - momentum) * r + momentum * b / n as f64)
                .collect();
            store.set(&key, Tensor::vector(next))?;
        }
    }
    Ok(())
}

/// AUC of the decode + Soft-NMS pipeline on `videos`.
pub fn base_auc(model: &Model, videos: &[&VideoRecord], exec: Execution) -> Result<f64> {
    let gts: GroundTruthMap = videos.iter().map(|v| (v.id.clone(), v.segments.clone())).collect();
    let props = propose(model, videos, &PostprocessConfig::base(), exec)?;
    Ok(build_curve(&props, &gts, DatasetStyle::Anet, exec)?.auc)
}

/// Stage 1 followed (if enabled) by stage 2.
pub fn train(
    mut model: Model,
    train_set: &[&VideoRecord],
    val_set: &[&VideoRecord],
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let schedule = cfg.schedule()?;
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let mut opt = Sgd::new(cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(steps_per_epoch * cfg.epochs);
    let mut val_auc = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut step = 0;

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let lr = schedule.at_step(step, steps_per_epoch);
            let (report, grads, stats) =
                batch_gradients(&model, batch, train_set, cfg, exec).map_err(|e| non_finite(step, e))?;
            if let Some(part) = report.non_finite_part() {
                return Err(Error::NonFiniteLoss {
                    step,
                    part: part.to_string(),
                });
            }
            opt.step(&mut model.store, &grads, lr)?;
            update_running_stats(&mut model.store, &stats, cfg.bn_momentum)?;
            debug!("step {step} lr {lr:.6} total {:.6}", report.total);
            log.push(StepLog { step, lr, report });
            step += 1;
        }
        if cfg.select_by_val && !val_set.is_empty() {
            let auc = base_auc(&model, val_set, exec)?;
            info!("epoch {} val AUC {auc:.2}", epoch + 1);
            val_auc.push(auc);
            if best.as_ref().is_none_or(|(b, _, _)| auc > *b) {
                best = Some((auc, epoch, model.store.clone()));
            }
        }
    }
    let best_epoch = match best {
        Some((_, epoch, store)) => {
            model.store = store;
            epoch
        }
        None => cfg.epochs - 1,
    };

    let ranker_loss = if cfg.train_ranker {
        train_ranker_stage(&mut model, train_set, cfg, exec)?
    } else {
        Vec::new()
    };
    Ok(TrainOutcome {
        model,
        log,
        val_auc,
        best_epoch,
        ranker_loss,
    })
}

type BatchResult = (LossReport, BTreeMap<String, Vec<f64>>, Vec<Vec<BnStats>>);

/// Mean loss report and gradient over one batch, including the weight penalty.
pub fn batch_gradients(
    model: &Model,
    batch: &[usize],
    train_set: &[&VideoRecord],
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<BatchResult> {
    let store = &model.store;
    let per_sample = exec::try_map(exec, batch, |&i| -> Result<_> {
        let v = train_set[i];
        let mut b = crate::tensor::Binder::new(store, true, true);
        let sample = SampleRef {
            features: &v.features,
            gts: &v.segments,
        };
        let (_, vars, _) = sample_loss(&model.net, &mut b, &model.spec.anchors, sample, &cfg.loss, None, false)?;
        let report = vars.report(&b.graph);
        let grads = b.graph.backward(vars.total)?;
        let g = b.param_grads(&grads);
        Ok((report, g, b.take_bn_stats()))
    })?;
    let mut reports = Vec::with_capacity(per_sample.len());
    let mut grads = Vec::with_capacity(per_sample.len());
    let mut stats = Vec::with_capacity(per_sample.len());
    for (r, g, s) in per_sample {
        reports.push(r);
        grads.push(g);
        stats.push(s);
    }
    let mut avg = average_gradients(&grads);
    let mut report = LossReport::mean(&reports);

    let mut b = crate::tensor::Binder::new(store, false, true);
    let l2 = l2_penalty(&mut b)?;
    report.l2 = b.graph.value(l2).item();
    report.total += cfg.loss.lambda3 * report.l2;
    let g = b.graph.backward(l2)?;
    add_scaled(&mut avg, &b.param_grads(&g), cfg.loss.lambda3);
    Ok((report, avg, stats))
}

/// Ranker examples: the top refined proposals of each training video paired
/// with their best IoU against that video's ground truth.
pub fn ranker_examples(
    model: &Model,
    videos: &[&VideoRecord],
    top: usize,
    exec: Execution,
) -> Result<Vec<(Vec<f64>, f64)>> {
    let pp = PostprocessConfig::base();
    let per_video = exec::try_map(exec, videos, |v| -> Result<Vec<(Vec<f64>, f64)>> {
        let (raw, p_a) = model.net.predict(&model.store, &v.features)?;
        let decoded = decode(&raw, &model.spec.anchors, model.spec.network.t);
        let tag = tag_group(&p_a, &pp.tag_thresholds);
        let mut refined = adjust_boundaries(&decoded, &tag, pp.adjust_cfg);
        sort_by_score(&mut refined);
        refined.truncate(top);
        Ok(refined
            .iter()
            .map(|p| {
                let target = v
                    .segments
                    .iter()
                    .map(|g| iou_unchecked(&p.interval, g))
                    .fold(0.0, f64::max);
                (ranker_features(&p.interval, &p_a), target)
            })
            .collect())
    })?;
    Ok(per_video.into_iter().flatten().collect())
}

/// Stage 2: adds freshly initialized ranker parameters to the model and fits them.
pub fn train_ranker_stage(
    model: &mut Model,
    train_set: &[&VideoRecord],
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<Vec<f64>> {
    let examples = ranker_examples(model, train_set, cfg.ranker_top, exec)?;
    let mut ranker_store = ParamStore::new();
    model.ranker.init(&mut ranker_store, cfg.seed.wrapping_add(1));
    let rcfg = RankerTrainConfig {
        seed: cfg.seed.wrapping_add(2),
        ..cfg.ranker
    };
    let history = fit_ranker(&model.ranker, &mut ranker_store, &examples, rcfg, exec)?;
    info!(
        "ranker: {} examples, final loss {:.5}",
        examples.len(),
        history.last().copied().unwrap_or(f64::NAN)
    );
    model
        .store
        .merge_prefixed(&ranker_store, crate::postprocess::RANKER_PREFIX);
    Ok(history)
}
