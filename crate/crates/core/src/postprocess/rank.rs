use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec::{self, Execution};
use crate::interval::{Interval, ScoredInterval};
use crate::layers::{uniform_init, Conv1d};
use crate::optim::{average_gradients, LrSchedule, Sgd};
use crate::ram::{RamConfig, RelationAwareModule};
use crate::tensor::{Binder, ParamKind, ParamStore, Tensor, TensorResult, Var};
use crate::Result;

pub const INSIDE_POINTS: usize = 16;
pub const CONTEXT_POINTS: usize = 8;
pub const RANKER_POINTS: usize = INSIDE_POINTS + 2 * CONTEXT_POINTS;
/// Parameter-name prefix of every ranker entry.
pub const RANKER_PREFIX: &str = "ranker.";

/// Actionness at normalized time `x`, interpolated linearly between snippet
/// centers and held constant beyond the first and last center.
pub fn interpolate_actionness(p_a: &[f64], x: f64) -> f64 {
    let t = p_a.len();
    if t == 1 {
        return p_a[0];
    }
    let pos = (x.clamp(0.0, 1.0) * t as f64 - 0.5).clamp(0.0, (t - 1) as f64);
    let i = (pos.floor() as usize).min(t - 2);
    let frac = pos - i as f64;
    p_a[i] * (1.0 - frac) + p_a[i + 1] * frac
}

/// 32 actionness samples: 8 over the left context (half the proposal's
/// duration), 16 inside, 8 over the right context. Each sample sits at the
/// middle of its sub-bin.
pub fn ranker_features(iv: &Interval, p_a: &[f64]) -> Vec<f64> {
    let d = iv.width();
    let half = 0.5 * d;
    let mut out = Vec::with_capacity(RANKER_POINTS);
    let mut region = |start: f64, len: f64, n: usize| {
        for i in 0..n {
            out.push(interpolate_actionness(p_a, start + (i as f64 + 0.5) * len / n as f64));
        }
    };
    region(iv.start - half, half, CONTEXT_POINTS);
    region(iv.start, d, INSIDE_POINTS);
    region(iv.end, half, CONTEXT_POINTS);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankerConfig {
    pub lift_channels: usize,
    pub hidden: usize,
    pub reduction: usize,
    pub use_ram: bool,
}

impl Default for RankerConfig {
    fn default() -> Self {
        Self {
            lift_channels: 8,
            hidden: 128,
            reduction: 4,
            use_ram: true,
        }
    }
}

/// Proposal-level scorer: a kernel-1 lift of the 32-point actionness profile
/// to a few channels, a RAM over the 32 positions, then a two-layer MLP with
/// a sigmoid output.
#[derive(Debug, Clone)]
pub struct Ranker {
    pub cfg: RankerConfig,
    lift: Conv1d,
    ram: Option<RelationAwareModule>,
}

impl Ranker {
    pub fn new(cfg: RankerConfig) -> Result<Self> {
        let ram = if cfg.use_ram {
            Some(RelationAwareModule::new(
                format!("{RANKER_PREFIX}ram"),
                RamConfig::new(cfg.lift_channels, cfg.reduction),
            )?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            lift: Conv1d::new(format!("{RANKER_PREFIX}lift"), 1, cfg.lift_channels, 1, 1, true),
            ram,
        })
    }

    fn flat_len(&self) -> usize {
        self.cfg.lift_channels * RANKER_POINTS
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.lift.init(store, &mut rng);
        if let Some(r) = &self.ram {
            r.init(store, &mut rng);
        }
        let (f, h) = (self.flat_len(), self.cfg.hidden);
        store.insert(
            format!("{RANKER_PREFIX}fc1.weight"),
            uniform_init(&mut rng, &[h, f], f),
            ParamKind::Weight,
        );
        store.insert(
            format!("{RANKER_PREFIX}fc1.bias"),
            uniform_init(&mut rng, &[h], f),
            ParamKind::Bias,
        );
        store.insert(
            format!("{RANKER_PREFIX}fc2.weight"),
            uniform_init(&mut rng, &[1, h], h),
            ParamKind::Weight,
        );
        store.insert(
            format!("{RANKER_PREFIX}fc2.bias"),
            uniform_init(&mut rng, &[1], h),
            ParamKind::Bias,
        );
    }

    /// `[1 × 1]` probability for one 32-point feature vector.
    pub fn forward(&self, b: &mut Binder, features: &[f64]) -> TensorResult<Var> {
        let x = b
            .graph
            .constant(Tensor::new(vec![1, features.len()], features.to_vec())?)?;
        let mut h = self.lift.forward(b, x)?;
        if let Some(r) = &self.ram {
            h = r.forward(b, h)?;
        }
        let flat = b.graph.reshape(h, &[self.flat_len(), 1])?;
        let w1 = b.param(&format!("{RANKER_PREFIX}fc1.weight"))?;
        let b1 = b.param(&format!("{RANKER_PREFIX}fc1.bias"))?;
        let z = b.graph.matmul(w1, flat)?;
        let z = b.graph.add_bias(z, b1)?;
        let z = b.graph.relu(z)?;
        let w2 = b.param(&format!("{RANKER_PREFIX}fc2.weight"))?;
        let b2 = b.param(&format!("{RANKER_PREFIX}fc2.bias"))?;
        let z = b.graph.matmul(w2, z)?;
        let z = b.graph.add_bias(z, b2)?;
        b.graph.sigmoid(z)
    }

    pub fn score(&self, store: &ParamStore, features: &[f64]) -> Result<f64> {
        let mut b = Binder::new(store, false, false);
        let p = self.forward(&mut b, features)?;
        Ok(b.graph.value(p).item())
    }

    /// Rescales every score by the ranker's predicted overlap.
    pub fn rank(&self, store: &ParamStore, props: &[ScoredInterval], p_a: &[f64]) -> Result<Vec<ScoredInterval>> {
        let factors = props
            .iter()
            .map(|p| self.score(store, &ranker_features(&p.interval, p_a)))
            .collect::<Result<Vec<f64>>>()?;
        Ok(props
            .iter()
            .zip(factors)
            .map(|(p, f)| ScoredInterval {
                score: p.score * f,
                ..*p
            })
            .collect())
    }
}

/// `score · scorer(features(proposal))` for every proposal; set and order of
/// intervals are unchanged.
pub fn rank_proposals(props: &[ScoredInterval], p_a: &[f64], scorer: impl Fn(&[f64]) -> f64) -> Vec<ScoredInterval> {
    props
        .iter()
        .map(|p| ScoredInterval {
            score: p.score * scorer(&ranker_features(&p.interval, p_a)),
            ..*p
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for RankerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            base_lr: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Regresses the ranker output onto `target` (max IoU with ground truth)
/// with smooth-L1. Returns the mean training loss of each epoch.
pub fn fit_ranker(
    ranker: &Ranker,
    store: &mut ParamStore,
    examples: &[(Vec<f64>, f64)],
    cfg: RankerTrainConfig,
    exec: Execution,
) -> Result<Vec<f64>> {
    if examples.is_empty() || cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size.max(1));
    let schedule = LrSchedule::new(cfg.base_lr, 0.0, cfg.epochs as f64)?;
    let mut opt = Sgd::new(cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let snapshot = &*store;
            let results = exec::try_map(exec, batch, |&i| -> Result<_> {
                let (features, target) = &examples[i];
                let mut b = Binder::new(snapshot, false, true);
                let p = ranker.forward(&mut b, features)?;
                let l = b.graph.smooth_l1(p, vec![*target])?;
                let l = b.graph.sum_all(l)?;
                let loss = b.graph.value(l).item();
                let grads = b.graph.backward(l)?;
                Ok((loss, b.param_grads(&grads)))
            })?;
            let (losses, grads): (Vec<f64>, Vec<_>) = results.into_iter().unzip();
            epoch_loss += losses.iter().sum::<f64>();
            let avg = average_gradients(&grads);
            opt.step(store, &avg, schedule.at_step(step, steps_per_epoch))?;
            step += 1;
        }
        history.push(epoch_loss / examples.len() as f64);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::interval::{iou_unchecked, ProposalSource};

    #[test]
    fn interpolation_hits_centers_and_clamps() {
        let p = [0.0, 1.0, 0.5, 0.25];
        assert_eq!(interpolate_actionness(&p, 0.375), 1.0);
        assert_eq!(interpolate_actionness(&p, 0.25), 0.5);
        assert_eq!(interpolate_actionness(&p, -0.4), 0.0);
        assert_eq!(interpolate_actionness(&p, 1.7), 0.25);
    }

    #[test]
    fn feature_layout() {
        let p: Vec<f64> = (0..64).map(|u| if (16..32).contains(&u) { 1.0 } else { 0.0 }).collect();
        let f = ranker_features(&Interval::new(0.25, 0.5), &p);
        assert_eq!(f.len(), RANKER_POINTS);
        assert!(f[..CONTEXT_POINTS].iter().all(|v| *v < 0.5));
        assert!(f[CONTEXT_POINTS + 1..CONTEXT_POINTS + INSIDE_POINTS - 1]
            .iter()
            .all(|v| *v == 1.0));
        assert!(f[CONTEXT_POINTS + INSIDE_POINTS..].iter().all(|v| *v < 0.5));
        // context beyond the video edge is clamped
        let edge = ranker_features(&Interval::new(0.0, 0.2), &p);
        assert!(edge.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn constant_scorers() {
        let props = vec![
            ScoredInterval::new(Interval::new(0.1, 0.3), 0.7, ProposalSource::Rap),
            ScoredInterval::new(Interval::new(0.5, 0.9), 0.4, ProposalSource::Rap),
        ];
        let p = vec![0.3; 16];
        assert_eq!(rank_proposals(&props, &p, |_| 1.0), props);
        assert!(rank_proposals(&props, &p, |_| 0.0).iter().all(|q| q.score == 0.0));
    }

    #[test]
    fn output_in_unit_interval_and_rank_keeps_set() {
        let r = Ranker::new(RankerConfig::default()).unwrap();
        let mut store = ParamStore::new();
        r.init(&mut store, 3);
        assert!(store.names().all(|n| n.starts_with(RANKER_PREFIX)));
        let p: Vec<f64> = (0..32).map(|u| (u as f64 / 5.0).sin().abs()).collect();
        let props = vec![
            ScoredInterval::new(Interval::new(0.1, 0.3), 0.7, ProposalSource::Rap),
            ScoredInterval::new(Interval::new(0.0, 1.0), 0.4, ProposalSource::Rap),
        ];
        let out = r.rank(&store, &props, &p).unwrap();
        for (a, b) in out.iter().zip(&props) {
            assert_eq!(a.interval, b.interval);
            assert!(a.score > 0.0 && a.score < b.score);
        }
    }

    fn spearman(a: &[f64], b: &[f64]) -> f64 {
        fn ranks(v: &[f64]) -> Vec<f64> {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
            let mut r = vec![0.0; v.len()];
            let mut i = 0;
            while i < idx.len() {
                let mut j = i;
                while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                    j += 1;
                }
                for k in i..=j {
                    r[idx[k]] = (i + j) as f64 / 2.0;
                }
                i = j + 1;
            }
            r
        }
        let (ra, rb) = (ranks(a), ranks(b));
        let n = a.len() as f64;
        let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
        let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    fn toy_examples(rng: &mut ChaCha8Rng, n: usize) -> Vec<(Vec<f64>, f64)> {
        let t = 64;
        (0..n)
            .map(|_| {
                let gs = rng.gen_range(0.05..0.6);
                let gt = Interval::new(gs, gs + rng.gen_range(0.1..0.35));
                let p_a: Vec<f64> = (0..t)
                    .map(|u| {
                        let c = (u as f64 + 0.5) / t as f64;
                        let base = if gt.contains(c) { 0.85 } else { 0.1 };
                        (base + rng.gen_range(-0.1..0.1f64)).clamp(0.0, 1.0)
                    })
                    .collect();
                let jitter = |r: &mut ChaCha8Rng| r.gen_range(-0.2..0.2);
                let s = (gt.start + jitter(rng)).clamp(0.0, 0.95);
                let e = (gt.end + jitter(rng)).clamp(s + 0.02, 1.0);
                let iv = Interval::new(s, e);
                (ranker_features(&iv, &p_a), iou_unchecked(&iv, &gt))
            })
            .collect()
    }

    #[test]
    fn trained_ranker_orders_by_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let train = toy_examples(&mut rng, 1200);
        let held_out = toy_examples(&mut rng, 300);
        let ranker = Ranker::new(RankerConfig::default()).unwrap();
        let mut store = ParamStore::new();
        ranker.init(&mut store, 1);
        let cfg = RankerTrainConfig {
            epochs: 12,
            ..Default::default()
        };
        let hist = fit_ranker(&ranker, &mut store, &train, cfg, Execution::Parallel).unwrap();
        assert!(hist.last().unwrap() < &hist[0]);
        let pred: Vec<f64> = held_out.iter().map(|(f, _)| ranker.score(&store, f).unwrap()).collect();
        let truth: Vec<f64> = held_out.iter().map(|(_, t)| *t).collect();
        let rho = spearman(&pred, &truth);
        assert!(rho > 0.8, "spearman {rho}");
    }
}
