//! Relation-aware module.
//!
//! For a `C×T` sequence the module computes, per direction, a masked
//! dot-product affinity between temporal positions and aggregates projected
//! features with it. The two directional maps are concatenated, fused back to
//! `C` channels, squeezed over time into a global vector, passed through a
//! bottleneck (`W1`, standardization, ReLU, `W2`) and added to every position
//! of the input.
//!
//! Parameters live under a prefix in the [`ParamStore`]:
//! `alpha`, `beta`, `gamma` (`C×C` projections), `fuse` (`C×2C`),
//! `w1` (`C/r×C`) and `w2` (`C×C/r`). None of them has a bias, so an all-zero
//! input maps to an all-zero output.

use std::sync::Arc;

use rand::Rng;

use crate::layers::uniform_init;
use crate::tensor::{Binder, ParamKind, ParamStore, Tensor, TensorResult, Var};
use crate::{Error, Result};

/// Which temporal positions a row may attend to. Both include the diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `j ≤ i`
    Past,
    /// `j ≥ i`
    Future,
}

impl Direction {
    pub fn allows(self, i: usize, j: usize) -> bool {
        match self {
            Direction::Past => j <= i,
            Direction::Future => j >= i,
        }
    }

    /// Row-major `T×T` mask, `true` where `allows(i, j)`.
    pub fn mask(self, t: usize) -> Vec<bool> {
        (0..t * t).map(|k| self.allows(k / t, k % t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RamConfig {
    pub channels: usize,
    pub reduction: usize,
    /// Use masked raw dot products instead of a masked row softmax.
    pub raw_affinity: bool,
    /// Aggregate `γ(x_i)·Σ_j m_ij` (the query's own value) instead of `Σ_j m_ij γ(x_j)`.
    pub self_value_aggregation: bool,
}

impl RamConfig {
    pub fn new(channels: usize, reduction: usize) -> Self {
        Self {
            channels,
            reduction,
            raw_affinity: false,
            self_value_aggregation: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 || !self.channels.is_multiple_of(self.reduction) || self.channels < self.reduction {
            return Err(Error::Config(format!(
                "channels {} must be a positive multiple of the reduction ratio {}",
                self.channels, self.reduction
            )));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }
}

#[derive(Debug, Clone)]
pub struct RelationAwareModule {
    pub prefix: String,
    pub cfg: RamConfig,
}

struct Projections {
    alpha: Var,
    beta: Var,
    gamma: Var,
}

impl RelationAwareModule {
    pub fn new(prefix: impl Into<String>, cfg: RamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            prefix: prefix.into(),
            cfg,
        })
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let c = self.cfg.channels;
        let h = self.cfg.hidden();
        for (part, shape) in [
            ("alpha", [c, c]),
            ("beta", [c, c]),
            ("gamma", [c, c]),
            ("fuse", [c, 2 * c]),
            ("w1", [h, c]),
            ("w2", [c, h]),
        ] {
            store.insert(self.name(part), uniform_init(rng, &shape, shape[1]), ParamKind::Weight);
        }
    }

    fn check_input(&self, b: &Binder, x: Var) -> TensorResult<()> {
        let s = b.graph.shape(x);
        if s.len() != 2 || s[0] != self.cfg.channels || s[1] == 0 {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "ram",
                lhs: s.to_vec(),
                rhs: vec![self.cfg.channels],
            });
        }
        Ok(())
    }

    fn project(&self, b: &mut Binder, x: Var) -> TensorResult<Projections> {
        let mut proj = |part: &str| -> TensorResult<Var> {
            let w = b.param(&self.name(part))?;
            b.graph.matmul(w, x)
        };
        Ok(Projections {
            alpha: proj("alpha")?,
            beta: proj("beta")?,
            gamma: proj("gamma")?,
        })
    }

    fn affinity_from(&self, b: &mut Binder, p: &Projections, dir: Direction, normalize: bool) -> TensorResult<Var> {
        let t = b.graph.shape(p.alpha)[1];
        let bt = b.graph.transpose(p.beta)?;
        let scores = b.graph.matmul(bt, p.alpha)?;
        let mask = Arc::new(dir.mask(t));
        if normalize {
            b.graph.masked_softmax(scores, mask)
        } else {
            b.graph.mask_mul(scores, mask)
        }
    }

    /// Masked raw affinity `δ_ij·⟨β(x_i), α(x_j)⟩` as a `T×T` tensor.
    pub fn raw_affinity(&self, b: &mut Binder, x: Var, dir: Direction) -> TensorResult<Var> {
        self.check_input(b, x)?;
        let p = self.project(b, x)?;
        self.affinity_from(b, &p, dir, false)
    }

    /// Affinity as used by the module: row-softmax over unmasked entries
    /// unless `raw_affinity` is set.
    pub fn affinity(&self, b: &mut Binder, x: Var, dir: Direction) -> TensorResult<Var> {
        self.check_input(b, x)?;
        let p = self.project(b, x)?;
        self.affinity_from(b, &p, dir, !self.cfg.raw_affinity)
    }

    fn refine_from(&self, b: &mut Binder, p: &Projections, dir: Direction) -> TensorResult<Var> {
        let m = self.affinity_from(b, p, dir, !self.cfg.raw_affinity)?;
        if self.cfg.self_value_aggregation {
            let t = b.graph.shape(m)[1];
            let c = self.cfg.channels;
            let row_mean = b.graph.reduce_mean(m, 1)?;
            let row_sum = b.graph.scale(row_mean, t as f64)?;
            let row = b.graph.reshape(row_sum, &[1, t])?;
            let ones = b.graph.constant(Tensor::full(&[c, 1], 1.0))?;
            let spread = b.graph.matmul(ones, row)?;
            b.graph.mul(p.gamma, spread)
        } else {
            // x̂[:, i] = Σ_j M[i][j] γ[:, j]
            let mt = b.graph.transpose(m)?;
            b.graph.matmul(p.gamma, mt)
        }
    }

    /// Direction-restricted aggregation of projected features, `C×T`.
    pub fn directed_refine(&self, b: &mut Binder, x: Var, dir: Direction) -> TensorResult<Var> {
        self.check_input(b, x)?;
        let p = self.project(b, x)?;
        self.refine_from(b, &p, dir)
    }

    /// The excitation vector `W2·relu(standardize(W1·x^G))`, shape `[C]`,
    /// together with the module output.
    pub fn forward_parts(&self, b: &mut Binder, x: Var) -> TensorResult<(Var, Var)> {
        self.check_input(b, x)?;
        let c = self.cfg.channels;
        let p = self.project(b, x)?;
        let past = self.refine_from(b, &p, Direction::Past)?;
        let future = self.refine_from(b, &p, Direction::Future)?;
        let both = b.graph.concat(&[past, future], 0)?;
        let fuse = b.param(&self.name("fuse"))?;
        let fused = b.graph.matmul(fuse, both)?;
        let squeezed = b.graph.reduce_mean(fused, 1)?;
        let global = b.graph.reshape(squeezed, &[c, 1])?;
        let w1 = b.param(&self.name("w1"))?;
        let hidden = b.graph.matmul(w1, global)?;
        let hidden = b.graph.standardize(hidden)?;
        let hidden = b.graph.relu(hidden)?;
        let w2 = b.param(&self.name("w2"))?;
        let excite = b.graph.matmul(w2, hidden)?;
        let excite = b.graph.reshape(excite, &[c])?;
        let out = b.graph.add_bias(x, excite)?;
        Ok((excite, out))
    }

    pub fn forward(&self, b: &mut Binder, x: Var) -> TensorResult<Var> {
        self.forward_parts(b, x).map(|(_, out)| out)
    }
}
