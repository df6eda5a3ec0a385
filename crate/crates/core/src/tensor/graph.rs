use std::sync::Arc;

use super::kernels::{self, ConvDims};
use super::{Tensor, TensorError, TensorResult};

pub const BN_EPSILON: f64 = 1e-5;
pub const STANDARDIZE_EPSILON: f64 = 1e-5;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AffineConst {
        x: Var,
        scale: Vec<f64>,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    Upsample2(Var),
    MaskedSoftmax {
        x: Var,
        mask: Arc<Vec<bool>>,
    },
    MaskMul {
        x: Var,
        mask: Arc<Vec<bool>>,
    },
    Standardize {
        x: Var,
        inv_std: f64,
    },
    Reshape(Var),
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    BceLogits {
        x: Var,
        target: Vec<f64>,
    },
    BceProb {
        x: Var,
        target: Vec<f64>,
    },
    SmoothL1 {
        x: Var,
        target: Vec<f64>,
    },
    SumSquares(Var),
    IntervalIou {
        start: Var,
        end: Var,
        gt: Vec<(f64, f64)>,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Logit magnitude beyond which BCE inputs are clamped.
pub const LOGIT_CLAMP: f64 = 15.0;
/// Probability clamp for BCE on probabilities.
pub const PROB_CLAMP: f64 = 1e-7;

/// Append-only tape of recorded operations.
///
/// Nodes are stored in creation order, which is a topological order, so the
/// backward pass is a single reverse sweep. A graph may be backpropagated
/// once; a second call is an error.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backpropagated: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of `len` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument(msg.into())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> TensorResult<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. Parameters and inputs that need gradients pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorResult<Var> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> TensorResult<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> TensorResult<Var> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (p, q, r) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.data(a), self.data(b), p, q, r);
        let t = Tensor::new(vec![p, r], out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> TensorResult<Var> {
        let t = self.value(x).transposed()?;
        self.push("transpose", t, Op::Transpose(x), &[x])
    }

    /// Cross-correlation of `x[C_in×T]` with `w[C_out×C_in×K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> TensorResult<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[0] {
            return Err(mismatch("conv1d", &sx, &sw));
        }
        let k = sw[2];
        if k % 2 == 0 {
            return Err(invalid(format!("conv1d kernel size must be odd, got {k}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(mismatch("conv1d bias", self.shape(b), &sw[..1]));
            }
        }
        let t_out = ConvDims::output_len(sx[1], k, stride, padding)
            .filter(|&t| t >= 1)
            .ok_or(TensorError::EmptyOutput { op: "conv1d" })?;
        let dims = ConvDims {
            c_in: sx[0],
            c_out: sw[0],
            t_in: sx[1],
            t_out,
            k,
            stride,
            padding,
        };
        let out = kernels::conv1d_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), dims);
        let t = Tensor::new(vec![dims.c_out, t_out], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push("conv1d", t, Op::Conv1d { x, w, b, dims }, &parents)
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> TensorResult<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(name, sa, sb));
        }
        let shape = sa.to_vec();
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(shape, out)?;
        self.push(name, t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> TensorResult<Var> {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())?;
        self.push(name, t, op, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> TensorResult<Var> {
        self.map("scale", x, |a| a * factor, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> TensorResult<Var> {
        self.map("add_scalar", x, |a| a + c, Op::AddScalar(x))
    }

    /// Elementwise `x·scale + shift` with constant per-element coefficients.
    pub fn affine_const(&mut self, x: Var, scale: Vec<f64>, shift: Vec<f64>) -> TensorResult<Var> {
        let v = self.value(x);
        if scale.len() != v.len() || shift.len() != v.len() {
            return Err(mismatch("affine_const", v.shape(), &[scale.len(), shift.len()]));
        }
        let out = v
            .data()
            .iter()
            .zip(scale.iter().zip(&shift))
            .map(|(a, (s, b))| a * s + b)
            .collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push("affine_const", t, Op::AffineConst { x, scale }, &[x])
    }

    /// Adds a per-row vector `b[C]` to every column of `x[C×T]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> TensorResult<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb != [sx[0]] {
            return Err(mismatch("add_bias", sx, sb));
        }
        let (c, t) = (sx[0], sx[1]);
        let bd = self.data(b);
        let out = self.data(x).iter().enumerate().map(|(i, v)| v + bd[i / t]).collect();
        let t = Tensor::new(vec![c, t], out)?;
        self.push("add_bias", t, Op::AddBias { x, b }, &[x, b])
    }

    pub fn relu(&mut self, x: Var) -> TensorResult<Var> {
        self.map("relu", x, |a| a.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> TensorResult<Var> {
        self.map("sigmoid", x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> TensorResult<Var> {
        self.map("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> TensorResult<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total_axis = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            total_axis += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total_axis;
        let (outer, _, inner) = kernels::axis_split(&base, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.data(*p)[o * len..(o + 1) * len]);
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push(
            "concat",
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> TensorResult<(usize, usize)> {
        let sx = self.shape(x);
        if sx.len() != 2 || sx[1] == 0 {
            return Err(invalid(format!("batchnorm1d expects C×T with T ≥ 1, got {sx:?}")));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [sx[0]] {
                return Err(mismatch("batchnorm1d", sx, self.shape(p)));
            }
        }
        Ok((sx[0], sx[1]))
    }

    /// Training-mode batch norm over the temporal axis of `x[C×T]`.
    /// Returns the output and the per-channel mean and biased variance.
    pub fn batchnorm1d_train(&mut self, x: Var, gamma: Var, beta: Var) -> TensorResult<(Var, Vec<f64>, Vec<f64>)> {
        let (c, t) = self.check_bn(x, gamma, beta)?;
        let xd = self.data(x);
        let mut means = vec![0.0; c];
        let mut vars = vec![0.0; c];
        let mut inv_std = vec![0.0; c];
        let mut xhat = vec![0.0; c * t];
        for ch in 0..c {
            let row = &xd[ch * t..(ch + 1) * t];
            let mean = row.iter().sum::<f64>() / t as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64;
            let is = 1.0 / (var + BN_EPSILON).sqrt();
            for (h, v) in xhat[ch * t..(ch + 1) * t].iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            means[ch] = mean;
            vars[ch] = var;
            inv_std[ch] = is;
        }
        let out = self.bn_affine(&xhat, gamma, beta, c, t);
        let tensor = Tensor::new(vec![c, t], out)?;
        let v = self.push(
            "batchnorm1d",
            tensor,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, means, vars))
    }

    /// Inference-mode batch norm using running statistics.
    pub fn batchnorm1d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> TensorResult<Var> {
        let (c, t) = self.check_bn(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(mismatch(
                "batchnorm1d running stats",
                &[c],
                &[running_mean.len(), running_var.len()],
            ));
        }
        let xd = self.data(x);
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let xhat: Vec<f64> = xd
            .iter()
            .enumerate()
            .map(|(i, v)| (v - running_mean[i / t]) * inv_std[i / t])
            .collect();
        let out = self.bn_affine(&xhat, gamma, beta, c, t);
        let tensor = Tensor::new(vec![c, t], out)?;
        self.push(
            "batchnorm1d",
            tensor,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    fn bn_affine(&self, xhat: &[f64], gamma: Var, beta: Var, _c: usize, t: usize) -> Vec<f64> {
        let (g, b) = (self.data(gamma), self.data(beta));
        xhat.iter().enumerate().map(|(i, h)| g[i / t] * h + b[i / t]).collect()
    }

    /// Mean along `axis`, removing it from the shape.
    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> TensorResult<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(invalid(format!("reduce_mean axis {axis} invalid for {shape:?}")));
        }
        let (outer, n, inner) = kernels::axis_split(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let base = (o * n + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xd[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut new_shape = shape;
        new_shape.remove(axis);
        let t = Tensor::new(new_shape, out)?;
        self.push("reduce_mean", t, Op::Mean { x, axis }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> TensorResult<Var> {
        let s = self.data(x).iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> TensorResult<Var> {
        let d = self.data(x);
        if d.is_empty() {
            return Err(invalid("mean of empty tensor"));
        }
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push("mean_all", Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// Linear ×2 upsampling along time of `x[C×T]`.
    pub fn upsample_linear2(&mut self, x: Var) -> TensorResult<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[1] == 0 {
            return Err(invalid(format!("upsample expects C×T, got {s:?}")));
        }
        let (c, t) = (s[0], s[1]);
        let out = kernels::upsample2_forward(self.data(x), c, t);
        let tensor = Tensor::new(vec![c, 2 * t], out)?;
        self.push("upsample_linear", tensor, Op::Upsample2(x), &[x])
    }

    fn check_square_mask(&self, x: Var, mask: &[bool], name: &'static str) -> TensorResult<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 || mask.len() != s[0] * s[1] {
            return Err(mismatch(name, s, &[mask.len()]));
        }
        Ok((s[0], s[1]))
    }

    /// Row softmax restricted to entries where `mask` is true; masked entries are exactly 0.
    pub fn masked_softmax(&mut self, x: Var, mask: Arc<Vec<bool>>) -> TensorResult<Var> {
        let (rows, cols) = self.check_square_mask(x, &mask, "masked_softmax")?;
        let xd = self.data(x);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let r = i * cols..(i + 1) * cols;
            let row = &xd[r.clone()];
            let m = &mask[r.clone()];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(invalid(format!("masked_softmax: row {i} fully masked")));
            }
            let o = &mut out[r];
            let mut sum = 0.0;
            for j in 0..cols {
                if m[j] {
                    o[j] = (row[j] - max).exp();
                    sum += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        self.push("masked_softmax", t, Op::MaskedSoftmax { x, mask }, &[x])
    }

    /// Zeroes entries where `mask` is false.
    pub fn mask_mul(&mut self, x: Var, mask: Arc<Vec<bool>>) -> TensorResult<Var> {
        let (rows, cols) = self.check_square_mask(x, &mask, "mask_mul")?;
        let out = self
            .data(x)
            .iter()
            .zip(mask.iter())
            .map(|(v, &keep)| if keep { *v } else { 0.0 })
            .collect();
        let t = Tensor::new(vec![rows, cols], out)?;
        self.push("mask_mul", t, Op::MaskMul { x, mask }, &[x])
    }

    /// Standardizes all elements of `x` to zero mean and unit variance.
    pub fn standardize(&mut self, x: Var) -> TensorResult<Var> {
        let v = self.value(x);
        let n = v.len();
        if n == 0 {
            return Err(invalid("standardize of empty tensor"));
        }
        let mean = v.data().iter().sum::<f64>() / n as f64;
        let var = v.data().iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
        let inv_std = 1.0 / (var + STANDARDIZE_EPSILON).sqrt();
        let out = v.data().iter().map(|a| (a - mean) * inv_std).collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push("standardize", t, Op::Standardize { x, inv_std }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> TensorResult<Var> {
        let v = self.value(x);
        let t = Tensor::new(shape.to_vec(), v.data().to_vec())?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// Picks elements by flat index into a rank-1 result.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> TensorResult<Var> {
        let d = self.data(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= d.len()) {
            return Err(invalid(format!("gather index {bad} out of range {}", d.len())));
        }
        let out: Vec<f64> = indices.iter().map(|&i| d[i]).collect();
        let t = Tensor::vector(out);
        self.push("gather", t, Op::Gather { x, indices }, &[x])
    }

    fn check_target(&self, x: Var, target: &[f64], name: &'static str) -> TensorResult<()> {
        if self.value(x).len() != target.len() {
            return Err(mismatch(name, self.shape(x), &[target.len()]));
        }
        Ok(())
    }

    /// Elementwise binary cross-entropy on logits against constant targets.
    /// Logits are clamped to ±[`LOGIT_CLAMP`].
    pub fn bce_with_logits(&mut self, x: Var, target: Vec<f64>) -> TensorResult<Var> {
        self.check_target(x, &target, "bce_with_logits")?;
        let v = self.value(x);
        let out = v
            .data()
            .iter()
            .zip(&target)
            .map(|(z, t)| {
                let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
                z.max(0.0) - z * t + kernels::stable_log1p_exp_neg_abs(z)
            })
            .collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push("bce_with_logits", t, Op::BceLogits { x, target }, &[x])
    }

    /// Elementwise binary cross-entropy on probabilities clamped to
    /// `[PROB_CLAMP, 1 − PROB_CLAMP]`.
    pub fn bce_prob(&mut self, x: Var, target: Vec<f64>) -> TensorResult<Var> {
        self.check_target(x, &target, "bce_prob")?;
        let v = self.value(x);
        let out = v
            .data()
            .iter()
            .zip(&target)
            .map(|(p, t)| {
                let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push("bce_prob", t, Op::BceProb { x, target }, &[x])
    }

    /// Elementwise smooth-L1 (transition at 1) against constant targets.
    pub fn smooth_l1(&mut self, x: Var, target: Vec<f64>) -> TensorResult<Var> {
        self.check_target(x, &target, "smooth_l1")?;
        let v = self.value(x);
        let out = v
            .data()
            .iter()
            .zip(&target)
            .map(|(a, t)| {
                let d = (a - t).abs();
                if d < 1.0 {
                    0.5 * d * d
                } else {
                    d - 0.5
                }
            })
            .collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push("smooth_l1", t, Op::SmoothL1 { x, target }, &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> TensorResult<Var> {
        let s = self.data(x).iter().map(|v| v * v).sum();
        self.push("sum_squares", Tensor::scalar(s), Op::SumSquares(x), &[x])
    }

    /// Temporal IoU of predicted intervals `[start_i, end_i]` against constant intervals.
    pub fn interval_iou(&mut self, start: Var, end: Var, gt: Vec<(f64, f64)>) -> TensorResult<Var> {
        let (ss, se) = (self.shape(start), self.shape(end));
        if ss != se || self.value(start).len() != gt.len() {
            return Err(mismatch("interval_iou", ss, se));
        }
        let out = self
            .data(start)
            .iter()
            .zip(self.data(end))
            .zip(&gt)
            .map(|((s, e), g)| iou_parts(*s, *e, *g).0)
            .collect();
        let t = Tensor::new(ss.to_vec(), out)?;
        self.push("interval_iou", t, Op::IntervalIou { start, end, gt }, &[start, end])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> TensorResult<Gradients> {
        if self.backpropagated {
            return Err(TensorError::AlreadyBackpropagated);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.is_finite() {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        self.backpropagated = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce() -> Vec<f64>) {
        if self.nodes[v.0].requires_grad {
            let d = f();
            self.accumulate(grads, v, d);
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (p, q, r) = (sa[0], sa[1], sb[1]);
                self.accumulate_with(grads, *a, || kernels::matmul_nt(g, self.data(*b), p, r, q));
                self.accumulate_with(grads, *b, || kernels::matmul_tn(self.data(*a), g, p, q, r));
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                self.accumulate(grads, *x, kernels::transpose(g, s[0], s[1]));
            }
            Op::Conv1d { x, w, b, dims } => {
                let (dx, dw, db) = kernels::conv1d_backward(self.data(*x), self.data(*w), g, *dims);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.accumulate_with(grads, *a, || g.iter().zip(db).map(|(x, y)| x * y).collect());
                self.accumulate_with(grads, *b, || g.iter().zip(da).map(|(x, y)| x * y).collect());
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, g.iter().map(|v| v * f).collect()),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::AffineConst { x, scale } => {
                self.accumulate(grads, *x, g.iter().zip(scale).map(|(a, s)| a * s).collect())
            }
            Op::AddBias { x, b } => {
                self.accumulate(grads, *x, g.to_vec());
                let t = node.value.shape()[1];
                self.accumulate_with(grads, *b, || g.chunks(t).map(|row| row.iter().sum()).collect());
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(xd).map(|(a, v)| if *v > 0.0 { *a } else { 0.0 }).collect(),
                );
            }
            Op::Sigmoid(x) => self.accumulate(grads, *x, g.iter().zip(out).map(|(a, s)| a * s * (1.0 - s)).collect()),
            Op::Exp(x) => self.accumulate(grads, *x, g.iter().zip(out).map(|(a, e)| a * e).collect()),
            Op::Concat { parts, axis } => {
                let first_shape = self.shape(parts[0]);
                let (outer, _, inner) = kernels::axis_split(first_shape, *axis);
                let total_len: usize = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis] * inner;
                    self.accumulate_with(grads, *p, || {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            let start = o * total_len + offset;
                            d.extend_from_slice(&g[start..start + len]);
                        }
                        d
                    });
                    offset += len;
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = node.value.shape();
                let (c, t) = (s[0], s[1]);
                let gd = self.data(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; c * t];
                for ch in 0..c {
                    let r = ch * t..(ch + 1) * t;
                    let gy = &g[r.clone()];
                    let xh = &xhat[r.clone()];
                    let sum_g: f64 = gy.iter().sum();
                    let sum_gx: f64 = gy.iter().zip(xh).map(|(a, b)| a * b).sum();
                    dgamma[ch] = sum_gx;
                    dbeta[ch] = sum_g;
                    let k = gd[ch] * inv_std[ch] / t as f64;
                    for ((d, a), h) in dx[r].iter_mut().zip(gy).zip(xh) {
                        *d = k * (t as f64 * a - sum_g - h * sum_gx);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let t = node.value.shape()[1];
                let gd = self.data(*gamma);
                self.accumulate_with(grads, *x, || {
                    g.iter()
                        .enumerate()
                        .map(|(i, a)| a * gd[i / t] * inv_std[i / t])
                        .collect()
                });
                self.accumulate_with(grads, *gamma, || {
                    g.chunks(t)
                        .zip(xhat.chunks(t))
                        .map(|(a, h)| a.iter().zip(h).map(|(x, y)| x * y).sum())
                        .collect()
                });
                self.accumulate_with(grads, *beta, || g.chunks(t).map(|r| r.iter().sum()).collect());
            }
            Op::Mean { x, axis } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = kernels::axis_split(shape, *axis);
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for a in 0..n {
                        for k in 0..inner {
                            dx[(o * n + a) * inner + k] = g[o * inner + k] / n as f64;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x);
                self.accumulate(grads, *x, kernels::upsample2_backward(g, s[0], s[1]));
            }
            Op::MaskedSoftmax { x, mask } => {
                let cols = node.value.shape()[1];
                let mut dx = vec![0.0; out.len()];
                for ((dr, yr), (gr, mr)) in dx
                    .chunks_mut(cols)
                    .zip(out.chunks(cols))
                    .zip(g.chunks(cols).zip(mask.chunks(cols)))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, a)| y * a).sum();
                    for j in 0..cols {
                        if mr[j] {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MaskMul { x, mask } => self.accumulate(
                grads,
                *x,
                g.iter()
                    .zip(mask.iter())
                    .map(|(a, &k)| if k { *a } else { 0.0 })
                    .collect(),
            ),
            Op::Standardize { x, inv_std } => {
                let n = out.len() as f64;
                let sum_g: f64 = g.iter().sum();
                let sum_gy: f64 = g.iter().zip(out).map(|(a, y)| a * y).sum();
                let k = inv_std / n;
                self.accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(out)
                        .map(|(a, y)| k * (n * a - sum_g - y * sum_gy))
                        .collect(),
                );
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Gather { x, indices } => {
                self.accumulate_with(grads, *x, || {
                    let mut dx = vec![0.0; self.value(*x).len()];
                    for (a, &idx) in g.iter().zip(indices) {
                        dx[idx] += a;
                    }
                    dx
                });
            }
            Op::BceLogits { x, target } => {
                let xd = self.data(*x);
                self.accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(xd.iter().zip(target))
                        .map(|(a, (z, t))| {
                            if z.abs() > LOGIT_CLAMP {
                                0.0
                            } else {
                                a * (kernels::sigmoid(*z) - t)
                            }
                        })
                        .collect(),
                );
            }
            Op::BceProb { x, target } => {
                let xd = self.data(*x);
                self.accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(xd.iter().zip(target))
                        .map(|(a, (p, t))| {
                            if *p < PROB_CLAMP || *p > 1.0 - PROB_CLAMP {
                                0.0
                            } else {
                                a * (p - t) / (p * (1.0 - p))
                            }
                        })
                        .collect(),
                );
            }
            Op::SmoothL1 { x, target } => {
                let xd = self.data(*x);
                self.accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(xd.iter().zip(target))
                        .map(|(a, (v, t))| {
                            let d = v - t;
                            a * if d.abs() < 1.0 { d } else { d.signum() }
                        })
                        .collect(),
                );
            }
            Op::SumSquares(x) => {
                let xd = self.data(*x);
                self.accumulate(grads, *x, xd.iter().map(|v| 2.0 * v * g[0]).collect());
            }
            Op::IntervalIou { start, end, gt } => {
                let (sd, ed) = (self.data(*start), self.data(*end));
                let mut ds = vec![0.0; sd.len()];
                let mut de = vec![0.0; sd.len()];
                for k in 0..sd.len() {
                    let (_, dis, die) = iou_parts(sd[k], ed[k], gt[k]);
                    ds[k] = g[k] * dis;
                    de[k] = g[k] * die;
                }
                self.accumulate(grads, *start, ds);
                self.accumulate(grads, *end, de);
            }
        }
    }
}

/// IoU of `[s, e]` with constant `gt`, plus partial derivatives w.r.t. `s` and `e`.
fn iou_parts(s: f64, e: f64, gt: (f64, f64)) -> (f64, f64, f64) {
    let (gs, ge) = gt;
    let raw = e.min(ge) - s.max(gs);
    let inter = raw.max(0.0);
    let union = (e - s) + (ge - gs) - inter;
    if union <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let iou = inter / union;
    let (di_ds, di_de) = if raw > 0.0 {
        (if s > gs { -1.0 } else { 0.0 }, if e < ge { 1.0 } else { 0.0 })
    } else {
        (0.0, 0.0)
    };
    let du_ds = -1.0 - di_ds;
    let du_de = 1.0 - di_de;
    let d = |di: f64, du: f64| (di * union - inter * du) / (union * union);
    (iou, d(di_ds, du_ds), d(di_de, du_de))
}
