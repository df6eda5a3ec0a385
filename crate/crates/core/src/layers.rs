//! Parameter initialization and the small convolutional building blocks
//! shared by the backbone, the heads and the ranker.

use rand::Rng;

use crate::tensor::{Binder, ParamKind, ParamStore, Tensor, TensorResult, Var};

/// Uniform in `±1/sqrt(fan_in)`.
pub fn uniform_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// A 1-D convolution with optional bias, stored as `{prefix}.weight` / `{prefix}.bias`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub prefix: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub bias: bool,
}

impl Conv1d {
    pub fn new(prefix: impl Into<String>, c_in: usize, c_out: usize, kernel: usize, stride: usize, bias: bool) -> Self {
        Self {
            prefix: prefix.into(),
            c_in,
            c_out,
            kernel,
            stride,
            bias,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let fan_in = self.c_in * self.kernel;
        store.insert(
            format!("{}.weight", self.prefix),
            uniform_init(rng, &[self.c_out, self.c_in, self.kernel], fan_in),
            ParamKind::Weight,
        );
        if self.bias {
            store.insert(
                format!("{}.bias", self.prefix),
                uniform_init(rng, &[self.c_out], fan_in),
                ParamKind::Bias,
            );
        }
    }

    pub fn forward(&self, b: &mut Binder, x: Var) -> TensorResult<Var> {
        let w = b.param(&format!("{}.weight", self.prefix))?;
        let bias = if self.bias {
            Some(b.param(&format!("{}.bias", self.prefix))?)
        } else {
            None
        };
        b.graph.conv1d(x, w, bias, self.stride, self.kernel / 2)
    }
}

/// Conv (no bias) → BatchNorm → ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv1d,
    pub bn_prefix: String,
}

impl ConvBnRelu {
    pub fn new(prefix: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        Self {
            conv: Conv1d::new(format!("{prefix}.conv"), c_in, c_out, kernel, stride, false),
            bn_prefix: format!("{prefix}.bn"),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.conv.init(store, rng);
        init_batchnorm(store, &self.bn_prefix, self.conv.c_out);
    }

    pub fn forward(&self, b: &mut Binder, x: Var) -> TensorResult<Var> {
        let y = self.conv.forward(b, x)?;
        let y = b.batchnorm(&self.bn_prefix, y)?;
        b.graph.relu(y)
    }
}

pub fn init_batchnorm(store: &mut ParamStore, prefix: &str, channels: usize) {
    store.insert(
        format!("{prefix}.gamma"),
        Tensor::full(&[channels], 1.0),
        ParamKind::BnAffine,
    );
    store.insert(
        format!("{prefix}.beta"),
        Tensor::zeros(&[channels]),
        ParamKind::BnAffine,
    );
    store.insert(
        format!("{prefix}.running_mean"),
        Tensor::zeros(&[channels]),
        ParamKind::Buffer,
    );
    store.insert(
        format!("{prefix}.running_var"),
        Tensor::full(&[channels], 1.0),
        ParamKind::Buffer,
    );
}
