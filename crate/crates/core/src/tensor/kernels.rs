//! Raw numeric kernels over row-major slices. Shapes are validated by the
//! callers in `graph.rs`.

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `c[p×r] = a[p×q] · b[q×r]`
pub(crate) fn matmul(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut c = vec![0.0; p * r];
    for i in 0..p {
        let row = &mut c[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
    c
}

/// `a[p×q]ᵀ · b[p×r]` without materializing the transpose.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut c = vec![0.0; q * r];
    for i in 0..p {
        let brow = &b[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let row = &mut c[k * r..(k + 1) * r];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
    c
}

/// `a[p×q] · b[r×q]ᵀ`
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut c = vec![0.0; p * r];
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        for j in 0..r {
            let brow = &b[j * q..(j + 1) * q];
            c[i * r + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvDims {
    pub fn output_len(t_in: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = t_in + 2 * padding;
        if padded < k || stride == 0 {
            return None;
        }
        Some((padded - k) / stride + 1)
    }

    /// Output positions `t` for which input index `t*stride + tap - padding` is in range.
    fn valid_range(&self, tap: usize) -> (usize, usize) {
        let s = self.stride;
        let offset = tap as isize - self.padding as isize;
        // first t with t*s + offset >= 0
        let lo = if offset >= 0 {
            0
        } else {
            ((-offset) as usize).div_ceil(s)
        };
        // last t with t*s + offset <= t_in - 1
        let max_src = self.t_in as isize - 1 - offset;
        if max_src < 0 {
            return (0, 0);
        }
        let hi = ((max_src as usize) / s + 1).min(self.t_out);
        (lo.min(hi), hi)
    }
}

#[allow(clippy::needless_range_loop)]
pub(crate) fn conv1d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: ConvDims) -> Vec<f64> {
    let mut y = vec![0.0; d.c_out * d.t_out];
    for o in 0..d.c_out {
        let yrow = &mut y[o * d.t_out..(o + 1) * d.t_out];
        if let Some(b) = bias {
            yrow.iter_mut().for_each(|v| *v = b[o]);
        }
        for c in 0..d.c_in {
            let xrow = &x[c * d.t_in..(c + 1) * d.t_in];
            for tap in 0..d.k {
                let wv = w[(o * d.c_in + c) * d.k + tap];
                let (lo, hi) = d.valid_range(tap);
                for t in lo..hi {
                    let src = t * d.stride + tap - d.padding;
                    yrow[t] += wv * xrow[src];
                }
            }
        }
    }
    y
}

/// Returns `(dx, dw, db)`.
#[allow(clippy::needless_range_loop)]
pub(crate) fn conv1d_backward(x: &[f64], w: &[f64], dy: &[f64], d: ConvDims) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; d.c_in * d.t_in];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; d.c_out];
    for o in 0..d.c_out {
        let dyrow = &dy[o * d.t_out..(o + 1) * d.t_out];
        db[o] = dyrow.iter().sum();
        for c in 0..d.c_in {
            let xrow = &x[c * d.t_in..(c + 1) * d.t_in];
            let dxrow = &mut dx[c * d.t_in..(c + 1) * d.t_in];
            for tap in 0..d.k {
                let widx = (o * d.c_in + c) * d.k + tap;
                let wv = w[widx];
                let (lo, hi) = d.valid_range(tap);
                let mut acc = 0.0;
                for t in lo..hi {
                    let src = t * d.stride + tap - d.padding;
                    acc += dyrow[t] * xrow[src];
                    dxrow[src] += wv * dyrow[t];
                }
                dw[widx] = acc;
            }
        }
    }
    (dx, dw, db)
}

/// Source coordinates for doubling a length-`t` signal: output `u` reads
/// position `u·(t−1)/(2t−1)`, so both endpoints are reproduced exactly.
pub(crate) fn upsample2_taps(t: usize) -> Vec<(usize, usize, f64)> {
    let out = 2 * t;
    (0..out)
        .map(|u| {
            if t == 1 {
                return (0, 0, 0.0);
            }
            let pos = u as f64 * (t - 1) as f64 / (out - 1) as f64;
            let lo = (pos.floor() as usize).min(t - 1);
            let hi = (lo + 1).min(t - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

pub(crate) fn upsample2_forward(x: &[f64], channels: usize, t: usize) -> Vec<f64> {
    let taps = upsample2_taps(t);
    let out_t = 2 * t;
    let mut y = vec![0.0; channels * out_t];
    for c in 0..channels {
        let xrow = &x[c * t..(c + 1) * t];
        for (u, &(lo, hi, frac)) in taps.iter().enumerate() {
            y[c * out_t + u] = xrow[lo] * (1.0 - frac) + xrow[hi] * frac;
        }
    }
    y
}

pub(crate) fn upsample2_backward(dy: &[f64], channels: usize, t: usize) -> Vec<f64> {
    let taps = upsample2_taps(t);
    let out_t = 2 * t;
    let mut dx = vec![0.0; channels * t];
    for c in 0..channels {
        for (u, &(lo, hi, frac)) in taps.iter().enumerate() {
            let g = dy[c * out_t + u];
            dx[c * t + lo] += g * (1.0 - frac);
            dx[c * t + hi] += g * frac;
        }
    }
    dx
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn stable_log1p_exp_neg_abs(z: f64) -> f64 {
    (-z.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
