//! Central finite-difference oracle for the tape, plus per-op gradient tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, TensorResult, Var};

pub(crate) const FD_STEP: f64 = 1e-5;

pub(crate) fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Relative error whose floor grows with the loss magnitude, so coordinates
/// whose gradient sits at the round-off level of the central difference are
/// judged absolutely rather than relatively.
pub(crate) fn rel_err_scaled(analytic: f64, numeric: f64, loss: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6 * loss.abs().max(1.0));
    (analytic - numeric).abs() / denom
}

/// Max relative error between tape gradients and central differences of the
/// scalar produced by `f` over every element of every input.
pub(crate) fn max_grad_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> TensorResult<Var>,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), false).unwrap()).collect();
        let out = f(&mut g, &vars).unwrap();
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true).unwrap()).collect();
    let out = f(&mut g, &vars).unwrap();
    let grads = g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], input.len());
        for (idx, &a) in analytic.iter().enumerate().take(input.len()) {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[idx] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[idx] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

pub(crate) fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Reduces `x` to a scalar with fixed pseudo-random weights so that every
/// output element contributes a distinct gradient.
pub(crate) fn weighted_sum(g: &mut Graph, x: Var) -> TensorResult<Var> {
    let n = g.value(x).len();
    let shape = g.shape(x).to_vec();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 10.0).collect();
    let wv = g.constant(Tensor::new(shape, w)?)?;
    let p = g.mul(x, wv)?;
    g.sum_all(p)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::tensor::TensorError;

    const SEEDS: u64 = 20;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn assert_close(err: f64, tol: f64, what: &str) {
        assert!(err < tol, "{what}: relative gradient error {err:e} >= {tol:e}");
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut g = Graph::new();
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let i = g.constant(Tensor::identity(3)).unwrap();
        let xv = g.constant(x.clone()).unwrap();
        let y = g.matmul(i, xv).unwrap();
        assert_eq!(g.value(y), &x);
        let a = g.constant(Tensor::matrix(1, 1, vec![2.0]).unwrap()).unwrap();
        let b = g.constant(Tensor::matrix(1, 1, vec![3.0]).unwrap()).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[6.0]);
        assert!(matches!(g.matmul(i, a), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_gradients() {
        let mut r = rng(1);
        let a = random_tensor(&mut r, &[4, 5], 1.0);
        let b = random_tensor(&mut r, &[5, 3], 1.0);
        let err = max_grad_error(&[a, b], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y)
        });
        assert_close(err, 1e-6, "matmul 4x5x3");
        for seed in 0..SEEDS {
            let mut r = rng(100 + seed);
            let (p, q, s) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
            let a = random_tensor(&mut r, &[p, q], 1.0);
            let b = random_tensor(&mut r, &[q, s], 1.0);
            let err = max_grad_error(&[a, b], |g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y)
            });
            assert_close(err, 1e-6, "matmul");
        }
    }

    #[test]
    fn conv1d_shapes() {
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::new(vec![2, 128], (0..256).map(f64::from).collect()).unwrap())
            .unwrap();
        let w = g.constant(Tensor::full(&[3, 2, 3], 0.1)).unwrap();
        let y = g.conv1d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[3, 64]);
        let y = g.conv1d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[3, 128]);

        let delta = g
            .constant(Tensor::new(vec![2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let y = g.conv1d(x, delta, None, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let tiny = g.constant(Tensor::zeros(&[2, 1])).unwrap();
        let k5 = g.constant(Tensor::zeros(&[1, 2, 5])).unwrap();
        assert!(matches!(
            g.conv1d(tiny, k5, None, 1, 0),
            Err(TensorError::EmptyOutput { .. })
        ));
        let even = g.constant(Tensor::zeros(&[1, 2, 2])).unwrap();
        assert!(g.conv1d(x, even, None, 1, 0).is_err());
    }

    #[test]
    fn conv1d_stride2_length_law() {
        for t in 1..=256usize {
            let mut g = Graph::new();
            let x = g.constant(Tensor::zeros(&[1, t])).unwrap();
            let w = g.constant(Tensor::zeros(&[1, 1, 3])).unwrap();
            let y = g.conv1d(x, w, None, 2, 1).unwrap();
            assert_eq!(g.shape(y)[1], (t + 2 - 3) / 2 + 1);
        }
    }

    #[test]
    fn conv1d_gradients() {
        for seed in 0..SEEDS {
            let mut r = rng(200 + seed);
            let (ci, co) = (r.gen_range(1..4), r.gen_range(1..4));
            let k = [1, 3, 5][r.gen_range(0..3)];
            let stride = r.gen_range(1..3);
            let padding = r.gen_range(0..=k / 2);
            let t = r.gen_range(k..k + 8);
            let x = random_tensor(&mut r, &[ci, t], 1.0);
            let w = random_tensor(&mut r, &[co, ci, k], 1.0);
            let b = random_tensor(&mut r, &[co], 1.0);
            let err = max_grad_error(&[x, w, b], |g, v| {
                let y = g.conv1d(v[0], v[1], Some(v[2]), stride, padding)?;
                weighted_sum(g, y)
            });
            assert_close(err, 1e-5, "conv1d");
        }
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0])).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.data(r), &[0.0, 0.0, 2.0]);
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.data(s)[1], 0.5);
        let a = g.constant(Tensor::zeros(&[4, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[4, 3])).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[4, 6]);
        assert!(g.add(a, x).is_err());
        let big = g.constant(Tensor::vector(vec![1000.0])).unwrap();
        assert!(matches!(g.exp(big), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn elementwise_gradients() {
        for seed in 0..SEEDS {
            let mut r = rng(300 + seed);
            let shape = [r.gen_range(1..4), r.gen_range(1..5)];
            let a = random_tensor(&mut r, &shape, 1.0);
            let b = random_tensor(&mut r, &shape, 1.0);
            let bias = random_tensor(&mut r, &shape[..1], 1.0);
            // keep relu inputs away from the kink
            let mut away = random_tensor(&mut r, &shape, 1.0);
            away.data_mut().iter_mut().for_each(|v| *v += 0.1 * v.signum());
            let scale: Vec<f64> = (0..a.len()).map(|i| 0.5 + i as f64).collect();
            let shift: Vec<f64> = (0..a.len()).map(|i| i as f64).collect();

            let cases: Vec<(&str, f64)> = vec![
                (
                    "add",
                    max_grad_error(&[a.clone(), b.clone()], |g, v| {
                        let y = g.add(v[0], v[1])?;
                        weighted_sum(g, y)
                    }),
                ),
                (
                    "sub",
                    max_grad_error(&[a.clone(), b.clone()], |g, v| {
                        let y = g.sub(v[0], v[1])?;
                        weighted_sum(g, y)
                    }),
                ),
                (
                    "mul",
                    max_grad_error(&[a.clone(), b.clone()], |g, v| {
                        let y = g.mul(v[0], v[1])?;
                        weighted_sum(g, y)
                    }),
                ),
                (
                    "scale",
                    max_grad_error(std::slice::from_ref(&a), |g, v| {
                        let y = g.scale(v[0], -1.7)?;
                        weighted_sum(g, y)
                    }),
                ),
                (
                    "add_scalar",
                    max_grad_error(std::slice::from_ref(&a), |g, v| {
                        let y = g.add_scalar(v[0], 0.4)?;
                        weighted_sum(g, y)
                    }),
                ),
                (
                    "affine_const",
                    max_grad_error(std::slice::from_ref(&a), |g, v| {
                        let y = g.affine_const(v[0], scale.clone(), shift.clone())?;
                        weighted_sum(g, y)
                    }),
                ),
                (
                    "add_bias",
                    max_grad_error(&[a.clone(), bias.clone()], |g, v| {
                        let y = g.add_bias(v[0], v[1])?;
                        weighted_sum(g, y)
                    }),
                ),
                (
                    "relu",
                    max_grad_error(&[away.clone()], |g, v| {
                        let y = g.relu(v[0])?;
                        weighted_sum(g, y)
                    }),
                ),
                (
                    "sigmoid",
                    max_grad_error(std::slice::from_ref(&a), |g, v| {
                        let y = g.sigmoid(v[0])?;
                        weighted_sum(g, y)
                    }),
                ),
                (
                    "exp",
                    max_grad_error(std::slice::from_ref(&a), |g, v| {
                        let y = g.exp(v[0])?;
                        weighted_sum(g, y)
                    }),
                ),
                (
                    "concat0",
                    max_grad_error(&[a.clone(), b.clone()], |g, v| {
                        let y = g.concat(&[v[0], v[1]], 0)?;
                        weighted_sum(g, y)
                    }),
                ),
                (
                    "concat1",
                    max_grad_error(&[a.clone(), b.clone(), a.clone()], |g, v| {
                        let y = g.concat(&[v[0], v[1], v[2]], 1)?;
                        weighted_sum(g, y)
                    }),
                ),
                (
                    "transpose",
                    max_grad_error(std::slice::from_ref(&a), |g, v| {
                        let y = g.transpose(v[0])?;
                        weighted_sum(g, y)
                    }),
                ),
                (
                    "reshape",
                    max_grad_error(std::slice::from_ref(&a), |g, v| {
                        let y = g.reshape(v[0], &[a.len()])?;
                        weighted_sum(g, y)
                    }),
                ),
                (
                    "sum_all",
                    max_grad_error(std::slice::from_ref(&a), |g, v| {
                        let y = g.sum_all(v[0])?;
                        g.mul(y, y)
                    }),
                ),
                (
                    "mean_all",
                    max_grad_error(std::slice::from_ref(&a), |g, v| {
                        let y = g.mean_all(v[0])?;
                        g.mul(y, y)
                    }),
                ),
                (
                    "sum_squares",
                    max_grad_error(std::slice::from_ref(&a), |g, v| g.sum_squares(v[0])),
                ),
                (
                    "gather",
                    max_grad_error(std::slice::from_ref(&a), |g, v| {
                        let y = g.gather(v[0], vec![0, a.len() - 1, 0])?;
                        weighted_sum(g, y)
                    }),
                ),
            ];
            for (name, err) in cases {
                assert_close(err, 1e-6, name);
            }
        }
    }

    #[test]
    fn reduce_mean_values_and_gradients() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let m = g.reduce_mean(x, 0).unwrap();
        assert_eq!(g.value(m).item(), 2.0);
        let tc = g
            .constant(Tensor::matrix(4, 3, (0..12).map(f64::from).collect()).unwrap())
            .unwrap();
        let over_t = g.reduce_mean(tc, 0).unwrap();
        assert_eq!(g.shape(over_t), &[3]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 5]), true).unwrap();
        let m = g.reduce_mean(x, 1).unwrap();
        let s = g.sum_all(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().iter().all(|&v| (v - 0.2).abs() < 1e-15));

        for seed in 0..SEEDS {
            let mut r = rng(400 + seed);
            let shape = [r.gen_range(1..4), r.gen_range(1..5), r.gen_range(1..3)];
            let a = random_tensor(&mut r, &shape, 1.0);
            for axis in 0..3 {
                let err = max_grad_error(std::slice::from_ref(&a), |g, v| {
                    let y = g.reduce_mean(v[0], axis)?;
                    weighted_sum(g, y)
                });
                assert_close(err, 1e-6, "reduce_mean");
            }
        }
    }

    #[test]
    fn batchnorm_values() {
        // constant channel normalizes to zero, so the output is beta
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::matrix(2, 4, vec![3.0, 3.0, 3.0, 3.0, 1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let gamma = g.constant(Tensor::vector(vec![2.0, 1.0])).unwrap();
        let beta = g.constant(Tensor::vector(vec![0.7, 0.0])).unwrap();
        let (y, mean, var) = g.batchnorm1d_train(x, gamma, beta).unwrap();
        assert!(g.data(y)[..4].iter().all(|&v| (v - 0.7).abs() < 1e-12));
        assert_eq!(mean, vec![3.0, 2.5]);
        assert_eq!(var[0], 0.0);

        let mut r = rng(7);
        let mut g = Graph::new();
        let x = g.constant(random_tensor(&mut r, &[3, 50], 4.0)).unwrap();
        let ones = g.constant(Tensor::full(&[3], 1.0)).unwrap();
        let zeros = g.constant(Tensor::zeros(&[3])).unwrap();
        let (y, _, _) = g.batchnorm1d_train(x, ones, zeros).unwrap();
        for row in g.data(y).chunks(50) {
            let m = row.iter().sum::<f64>() / 50.0;
            let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 50.0;
            assert!(m.abs() < 1e-6);
            // epsilon shifts the variance by eps/(var+eps); inputs have var ≈ 5
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn batchnorm_gradients() {
        for seed in 0..SEEDS {
            let mut r = rng(500 + seed);
            let (c, t) = (r.gen_range(1..4), r.gen_range(2..8));
            let x = random_tensor(&mut r, &[c, t], 2.0);
            let gamma = random_tensor(&mut r, &[c], 1.5);
            let beta = random_tensor(&mut r, &[c], 1.0);
            let err = max_grad_error(&[x.clone(), gamma.clone(), beta.clone()], |g, v| {
                let (y, _, _) = g.batchnorm1d_train(v[0], v[1], v[2])?;
                weighted_sum(g, y)
            });
            assert_close(err, 1e-4, "batchnorm train");
            let rm: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
            let rv: Vec<f64> = (0..c).map(|i| 0.5 + i as f64).collect();
            let err = max_grad_error(&[x, gamma, beta], |g, v| {
                let y = g.batchnorm1d_eval(v[0], v[1], v[2], &rm, &rv)?;
                weighted_sum(g, y)
            });
            assert_close(err, 1e-6, "batchnorm eval");
        }
    }

    #[test]
    fn upsample_values_and_gradients() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 2, vec![0.0, 2.0]).unwrap()).unwrap();
        let y = g.upsample_linear2(x).unwrap();
        let expected = [0.0, 2.0 / 3.0, 4.0 / 3.0, 2.0];
        for (a, b) in g.data(y).iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let c = g.constant(Tensor::full(&[2, 5], 1.5)).unwrap();
        let y = g.upsample_linear2(c).unwrap();
        assert_eq!(g.shape(y), &[2, 10]);
        assert!(g.data(y).iter().all(|&v| (v - 1.5).abs() < 1e-15));

        for seed in 0..SEEDS {
            let mut r = rng(600 + seed);
            let shape = [r.gen_range(1..3), r.gen_range(1..7)];
            let x = random_tensor(&mut r, &shape, 1.0);
            let err = max_grad_error(&[x], |g, v| {
                let y = g.upsample_linear2(v[0])?;
                weighted_sum(g, y)
            });
            assert_close(err, 1e-6, "upsample");
        }
    }

    fn lower_mask(t: usize) -> Arc<Vec<bool>> {
        Arc::new((0..t * t).map(|k| k % t <= k / t).collect())
    }

    #[test]
    fn masked_ops_gradients() {
        for seed in 0..SEEDS {
            let mut r = rng(700 + seed);
            let t = r.gen_range(1..6);
            let x = random_tensor(&mut r, &[t, t], 2.0);
            let mask = lower_mask(t);
            let m2 = mask.clone();
            let err = max_grad_error(std::slice::from_ref(&x), move |g, v| {
                let y = g.masked_softmax(v[0], m2.clone())?;
                weighted_sum(g, y)
            });
            assert_close(err, 1e-6, "masked_softmax");
            let err = max_grad_error(&[x], move |g, v| {
                let y = g.mask_mul(v[0], mask.clone())?;
                weighted_sum(g, y)
            });
            assert_close(err, 1e-6, "mask_mul");
        }
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_over_unmasked() {
        let mut r = rng(9);
        let mut g = Graph::new();
        let x = g.constant(random_tensor(&mut r, &[4, 4], 3.0)).unwrap();
        let y = g.masked_softmax(x, lower_mask(4)).unwrap();
        for (i, row) in g.data(y).chunks(4).enumerate() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row[i + 1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn standardize_gradients() {
        for seed in 0..SEEDS {
            let mut r = rng(800 + seed);
            let shape = [r.gen_range(2..6), 1];
            let x = random_tensor(&mut r, &shape, 2.0);
            let err = max_grad_error(&[x], |g, v| {
                let y = g.standardize(v[0])?;
                weighted_sum(g, y)
            });
            assert_close(err, 1e-4, "standardize");
        }
    }

    #[test]
    fn loss_ops_gradients() {
        for seed in 0..SEEDS {
            let mut r = rng(900 + seed);
            let n = r.gen_range(1..6);
            let x = random_tensor(&mut r, &[n], 3.0);
            let target: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
            let t1 = target.clone();
            let err = max_grad_error(std::slice::from_ref(&x), move |g, v| {
                let y = g.bce_with_logits(v[0], t1.clone())?;
                weighted_sum(g, y)
            });
            assert_close(err, 1e-6, "bce_with_logits");

            let p = Tensor::vector((0..n).map(|_| r.gen_range(0.05..0.95)).collect());
            let t2 = target.clone();
            let err = max_grad_error(&[p], move |g, v| {
                let y = g.bce_prob(v[0], t2.clone())?;
                weighted_sum(g, y)
            });
            assert_close(err, 1e-6, "bce_prob");

            // stay away from the |d| = 1 transition
            let mut sx = x.clone();
            sx.data_mut().iter_mut().zip(&target).for_each(|(v, t)| {
                if ((*v - t).abs() - 1.0).abs() < 0.05 {
                    *v += 0.2;
                }
            });
            let t3 = target.clone();
            let err = max_grad_error(&[sx], move |g, v| {
                let y = g.smooth_l1(v[0], t3.clone())?;
                weighted_sum(g, y)
            });
            assert_close(err, 1e-6, "smooth_l1");

            let starts: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..0.5)).collect();
            let ends: Vec<f64> = starts.iter().map(|s| s + r.gen_range(0.1..0.5)).collect();
            let gts: Vec<(f64, f64)> = starts
                .iter()
                .map(|s| {
                    let gs = (s + r.gen_range(-0.05..0.05f64)).max(0.0);
                    (gs, gs + r.gen_range(0.1..0.5))
                })
                .collect();
            let st = Tensor::vector(starts);
            let en = Tensor::vector(ends);
            let err = max_grad_error(&[st, en], move |g, v| {
                let y = g.interval_iou(v[0], v[1], gts.clone())?;
                weighted_sum(g, y)
            });
            assert_close(err, 1e-6, "interval_iou");
        }
    }

    #[test]
    fn bce_reference_values() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.0, 40.0])).unwrap();
        let l = g.bce_with_logits(z, vec![0.0, 1.0]).unwrap();
        assert!((g.data(l)[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(g.data(l)[1] < 1e-6);
        let p = g.constant(Tensor::vector(vec![0.5, 1.0])).unwrap();
        let l = g.bce_prob(p, vec![1.0, 1.0]).unwrap();
        assert!((g.data(l)[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(g.data(l)[1] < 1e-6);
    }

    #[test]
    fn backward_contract() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true).unwrap();
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
        assert!(matches!(g.backward(y), Err(TensorError::AlreadyBackpropagated)));

        let mut g = Graph::new();
        let v = g.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        assert!(matches!(g.backward(v), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn chained_sigmoid_matmul_gradients() {
        for seed in 0..SEEDS {
            let mut r = rng(1000 + seed);
            let a = random_tensor(&mut r, &[3, 4], 1.0);
            let b = random_tensor(&mut r, &[4, 2], 1.0);
            let err = max_grad_error(&[a, b], |g, v| {
                let m = g.matmul(v[0], v[1])?;
                let s = g.sigmoid(m)?;
                weighted_sum(g, s)
            });
            assert_close(err, 1e-5, "sigmoid∘matmul");
        }
    }

    #[test]
    fn determinism_bit_identical() {
        let run = || {
            let mut r = rng(42);
            let a = random_tensor(&mut r, &[3, 6], 1.0);
            let w = random_tensor(&mut r, &[2, 3, 3], 1.0);
            let mut g = Graph::new();
            let av = g.leaf(a, true).unwrap();
            let wv = g.leaf(w, true).unwrap();
            let y = g.conv1d(av, wv, None, 1, 1).unwrap();
            let s = g.sigmoid(y).unwrap();
            let l = g.sum_all(s).unwrap();
            let out = g.value(l).item();
            let grads = g.backward(l).unwrap();
            (out, grads.get(av).unwrap().to_vec(), grads.get(wv).unwrap().to_vec())
        };
        assert_eq!(run(), run());
    }
}
