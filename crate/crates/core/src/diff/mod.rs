//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output,
//! and [`Graph::backward`] walks the tape in exact reverse order.

mod array;
mod graph;
mod linalg;

pub use array::Array;
pub use graph::{softmax_rows, Gradients, Graph, Padding, Var};
pub(crate) use graph::softplus;

/// Finite-difference utilities for checking analytic gradients.
pub mod gradcheck {
    /// Central differences of `f` at `x`, one coordinate at a time.
    pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
        let mut probe = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = probe[i];
                probe[i] = orig + step;
                let plus = f(&probe);
                probe[i] = orig - step;
                let minus = f(&probe);
                probe[i] = orig;
                (plus - minus) / (2.0 * step)
            })
            .collect()
    }

    /// `|a - b| / max(|a|, |b|, floor)`.
    pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(floor)
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{central_difference, relative_error};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
        let len = shape.iter().product();
        Array::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_conv(x: &Array, k: &Array, stride: usize, pad: usize) -> Array {
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (kk, kh, kw) = (k.dim(0), k.dim(2), k.dim(3));
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = Array::zeros(&[n, kk, oh, ow]);
        for b in 0..n {
            for o in 0..kk {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let y = (oy * stride + i) as isize - pad as isize;
                                    let xx = (ox * stride + j) as isize - pad as isize;
                                    if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                        acc += x.get(&[b, ci, y as usize, xx as usize]) * k.get(&[o, ci, i, j]);
                                    }
                                }
                            }
                        }
                        out.set(&[b, o, oy, ox], acc);
                    }
                }
            }
        }
        out
    }

    /// Checks d(sum(out ⊙ probe))/d(input) against central differences.
    fn check_unary(shape: &[usize], seed: u64, op: impl Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(shape, &mut rng);
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let y = op(&mut g, xv);
        let probe = random(g.value(y).shape(), &mut rng);
        let yp = g.mul_const(y, probe.clone()).unwrap();
        let loss = g.sum(yp);
        let analytic = g.backward(loss).unwrap().wrt_or_zeros(xv, x.shape());
        let f = |p: &[f64]| {
            let mut g = Graph::new();
            let xv = g.param(Array::new(shape.to_vec(), p.to_vec()).unwrap());
            let y = op(&mut g, xv);
            let yp = g.mul_const(y, probe.clone()).unwrap();
            let l = g.sum(yp);
            g.value(l).item()
        };
        let numeric = central_difference(f, x.data(), 1e-6);
        for (i, (a, n)) in analytic.data().iter().zip(&numeric).enumerate() {
            assert!(relative_error(*a, *n, 1e-6) < 1e-6, "coord {i}: analytic {a} numeric {n}");
        }
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let mut g = Graph::new();
        let x = g.constant(Array::from_rows(&[[1.0, 2.0]]).unwrap());
        let w = g.constant(Array::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
        let b = g.constant(Array::from_vec(vec![0.0, 0.0]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let z = g.constant(Array::from_rows(&[[0.0, 0.0]]).unwrap());
        let w2 = g.constant(Array::from_rows(&[[5.0, -1.0], [7.0, 2.5]]).unwrap());
        let b2 = g.constant(Array::from_vec(vec![3.0, 4.0]));
        let y2 = g.linear(z, w2, b2).unwrap();
        assert_eq!(g.value(y2).data(), &[3.0, 4.0]);
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (x, w, b) = (random(&[3, 4], &mut rng), random(&[4, 2], &mut rng), random(&[2], &mut rng));
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.linear(xv, wv, bv).unwrap();
        for n in 0..3 {
            for e in 0..2 {
                let mut acc = b.get(&[e]);
                for d in 0..4 {
                    acc += x.get(&[n, d]) * w.get(&[d, e]);
                }
                assert!((g.value(y).get(&[n, e]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_rejects_mismatched_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Array::zeros(&[2, 3]));
        let w = g.constant(Array::zeros(&[4, 2]));
        match g.matmul(x, w) {
            Err(crate::Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn conv_all_ones_and_identity() {
        let mut g = Graph::new();
        let x = g.constant(Array::full(&[1, 1, 3, 3], 1.0));
        let k = g.constant(Array::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, k, 1, Padding::Valid).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).item(), 9.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random(&[2, 1, 5, 4], &mut rng);
        let xi = g.constant(input.clone());
        let ident = g.constant(Array::full(&[1, 1, 1, 1], 1.0));
        let yi = g.conv2d(xi, ident, 1, Padding::Same).unwrap();
        assert!(g.value(yi).bit_eq(&input));
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[2, 3, 8, 8], &mut rng);
        let k = random(&[4, 3, 3, 3], &mut rng);
        for (stride, padding, pad) in [(1, Padding::Same, 1), (1, Padding::Valid, 0), (2, Padding::Valid, 0)] {
            let mut g = Graph::new();
            let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
            let y = g.conv2d(xv, kv, stride, padding).unwrap();
            let want = naive_conv(&x, &k, stride, pad);
            assert!(g.value(y).max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let mut g = Graph::new();
        let x = g.constant(Array::zeros(&[1, 1, 2, 2]));
        let k = g.constant(Array::zeros(&[1, 1, 3, 3]));
        assert!(matches!(g.conv2d(x, k, 1, Padding::Valid), Err(crate::Error::Dimension { .. })));
    }

    #[test]
    fn relu_values_and_dead_gradient() {
        let mut g = Graph::new();
        let x = g.param(Array::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let l = g.sum(y);
        let grad = g.backward(l).unwrap();
        assert_eq!(grad.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(Array::from_vec(vec![-3.0, -0.5]));
        let y = g.relu(x);
        let l = g.sum(y);
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_gradient_matches_finite_differences_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = random(&[20], &mut rng);
        for v in x.data_mut() {
            if v.abs() < 1e-3 {
                *v = 0.5;
            }
        }
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let y = g.relu(xv);
        let sq = g.mul(y, y).unwrap();
        let l = g.sum(sq);
        let analytic = g.backward(l).unwrap().get(xv).unwrap().clone();
        let numeric = central_difference(
            |p| p.iter().map(|v| v.max(0.0) * v.max(0.0)).sum(),
            x.data(),
            1e-7,
        );
        for (a, n) in analytic.data().iter().zip(&numeric) {
            assert!(relative_error(*a, *n, 1e-8) < 1e-6);
        }
    }

    #[test]
    fn global_avg_pool_cases() {
        let mut g = Graph::new();
        let c = g.constant(Array::full(&[2, 3, 4, 5], 1.75));
        let p = g.global_avg_pool(c).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 1.75));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let one = random(&[2, 3, 1, 1], &mut rng);
        let ov = g.constant(one.clone());
        let po = g.global_avg_pool(ov).unwrap();
        assert_eq!(g.value(po).data(), one.data());

        let x = random(&[2, 3, 4, 2], &mut rng);
        let xv = g.constant(x.clone());
        let px = g.global_avg_pool(xv).unwrap();
        for n in 0..2 {
            for ch in 0..3 {
                let mut s = 0.0;
                for i in 0..4 {
                    for j in 0..2 {
                        s += x.get(&[n, ch, i, j]);
                    }
                }
                assert!((g.value(px).get(&[n, ch]) - s / 8.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_cases() {
        let u = softmax_rows(&Array::from_rows(&[[0.0, 0.0, 0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(u.data(), &[0.25; 4]);

        let big = softmax_rows(&Array::from_rows(&[[1000.0, 0.0]]).unwrap()).unwrap();
        assert!(big.is_finite());
        assert!((big.data()[0] - 1.0).abs() < 1e-15);
        assert!(big.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_matches_compensated_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x = random(&[1, 12], &mut rng).map(|v| 8.0 * v);
            let y = softmax_rows(&x).unwrap();
            // Oracle: exp-sum with Kahan compensation and no max shift.
            let exps: Vec<f64> = x.data().iter().map(|v| v.exp()).collect();
            let (mut sum, mut comp) = (0.0f64, 0.0f64);
            for e in &exps {
                let t = e - comp;
                let s = sum + t;
                comp = (s - sum) - t;
                sum = s;
            }
            for (got, e) in y.data().iter().zip(&exps) {
                assert!((got - e / sum).abs() < 1e-12);
            }
            assert!((y.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_quadratic_and_unused_param() {
        let mut g = Graph::new();
        let theta = g.param(Array::from_vec(vec![1.0, -2.0]));
        let unused = g.param(Array::from_vec(vec![3.0]));
        let sq = g.mul(theta, theta).unwrap();
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(theta).unwrap().data(), &[2.0, -4.0]);
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt_or_zeros(unused, &[1]).data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Array::zeros(&[3]));
        assert!(matches!(g.backward(x), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        check_unary(&[2, 3, 5, 4], 21, |g, x| {
            let k = g.constant(Array::new(vec![2, 3, 3, 3], (0..54).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.4).collect()).unwrap());
            g.conv2d(x, k, 1, Padding::Same).unwrap()
        });
        check_unary(&[4, 3, 3, 3], 22, |g, k| {
            let x = g.constant(Array::new(vec![2, 3, 6, 4], (0..144).map(|i| ((i * 5) % 13) as f64 / 13.0 - 0.5).collect()).unwrap());
            g.conv2d(x, k, 2, Padding::Valid).unwrap()
        });
        check_unary(&[3, 5], 23, |g, x| g.softmax(x).unwrap());
        check_unary(&[2, 3, 4, 2], 24, |g, x| g.global_avg_pool(x).unwrap());
        check_unary(&[6, 3], 25, |g, x| g.pairwise_distance(x).unwrap());
        check_unary(&[7], 26, |g, x| g.softplus(x));
        check_unary(&[3, 4], 27, |g, x| {
            let w = g.constant(Array::new(vec![4, 2], vec![0.3, -0.2, 0.5, 0.1, -0.7, 0.9, 0.4, 0.2]).unwrap());
            let b = g.constant(Array::from_vec(vec![0.1, -0.3]));
            g.linear(x, w, b).unwrap()
        });
        check_unary(&[5], 28, |g, x| {
            let s = g.softmax_like_positive(x);
            g.log_clamped(s, 1e-12)
        });
        check_unary(&[3, 4], 29, |g, x| g.gather(x, vec![0, 5, 5, 11]).unwrap());
        check_unary(&[4, 3], 30, |g, x| g.l2_normalize_rows(x).unwrap());
    }

    #[test]
    fn deterministic_forward_and_backward() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut g = Graph::new();
            let x = g.constant(random(&[2, 2, 6, 6], &mut rng));
            let k = g.param(random(&[3, 2, 3, 3], &mut rng));
            let y = g.conv2d(x, k, 1, Padding::Same).unwrap();
            let r = g.relu(y);
            let p = g.global_avg_pool(r).unwrap();
            let s = g.softmax(p).unwrap();
            let l = g.log_clamped(s, 1e-12);
            let t = g.sum(l);
            let grad = g.backward(t).unwrap().get(k).unwrap().clone();
            (g.value(t).clone(), grad)
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert!(a.bit_eq(&b));
        assert!(ga.bit_eq(&gb));
    }

    impl Graph {
        /// `x²+1`, strictly positive, so `log_clamped` stays off its clamp.
        fn softmax_like_positive(&mut self, x: Var) -> Var {
            let sq = self.mul(x, x).unwrap();
            let one = self.constant(Array::full(self.value(x).shape(), 1.0));
            self.add(sq, one).unwrap()
        }
    }
}
