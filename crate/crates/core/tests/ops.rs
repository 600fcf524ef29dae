//! Tensor-core operations against naive loop oracles and finite differences.

use msaf::autodiff::{Graph, Mode};
use msaf::gradcheck::{grad_check, DEFAULT_EPS, DOUBLE_TOLERANCE};
use msaf::nn::{batch_norm_1d, global_average_pool, softmax_stack, BatchNorm1d, BatchNormVars, FeatureVar};
use msaf::{AxisSpec, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn naive_matmul(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (rows, n_in) = (x.shape()[0], x.shape()[1]);
    let n_out = w.shape()[0];
    let mut y = vec![0.0; rows * n_out];
    for r in 0..rows {
        for o in 0..n_out {
            let mut acc = 0.0;
            for i in 0..n_in {
                acc += w.at(&[o, i]) * x.at(&[r, i]);
            }
            y[r * n_out + o] = acc + b.at(&[o]);
        }
    }
    y
}

#[test]
fn affine_hand_cases() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap()).unwrap();
    let w = g.leaf(Tensor::eye(2)).unwrap();
    let b = g.leaf(Tensor::zeros(&[2])).unwrap();
    let y = g.affine(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 0.0]);

    let x = g.leaf(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()).unwrap();
    let w = g.leaf(Tensor::new(vec![1, 2], vec![2.0, 3.0]).unwrap()).unwrap();
    let b = g.leaf(Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
    let y = g.affine(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[6.0]);
}

#[test]
fn affine_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (x, w, b) = (
        random(&[3, 5], &mut rng),
        random(&[4, 5], &mut rng),
        random(&[4], &mut rng),
    );
    let mut g = Graph::new();
    let (xv, wv, bv) = (
        g.leaf(x.clone()).unwrap(),
        g.leaf(w.clone()).unwrap(),
        g.leaf(b.clone()).unwrap(),
    );
    let y = g.affine(xv, wv, bv).unwrap();
    let oracle = naive_matmul(&x, &w, &b);
    for (a, e) in g.value(y).data().iter().zip(&oracle) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn affine_shape_error_names_shapes() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2, 3])).unwrap();
    let w = g.leaf(Tensor::zeros(&[4, 5])).unwrap();
    let b = g.leaf(Tensor::zeros(&[4])).unwrap();
    let err = g.affine(x, w, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
}

#[test]
fn affine_sum_gradient_is_column_sum_of_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random(&[3, 4], &mut rng);
    let mut g = Graph::new();
    let x = g.leaf(random(&[4], &mut rng)).unwrap();
    let wv = g.constant(w.clone()).unwrap();
    let bv = g.constant(Tensor::zeros(&[3])).unwrap();
    let y = g.affine(x, wv, bv).unwrap();
    let s = g.sum_all(y).unwrap();
    let grads = g.backward(s).unwrap();
    let dx = grads.wrt(&g, x);
    for i in 0..4 {
        let expected: f64 = (0..3).map(|o| w.at(&[o, i])).sum();
        assert!((dx[i] - expected).abs() < 1e-14);
    }
}

fn pool(t: Tensor, axes: AxisSpec) -> Tensor {
    let mut g = Graph::new();
    let v = g.leaf(t).unwrap();
    let f = FeatureVar::new(&g, v, axes).unwrap();
    let p = global_average_pool(&mut g, &f).unwrap();
    g.value(p).clone()
}

#[test]
fn pooling_constant_and_hand_cases() {
    let p = pool(Tensor::full(&[2, 3, 4, 5], 7.0), AxisSpec::channels_first(2));
    assert!(p.data().iter().all(|&v| v == 7.0));
    assert_eq!(p.shape(), &[2, 3]);

    let data = vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0];
    let p = pool(
        Tensor::new(vec![1, 2, 2, 2], data).unwrap(),
        AxisSpec::channels_first(2),
    );
    assert_eq!(p.data(), &[2.5, 0.0]);
}

#[test]
fn pooling_matches_loop_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = random(&[2, 8, 3, 4], &mut rng);
    let p = pool(t.clone(), AxisSpec::channels_first(2));
    for b in 0..2 {
        for c in 0..8 {
            let mut acc = 0.0;
            for i in 0..3 {
                for j in 0..4 {
                    acc += t.at(&[b, c, i, j]);
                }
            }
            assert!((p.at(&[b, c]) - acc / 12.0).abs() < 1e-12);
        }
    }
}

#[test]
fn pooling_treats_sequence_axis_as_spatial() {
    let t = Tensor::from_fn(&[1, 3, 2], |i| i as f64);
    // [batch, time, channel]: channel c averages t[0, :, c].
    let p = pool(t, AxisSpec::sequence_major());
    assert_eq!(p.data(), &[2.0, 3.0]);
}

#[test]
fn pooling_without_spatial_axis_errors() {
    let mut g = Graph::new();
    let v = g.leaf(Tensor::zeros(&[2, 3])).unwrap();
    let axes = AxisSpec {
        batch: 0,
        channel: 1,
        spatial: vec![],
        sequence: None,
    };
    let f = FeatureVar::new(&g, v, axes).unwrap();
    assert!(global_average_pool(&mut g, &f).is_err());
}

fn bn_train(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor {
    let mut g = Graph::new();
    let xv = g.leaf(x).unwrap();
    let vars = BatchNormVars {
        gamma: g.leaf(gamma.clone()).unwrap(),
        beta: g.leaf(beta).unwrap(),
    };
    let state = BatchNorm1d::new(gamma.len());
    let (y, stats) = batch_norm_1d(&mut g, xv, &vars, &state, Mode::Train).unwrap();
    assert!(stats.is_some());
    g.value(y).clone()
}

#[test]
fn batch_norm_fixed_point_and_zero_scale() {
    // Columns with mean 0 and biased variance 1.
    let x = Tensor::new(vec![2, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
    let y = bn_train(x.clone(), Tensor::ones(&[2]), Tensor::zeros(&[2]));
    // eps = 1e-5 shrinks a unit-variance batch by exactly 1/sqrt(1 + eps).
    let shrink = 1.0 / (1.0f64 + 1e-5).sqrt();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - b * shrink).abs() < 1e-15);
    }
    assert!(y.max_abs_diff(&x) < 1e-5);

    let beta = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
    let y = bn_train(x, Tensor::zeros(&[2]), beta);
    assert_eq!(y.data(), &[0.3, -0.7, 0.3, -0.7]);
}

#[test]
fn batch_norm_normalizes_random_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::from_fn(&[16, 3], |_| rng.random_range(-40.0..90.0));
    let y = bn_train(x, Tensor::ones(&[3]), Tensor::zeros(&[3]));
    for c in 0..3 {
        let col: Vec<f64> = (0..16).map(|r| y.at(&[r, c])).collect();
        let mean = col.iter().sum::<f64>() / 16.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6, "var {var}");
    }
}

#[test]
fn batch_norm_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (x, gamma, beta) = (
        random(&[4, 3], &mut rng),
        random(&[3], &mut rng),
        random(&[3], &mut rng),
    );
    let y = bn_train(x.clone(), gamma.clone(), beta.clone());
    for c in 0..3 {
        let mean = (0..4).map(|r| x.at(&[r, c])).sum::<f64>() / 4.0;
        let var = (0..4).map(|r| (x.at(&[r, c]) - mean).powi(2)).sum::<f64>() / 4.0;
        for r in 0..4 {
            let e = gamma.at(&[c]) * (x.at(&[r, c]) - mean) / (var + 1e-5).sqrt() + beta.at(&[c]);
            assert!((y.at(&[r, c]) - e).abs() < 1e-12);
        }
    }
}

#[test]
fn batch_norm_rejects_single_sample_in_training() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[1, 3])).unwrap();
    let state = BatchNorm1d::new(3);
    let vars = BatchNormVars {
        gamma: g.leaf(state.gamma.clone()).unwrap(),
        beta: g.leaf(state.beta.clone()).unwrap(),
    };
    assert!(batch_norm_1d(&mut g, x, &vars, &state, Mode::Train).is_err());
    assert!(batch_norm_1d(&mut g, x, &vars, &state, Mode::Eval).is_ok());
}

fn softmax_values(blocks: Vec<Tensor>) -> Vec<Tensor> {
    let mut g = Graph::new();
    let vs: Vec<_> = blocks.into_iter().map(|b| g.leaf(b).unwrap()).collect();
    let out = softmax_stack(&mut g, &vs).unwrap();
    out.iter().map(|&v| g.value(v).clone()).collect()
}

#[test]
fn softmax_stack_hand_cases() {
    let a = softmax_values(vec![Tensor::full(&[2, 3], 0.4), Tensor::full(&[2, 3], 0.4)]);
    assert!(a.iter().all(|t| t.data().iter().all(|&v| v == 0.5)));

    let a = softmax_values(vec![Tensor::scalar(0.0), Tensor::scalar(3f64.ln())]);
    assert!((a[0].data()[0] - 0.25).abs() < 1e-15);
    assert!((a[1].data()[0] - 0.75).abs() < 1e-15);

    let mut g = Graph::new();
    assert!(softmax_stack(&mut g, &[]).is_err());
}

#[test]
fn softmax_stack_matches_naive_and_sums_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let blocks: Vec<Tensor> = (0..5).map(|_| random(&[3, 4], &mut rng)).collect();
    let out = softmax_values(blocks.clone());
    for i in 0..12 {
        let z: f64 = blocks.iter().map(|b| b.data()[i].exp()).sum();
        let total: f64 = out.iter().map(|a| a.data()[i]).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for (b, a) in blocks.iter().zip(&out) {
            assert!((a.data()[i] - b.data()[i].exp() / z).abs() < 1e-12);
            assert!(a.data()[i] > 0.0 && a.data()[i] < 1.0);
        }
    }
}

#[test]
fn softmax_is_stable_for_large_logits() {
    let out = softmax_values(vec![Tensor::scalar(1000.0), Tensor::scalar(999.0)]);
    assert!(out[0].data()[0].is_finite());
    assert!((out[0].data()[0] + out[1].data()[0] - 1.0).abs() < 1e-12);
}

#[test]
fn non_finite_values_surface_as_errors() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap()).unwrap();
    assert!(g.log(x).is_err());
    assert!(g.leaf(Tensor::new(vec![1], vec![f64::NAN]).unwrap()).is_err());
}

#[test]
fn backward_requires_scalar_seed() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[3])).unwrap();
    let y = g.relu(x).unwrap();
    assert!(g.backward(y).is_err());
}

/// Weighted reduction so every output position has a distinct adjoint.
fn weighted_sum(g: &mut msaf::Graph, y: msaf::Var, seed: u64) -> msaf::Result<msaf::Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let w = g.constant(Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0)))?;
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

fn check(inputs: Vec<Tensor>, f: impl Fn(&mut msaf::Graph, &[msaf::Var]) -> msaf::Result<msaf::Var>) {
    let r = grad_check(f, &inputs, DEFAULT_EPS).unwrap();
    assert!(
        r.max_rel_error < DOUBLE_TOLERANCE,
        "rel error {} at {:?}",
        r.max_rel_error,
        r.worst
    );
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let r = &mut rng;
    check(vec![random(&[3, 4], r), random(&[2, 4], r), random(&[2], r)], |g, v| {
        let y = g.affine(v[0], v[1], v[2])?;
        weighted_sum(g, y, 1)
    });
    check(vec![random(&[2, 3], r), random(&[2, 3], r)], |g, v| {
        let a = g.add(v[0], v[1])?;
        let m = g.mul(a, v[1])?;
        let s = g.scale_shift(m, -1.5, 0.2)?;
        weighted_sum(g, s, 2)
    });
    check(vec![random(&[2, 5], r)], |g, v| {
        let y = g.tanh(v[0])?;
        let z = g.relu(y)?;
        let e = g.scale_shift(v[0], 0.5, 2.0)?;
        let l = g.log(e)?;
        let s = g.add(z, l)?;
        weighted_sum(g, s, 3)
    });
    check(vec![random(&[2, 3, 4], r)], |g, v| {
        let m = g.mean_axis(v[0], 1)?;
        weighted_sum(g, m, 4)
    });
    check(vec![random(&[2, 3, 4], r)], |g, v| {
        let p = g.permute(v[0], &[2, 0, 1])?;
        let s = g.slice_axis(p, 0, 1, 2)?;
        let q = g.reshape(s, &[12])?;
        weighted_sum(g, q, 5)
    });
    check(vec![random(&[2, 3], r), random(&[2, 1], r)], |g, v| {
        let c = g.concat(&[v[0], v[1], v[0]], 1)?;
        weighted_sum(g, c, 6)
    });
    check(vec![random(&[3, 4], r)], |g, v| {
        let a = g.softmax(v[0], 0)?;
        let b = g.log_softmax(v[0], 1)?;
        let s = g.add(a, b)?;
        weighted_sum(g, s, 7)
    });
    check(vec![random(&[2, 3, 4], r), random(&[2, 3], r)], |g, v| {
        let y = g.mul_channel(v[0], v[1])?;
        weighted_sum(g, y, 8)
    });
    check(vec![random(&[4, 3], r), random(&[3], r), random(&[3], r)], |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], None)?;
        weighted_sum(g, y, 9)
    });
    check(vec![random(&[4, 3], r), random(&[3], r), random(&[3], r)], |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], Some((&[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0])))?;
        weighted_sum(g, y, 10)
    });
    check(
        vec![random(&[2, 2, 4, 5], r), random(&[3, 2, 2, 3], r), random(&[3], r)],
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2])?;
            weighted_sum(g, y, 11)
        },
    );
    check(vec![random(&[3, 4], r)], |g, v| g.cross_entropy(v[0], &[0, 3, 1]));
    check(vec![random(&[3, 1], r)], |g, v| g.mse(v[0], &[0.5, -0.25, 1.0]));
    check(vec![random(&[3, 2], r), random(&[3, 2], r)], |g, v| {
        let st = g.stack(&[v[0], v[1]])?;
        let a = g.softmax(st, 0)?;
        weighted_sum(g, a, 12)
    });
}

#[test]
fn conv2d_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (x, w, b) = (
        random(&[1, 2, 3, 4], &mut rng),
        random(&[2, 2, 2, 2], &mut rng),
        random(&[2], &mut rng),
    );
    let mut g = Graph::new();
    let (xv, wv, bv) = (
        g.leaf(x.clone()).unwrap(),
        g.leaf(w.clone()).unwrap(),
        g.leaf(b.clone()).unwrap(),
    );
    let y = g.conv2d(xv, wv, bv).unwrap();
    let y = g.value(y);
    assert_eq!(y.shape(), &[1, 2, 2, 3]);
    for co in 0..2 {
        for oy in 0..2 {
            for ox in 0..3 {
                let mut acc = b.at(&[co]);
                for ci in 0..2 {
                    for ky in 0..2 {
                        for kx in 0..2 {
                            acc += w.at(&[co, ci, ky, kx]) * x.at(&[0, ci, oy + ky, ox + kx]);
                        }
                    }
                }
                assert!((y.at(&[0, co, oy, ox]) - acc).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #[test]
    fn permute_round_trips(d0 in 1usize..4, d1 in 1usize..4, d2 in 1usize..4, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random(&[d0, d1, d2], &mut rng);
        let mut g = Graph::new();
        let v = g.leaf(t.clone()).unwrap();
        let p = g.permute(v, &[1, 2, 0]).unwrap();
        let back = g.permute(p, &[2, 0, 1]).unwrap();
        prop_assert_eq!(g.value(back), &t);
        prop_assert_eq!(g.value(p).at(&[0, 0, d0 - 1]), t.at(&[d0 - 1, 0, 0]));
    }

    #[test]
    fn softmax_stack_outputs_form_a_simplex(n in 1usize..6, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks: Vec<Tensor> = (0..n).map(|_| Tensor::from_fn(&[2, 3], |_| rng.random_range(-5.0..5.0))).collect();
        let out = softmax_values(blocks);
        for i in 0..6 {
            let s: f64 = out.iter().map(|a| a.data()[i]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            for a in &out {
                prop_assert!(a.data()[i] > 0.0 && a.data()[i] <= 1.0);
            }
        }
    }
}
