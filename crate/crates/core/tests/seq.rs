mod common;

use common::{perturb_params, random_tensor};
use msaf::autodiff::Mode;
use msaf::msaf::{init_msaf, msaf_forward, MsafConfig, MsafParams};
use msaf::seq::{plan_segments, seq_msaf_forward};
use msaf::{AxisSpec, ModalityFeature, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn seq_feature(t: Tensor, m: usize) -> ModalityFeature {
    ModalityFeature::new(t, AxisSpec::sequence_major(), m).unwrap()
}

fn param_sets(channels: &[usize], config: &MsafConfig, q: usize, seed: u64) -> Vec<MsafParams> {
    let mut r = rng(seed);
    (0..q)
        .map(|_| {
            let mut p = init_msaf(channels, config, &mut r).unwrap();
            perturb_params(&mut p, &mut r);
            p
        })
        .collect()
}

fn inputs(lengths: &[usize], channels: &[usize], batch: usize, seed: u64) -> Vec<ModalityFeature> {
    let mut r = rng(seed);
    lengths
        .iter()
        .zip(channels)
        .enumerate()
        .map(|(m, (&s, &c))| seq_feature(random_tensor(&[batch, s, c], &mut r), m))
        .collect()
}

/// Slices `[B, T, C]` along time.
fn slice_time(t: &Tensor, start: usize, len: usize) -> Tensor {
    let s = t.shape();
    let (c, mut data) = (s[2], Vec::new());
    for b in 0..s[0] {
        let row = (b * s[1] + start) * c;
        data.extend_from_slice(&t.data()[row..row + len * c]);
    }
    Tensor::new(vec![s[0], len, c], data).unwrap()
}

#[test]
fn single_segment_is_bit_exact_with_plain_msaf() {
    let config = MsafConfig::new(2, 2).with_lambda(0.2).with_dropout(0.3);
    let params = param_sets(&[3, 4], &config, 1, 1);
    let x = inputs(&[5, 7], &[3, 4], 3, 2);
    for mode in [Mode::Train, Mode::Eval] {
        let a = seq_msaf_forward(&x, &params, &config, mode, &mut rng(9)).unwrap();
        let b = msaf_forward(&x, &params[0], &config, mode, &mut rng(9)).unwrap();
        for (p, q) in a.features.iter().zip(&b.features) {
            assert_eq!(p.tensor, q.tensor);
        }
        assert_eq!(a.attention.len(), 1);
        assert_eq!(a.attention[0].mask, b.attention.mask);
    }
}

#[test]
fn lambda_one_in_every_segment_is_identity() {
    let config = MsafConfig::new(2, 1).with_lambda(1.0).with_segments(2);
    let params = param_sets(&[4, 2], &config, 2, 3);
    let x = inputs(&[6, 5], &[4, 2], 2, 4);
    let out = seq_msaf_forward(&x, &params, &config, Mode::Train, &mut rng(0)).unwrap();
    for (a, b) in out.features.iter().zip(&x) {
        assert_eq!(a.tensor, b.tensor);
    }
}

#[test]
fn matches_manual_slicing_composition() {
    let q = 2;
    let config = MsafConfig::new(2, 2).with_lambda(0.3).with_segments(q);
    let lengths = [7, 4];
    let params = param_sets(&[3, 2], &config, q, 5);
    let x = inputs(&lengths, &[3, 2], 3, 6);
    let plan = plan_segments(&lengths, q).unwrap();
    for mode in [Mode::Train, Mode::Eval] {
        let out = seq_msaf_forward(&x, &params, &config, mode, &mut rng(0)).unwrap();
        let single = MsafConfig {
            segments: 1,
            ..config.clone()
        };
        for j in 0..q {
            let seg: Vec<_> = x
                .iter()
                .enumerate()
                .map(|(m, f)| {
                    let (start, len) = plan.ranges[m][j];
                    seq_feature(slice_time(&f.tensor, start, len), m)
                })
                .collect();
            let manual = msaf_forward(&seg, &params[j], &single, mode, &mut rng(0)).unwrap();
            for (m, f) in manual.features.iter().enumerate() {
                let (start, len) = plan.ranges[m][j];
                let got = slice_time(&out.features[m].tensor, start, len);
                assert!(got.max_abs_diff(&f.tensor) < 1e-12);
            }
        }
    }
}

#[test]
fn wrong_number_of_parameter_sets_is_rejected() {
    let config = MsafConfig::new(2, 1).with_segments(3);
    let params = param_sets(&[2, 2], &config, 2, 1);
    let x = inputs(&[6, 6], &[2, 2], 2, 1);
    let err = seq_msaf_forward(&x, &params, &config, Mode::Eval, &mut rng(0)).unwrap_err();
    assert!(err.to_string().contains("3 segments"), "{err}");
}

#[test]
fn short_sequence_is_rejected() {
    let config = MsafConfig::new(2, 1).with_segments(4);
    let params = param_sets(&[2, 2], &config, 4, 1);
    let x = inputs(&[6, 3], &[2, 2], 2, 1);
    let err = seq_msaf_forward(&x, &params, &config, Mode::Eval, &mut rng(0)).unwrap_err();
    assert!(err.to_string().contains("modality 1"), "{err}");
}

#[test]
fn features_without_sequence_axis_are_rejected() {
    let config = MsafConfig::new(2, 1).with_segments(2);
    let params = param_sets(&[2, 2], &config, 2, 1);
    let f = |m| ModalityFeature::new(Tensor::ones(&[2, 2, 4]), AxisSpec::channels_first(1), m).unwrap();
    assert!(seq_msaf_forward(&[f(0), f(1)], &params, &config, Mode::Eval, &mut rng(0)).is_err());
}

#[test]
fn perturbing_one_segment_leaves_others_untouched() {
    let q = 3;
    let config = MsafConfig::new(2, 2).with_lambda(0.1).with_segments(q);
    let lengths = [9, 7];
    let params = param_sets(&[2, 3], &config, q, 8);
    let x = inputs(&lengths, &[2, 3], 3, 9);
    let plan = plan_segments(&lengths, q).unwrap();
    let base = seq_msaf_forward(&x, &params, &config, Mode::Eval, &mut rng(0)).unwrap();
    for j in 0..q {
        let mut y = x.clone();
        let mut r = rng(j as u64 + 100);
        for (m, f) in y.iter_mut().enumerate() {
            let (start, len) = plan.ranges[m][j];
            let s = f.tensor.shape().to_vec();
            let data = f.tensor.data_mut();
            for b in 0..s[0] {
                for t in start..start + len {
                    for c in 0..s[2] {
                        data[(b * s[1] + t) * s[2] + c] += r.random_range(-1.0..1.0);
                    }
                }
            }
        }
        let out = seq_msaf_forward(&y, &params, &config, Mode::Eval, &mut rng(0)).unwrap();
        for (m, (a, b)) in out.features.iter().zip(&base.features).enumerate() {
            for k in 0..q {
                let (start, len) = plan.ranges[m][k];
                let pa = slice_time(&a.tensor, start, len);
                let pb = slice_time(&b.tensor, start, len);
                if k == j {
                    assert!(pa.max_abs_diff(&pb) > 0.0);
                } else {
                    assert_eq!(pa, pb, "segment {k} changed after perturbing segment {j}");
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn plan_is_a_contiguous_cover(lengths in proptest::collection::vec(1usize..40, 1..4), q in 1usize..8) {
        prop_assume!(lengths.iter().all(|&s| s >= q));
        let plan = plan_segments(&lengths, q).unwrap();
        for (m, &s) in lengths.iter().enumerate() {
            let ranges = &plan.ranges[m];
            prop_assert_eq!(ranges.len(), q);
            let mut next = 0;
            for &(start, len) in ranges {
                prop_assert_eq!(start, next);
                prop_assert!(len >= s / q);
                next += len;
            }
            prop_assert_eq!(next, s);
        }
    }

    #[test]
    fn reassembled_lengths_match_inputs(s1 in 4usize..12, s2 in 4usize..12, q in 1usize..5, seed in 0u64..500) {
        let config = MsafConfig::new(2, 1).with_lambda(0.4).with_segments(q);
        let params = param_sets(&[3, 2], &config, q, seed);
        let x = inputs(&[s1, s2], &[3, 2], 2, seed);
        let out = seq_msaf_forward(&x, &params, &config, Mode::Train, &mut rng(seed)).unwrap();
        for (a, b) in out.features.iter().zip(&x) {
            prop_assert_eq!(a.tensor.shape(), b.tensor.shape());
        }
        prop_assert_eq!(out.attention.len(), q);
    }
}
