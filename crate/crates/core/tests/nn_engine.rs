#[path = "support/gradcheck.rs"]
mod gradcheck;

use std::collections::HashSet;

use orsense_core::models::{build_discovery_fcn, build_impact_cnn, BANDS};
use orsense_core::nn::{
    backward, backward_from_output_grad, decode_weights, encode_weights, forward, predict,
    LayerKind, Mode, OptimizerConfig, OptimizerState, Tensor, WeightSet,
};
use orsense_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn analytic_gradients_match_central_differences() {
    let mut covered = HashSet::new();
    for seed in 0..12u64 {
        let case = gradcheck::random_case(seed);
        covered.extend(gradcheck::kinds(&case.spec).iter().map(|k| format!("{k:?}")));
        let err = gradcheck::max_relative_error(&case, seed);
        assert!(err < gradcheck::REL_TOL, "seed {seed}: rel err {err:e} for {:?}", case.spec.layers);
    }
    for kind in [
        LayerKind::Convolution,
        LayerKind::MaxPool,
        LayerKind::Dense,
        LayerKind::Dropout,
        LayerKind::Flatten,
        LayerKind::Softmax,
    ] {
        assert!(covered.contains(&format!("{kind:?}")), "{kind:?} never exercised");
    }
}

#[test]
fn zero_output_gradient_gives_zero_parameter_gradients() {
    let case = gradcheck::random_case(1);
    let w: WeightSet<f64> = WeightSet::glorot(&case.spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let trace = forward(&case.spec, &w, &case.input, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let zero = Tensor::zeros(&trace.output_shape());
    let g = backward_from_output_grad(&case.spec, &w, &trace, &zero).unwrap();
    assert!(g.tensors().all(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn stale_trace_is_a_usage_error() {
    let case = gradcheck::random_case(0);
    let mut w: WeightSet<f64> = WeightSet::glorot(&case.spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let trace = forward(&case.spec, &w, &case.input, Mode::Train, &mut rng).unwrap();
    let targets = Tensor::filled(&trace.output_shape(), 0.0);
    let (_, g) = backward(&case.spec, &w, &trace, &targets).unwrap();
    OptimizerState::new(OptimizerConfig::default(), &w).step(&mut w, &g).unwrap();
    assert!(matches!(backward(&case.spec, &w, &trace, &targets), Err(Error::Usage(_))));
}

#[test]
fn dropout_is_identity_in_eval_and_inverted_in_train() {
    let case = gradcheck::random_case(2);
    let w: WeightSet<f64> = WeightSet::glorot(&case.spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let a = forward(&case.spec, &w, &case.input, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = forward(&case.spec, &w, &case.input, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    assert_eq!(a.output_data(), b.output_data());

    // A lone dropout layer: kept units scaled by 1/(1-rate), the rest zero.
    use orsense_core::nn::{LayerSpec, NetworkSpec};
    let spec = NetworkSpec::new(1, Some((10, 10)), vec![LayerSpec::Dropout { rate: 0.5 }]);
    let w: WeightSet<f64> = WeightSet::zeros(&spec).unwrap();
    let x = Tensor::filled(&[1, 10, 10, 1], 3.0);
    let t = forward(&spec, &w, &x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert!(t.output_data().iter().all(|&v| v == 0.0 || v == 6.0));
    assert!(t.output_data().iter().any(|&v| v == 0.0));
}

#[test]
fn training_steps_are_bit_reproducible() {
    let spec = build_impact_cnn();
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut w: WeightSet = WeightSet::glorot(&spec, &mut rng).unwrap();
        let mut opt = OptimizerState::new(OptimizerConfig::default(), &w);
        for _ in 0..3 {
            let x: Vec<f32> = (0..4 * 21 * 21 * BANDS).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = Tensor::from_vec(&[4, 21, 21, BANDS], x).unwrap();
            let mut y = vec![0.0f32; 12];
            for i in 0..4 {
                y[i * 3 + i % 3] = 1.0;
            }
            let y = Tensor::from_vec(&[4, 3], y).unwrap();
            let trace = forward(&spec, &w, &x, Mode::Train, &mut rng).unwrap();
            let (_, g) = backward(&spec, &w, &trace, &y).unwrap();
            opt.step(&mut w, &g).unwrap();
        }
        encode_weights(&spec, &w).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn discovery_net_output_shapes() {
    let spec = build_discovery_fcn();
    let w: WeightSet = WeightSet::glorot(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let (out, shape) = predict(&spec, &w, &vec![0.1f32; 201 * 201 * BANDS], 201, 201).unwrap();
    assert_eq!(shape.dims(), vec![1, 1, 2]);
    assert!((out[0] + out[1] - 1.0).abs() < 1e-6);
    let (_, shape) = predict(&spec, &w, &vec![0.1f32; 228 * 228 * BANDS], 228, 228).unwrap();
    assert_eq!(shape.dims(), vec![2, 2, 2]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn fcn_softmax_sums_to_one_everywhere(seed in any::<u64>(), extra in 0usize..40) {
        let spec = build_discovery_fcn();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: WeightSet = WeightSet::glorot(&spec, &mut rng).unwrap();
        let n = 201 + extra;
        let img: Vec<f32> = (0..n * n * BANDS).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (out, _) = predict(&spec, &w, &img, n, n).unwrap();
        for cell in out.chunks(2) {
            prop_assert!(cell.iter().all(|&p| p > 0.0));
            prop_assert!((cell[0] as f64 + cell[1] as f64 - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_forward_is_deterministic(seed in any::<u64>()) {
        let spec = build_impact_cnn();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: WeightSet = WeightSet::glorot(&spec, &mut rng).unwrap();
        let x: Vec<f32> = (0..2 * 21 * 21 * BANDS).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(&[2, 21, 21, BANDS], x).unwrap();
        let a = forward(&spec, &w, &x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = forward(&spec, &w, &x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        prop_assert_eq!(a.output_data(), b.output_data());
    }

    #[test]
    fn weight_files_round_trip_bit_exactly(seed in any::<u64>(), discovery in any::<bool>()) {
        let spec = if discovery { build_discovery_fcn() } else { build_impact_cnn() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w: WeightSet = WeightSet::glorot(&spec, &mut rng).unwrap();
        for t in w.tensors_mut() {
            for v in t.data_mut() {
                *v = f32::from_bits(rng.random::<u32>() & 0xbf7f_ffff);
            }
        }
        let bytes = encode_weights(&spec, &w).unwrap();
        let (spec2, w2) = decode_weights(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(&spec2, &spec);
        for (a, b) in w.tensors().zip(w2.tensors()) {
            prop_assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
    }
}
