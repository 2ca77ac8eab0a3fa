// Central finite-difference oracle for the engine's analytic gradients.
// Shared by the core test suite and the acceptance suite.

use orsense_core::nn::{
    backward, backward_from_output_grad, forward, Activation, LayerKind, LayerSpec, Mode,
    NetworkSpec, Padding, Rounding, Tensor, WeightSet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
// Denominator floor so gradients that are zero on both sides do not divide by zero.
const FLOOR: f64 = 1e-6;

pub struct Case {
    pub spec: NetworkSpec,
    pub input: Tensor<f64>,
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, xs: &[T]) -> T {
    xs[rng.random_range(0..xs.len())]
}

fn random_conv(rng: &mut ChaCha8Rng, filters: usize, activation: Activation) -> LayerSpec {
    let k = rng.random_range(1..=3);
    let s = pick(rng, &[1, 1, 2]);
    LayerSpec::Convolution {
        filters,
        kernel: (k, k),
        stride: (s, s),
        padding: pick(rng, &[Padding::Same, Padding::Valid]),
        activation,
    }
}

fn random_pool(rng: &mut ChaCha8Rng) -> LayerSpec {
    let k = rng.random_range(2..=3);
    LayerSpec::maxpool(k, pick(rng, &[1, 2, k]), pick(rng, &[Rounding::Floor, Rounding::Ceil]))
}

/// A random net of at most five layers on an input of at most 9×9×3.
pub fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let h = rng.random_range(4..=9);
        let w = rng.random_range(4..=9);
        let c = rng.random_range(1..=3);
        let classes = rng.random_range(2..=3);
        let hidden = pick(&mut rng, &[Activation::Relu, Activation::Linear]);
        let filters = rng.random_range(2..=4);
        let layers = match seed % 4 {
            // Fully convolutional, softmax folded into the last conv.
            0 => vec![
                random_conv(&mut rng, filters, hidden),
                random_pool(&mut rng),
                LayerSpec::Dropout { rate: 0.5 },
                random_conv(&mut rng, classes, Activation::Softmax),
            ],
            // Classifier head.
            1 => vec![
                random_conv(&mut rng, filters, hidden),
                random_pool(&mut rng),
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    units: rng.random_range(3..=6),
                    activation: Activation::Relu,
                },
                LayerSpec::Dense {
                    units: classes,
                    activation: Activation::Softmax,
                },
            ],
            // Separate softmax layer after linear logits.
            2 => vec![
                random_conv(&mut rng, 3, Activation::Relu),
                LayerSpec::Flatten,
                LayerSpec::Dropout { rate: 0.3 },
                LayerSpec::Dense {
                    units: classes,
                    activation: Activation::Linear,
                },
                LayerSpec::Softmax,
            ],
            // No softmax at the end: checked through a random linear loss.
            _ => vec![
                random_pool(&mut rng),
                random_conv(&mut rng, 3, hidden),
                LayerSpec::Softmax,
                random_conv(&mut rng, 2, Activation::Linear),
            ],
        };
        let spec = NetworkSpec::new(c, Some((h, w)), layers);
        if spec.validate().is_err() || spec.resolve(h, w).is_err() {
            continue;
        }
        let batch = rng.random_range(1..=2);
        let data = (0..batch * h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let input = Tensor::from_vec(&[batch, h, w, c], data).unwrap();
        return Case { spec, input };
    }
}

pub fn kinds(spec: &NetworkSpec) -> Vec<LayerKind> {
    spec.layers.iter().map(|l| l.kind()).collect()
}

/// Largest relative deviation between analytic and central-difference
/// gradients over every trainable scalar of the case.
pub fn max_relative_error(case: &Case, seed: u64) -> f64 {
    let spec = &case.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut weights: WeightSet<f64> = WeightSet::glorot(spec, &mut rng).unwrap();
    // Nonzero biases keep activations off the ReLU kink.
    for t in weights.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let dropout_seed = rng.random::<u64>();
    let run = |w: &WeightSet<f64>| {
        let mut r = ChaCha8Rng::seed_from_u64(dropout_seed);
        forward(spec, w, &case.input, Mode::Train, &mut r).unwrap()
    };

    let trace = run(&weights);
    let out_len = trace.output_data().len();
    let softmax_end = spec.ends_in_softmax();
    let probe: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let targets = {
        let classes = *trace.output_shape().last().unwrap();
        let mut t = vec![0.0; out_len];
        for g in 0..out_len / classes {
            t[g * classes + rng.random_range(0..classes)] = 1.0;
        }
        Tensor::from_vec(&trace.output_shape(), t).unwrap()
    };

    let loss_of = |w: &WeightSet<f64>| -> f64 {
        let t = run(w);
        let out = t.output_data();
        if softmax_end {
            let classes = *t.output_shape().last().unwrap();
            let groups = out.len() / classes;
            -out.iter()
                .zip(targets.data())
                .map(|(&p, &y)| y * p.max(1e-300).ln())
                .sum::<f64>()
                / groups as f64
        } else {
            out.iter().zip(&probe).map(|(a, b)| a * b).sum()
        }
    };

    let analytic = if softmax_end {
        backward(spec, &weights, &trace, &targets).unwrap().1
    } else {
        let g = Tensor::from_vec(&trace.output_shape(), probe.clone()).unwrap();
        backward_from_output_grad(spec, &weights, &trace, &g).unwrap()
    };
    let analytic: Vec<Vec<f64>> = analytic.tensors().map(|t| t.data().to_vec()).collect();

    let mut worst = 0.0f64;
    let n_tensors = analytic.len();
    for ti in 0..n_tensors {
        for k in 0..analytic[ti].len() {
            let mut plus = weights.clone();
            plus.tensors_mut().nth(ti).unwrap().data_mut()[k] += STEP;
            let mut minus = weights.clone();
            minus.tensors_mut().nth(ti).unwrap().data_mut()[k] -= STEP;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * STEP);
            let a = analytic[ti][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}
