#![allow(dead_code)]

use rand::Rng as _;
use rnnadv::attacks::project;
use rnnadv::classifier::{self, ClassifierSpec, ClassifierWeights, Layer, LossKind};
use rnnadv::learned::{rnn_step, HiddenState, RnnOptimizerParams, StepWeights, UnrollRecord};
use rnnadv::seed;
use rnnadv::Tensor;

/// conv-tanh-maxpool-dense-tanh-dense on 1x6x6 inputs; smooth almost everywhere.
pub fn tiny_spec() -> ClassifierSpec {
    ClassifierSpec {
        input_shape: [1, 6, 6],
        num_classes: 3,
        layers: vec![
            Layer::conv(3, 3),
            Layer::Tanh,
            Layer::MaxPool { size: 2 },
            Layer::Flatten,
            Layer::dense(4),
            Layer::Tanh,
            Layer::dense(3),
        ],
    }
}

/// Dense-only tanh net on 1x4x4 inputs.
pub fn mlp_spec() -> ClassifierSpec {
    ClassifierSpec {
        input_shape: [1, 4, 4],
        num_classes: 3,
        layers: vec![Layer::Flatten, Layer::dense(6), Layer::Tanh, Layer::dense(3)],
    }
}

/// The same conv net with relu, as used for feasibility checks.
pub fn relu_spec() -> ClassifierSpec {
    ClassifierSpec {
        input_shape: [1, 6, 6],
        num_classes: 3,
        layers: vec![
            Layer::conv(3, 3),
            Layer::Relu,
            Layer::MaxPool { size: 2 },
            Layer::Flatten,
            Layer::dense(3),
        ],
    }
}

/// Weights scaled up from the default init so losses and gradients are not tiny.
pub fn weights(spec: &ClassifierSpec, seed: u64, scale: f64) -> ClassifierWeights {
    let w = ClassifierWeights::init(spec, seed).unwrap();
    let params = w.params().iter().map(|p| p.scale(scale)).collect();
    ClassifierWeights::from_params(spec, params).unwrap()
}

/// Pixels uniform in `[lo, hi]` and uniform labels.
pub fn batch(spec: &ClassifierSpec, n: usize, seed: u64, lo: f64, hi: f64) -> (Tensor, Vec<usize>) {
    let mut rng = seed::rng(seed);
    let [c, h, w] = spec.input_shape;
    let x = (0..n * c * h * w).map(|_| rng.random_range(lo..=hi)).collect();
    let y = (0..n).map(|_| rng.random_range(0..spec.num_classes)).collect();
    (Tensor::new(vec![n, c, h, w], x).unwrap(), y)
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.sub(b).unwrap();
    let n = |t: &Tensor| t.dot(t).unwrap().sqrt();
    n(&diff) / n(a).max(n(b)).max(1e-12)
}

/// Meta-loss recomputed from scratch for `params`, replaying the unroll with
/// the recorded input gradients held fixed and scoring every iterate with
/// the true classifier loss.
pub fn frozen_g_meta_loss(
    weights: &ClassifierWeights,
    params: &RnnOptimizerParams,
    record: &UnrollRecord,
    kind: &LossKind,
    step_weights: &StepWeights,
) -> f64 {
    let steps = record.steps();
    let w = step_weights.weights(steps).unwrap();
    let mut cur = record.x0.clone();
    let mut state = HiddenState::zeros(record.x.shape(), params.hidden_size());
    let mut total = 0.0;
    for t in 0..steps {
        let (delta, next) = rnn_step(params, &record.grads[t], &state).unwrap();
        state = next;
        cur = project(&record.x, &cur.add(&delta).unwrap(), record.epsilon).unwrap();
        total += w[t] * classifier::loss(weights, &cur, kind).unwrap();
    }
    total
}

/// Central finite differences of [`frozen_g_meta_loss`] over every entry of
/// every optimizer tensor.
pub fn meta_grad_oracle(
    weights: &ClassifierWeights,
    params: &RnnOptimizerParams,
    record: &UnrollRecord,
    kind: &LossKind,
    step_weights: &StepWeights,
    h: f64,
) -> Vec<Tensor> {
    let n = params.tensors().len();
    (0..n)
        .map(|k| {
            let base = params.tensors()[k].clone();
            let mut out = vec![0.0; base.len()];
            for (i, o) in out.iter_mut().enumerate() {
                let eval = |delta: f64| {
                    let mut p = params.clone();
                    let mut bump = vec![0.0; base.len()];
                    bump[i] = delta;
                    let grads: Vec<Tensor> = (0..n)
                        .map(|j| {
                            if j == k {
                                Tensor::new(base.shape().to_vec(), bump.clone()).unwrap()
                            } else {
                                Tensor::zeros(params.tensors()[j].shape().to_vec())
                            }
                        })
                        .collect();
                    p.apply_update(1.0, &grads).unwrap();
                    frozen_g_meta_loss(weights, &p, record, kind, step_weights)
                };
                *o = (eval(h) - eval(-h)) / (2.0 * h);
            }
            Tensor::new(base.shape().to_vec(), out).unwrap()
        })
        .collect()
}

/// Concatenates tensors into one flat vector for norm-wise comparison.
pub fn flat(ts: &[Tensor]) -> Tensor {
    Tensor::from_vec(ts.iter().flat_map(|t| t.data().iter().copied()).collect())
}
