//! Small image classifiers: layer specs, weights, forward pass, the two loss
//! kinds and checkpoint persistence.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradBundle, Tape, Var};
use crate::checkpoint::{Container, Kind};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    },
    Relu,
    Tanh,
    MaxPool {
        size: usize,
    },
    Flatten,
    Dense {
        out_features: usize,
        bias: bool,
    },
}

impl Layer {
    pub fn conv(out_channels: usize, kernel: usize) -> Self {
        Layer::Conv {
            out_channels,
            kernel,
            stride: 1,
            bias: true,
        }
    }

    pub fn dense(out_features: usize) -> Self {
        Layer::Dense {
            out_features,
            bias: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    /// `[C, H, W]`
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<Layer>,
}

impl ClassifierSpec {
    /// conv(8,3x3)-relu-maxpool(2)-conv(16,3x3)-relu-maxpool(2)-flatten-dense(64)-relu-dense(10)
    pub fn desk_default() -> Self {
        Self {
            input_shape: [1, 28, 28],
            num_classes: 10,
            layers: vec![
                Layer::conv(8, 3),
                Layer::Relu,
                Layer::MaxPool { size: 2 },
                Layer::conv(16, 3),
                Layer::Relu,
                Layer::MaxPool { size: 2 },
                Layer::Flatten,
                Layer::dense(64),
                Layer::Relu,
                Layer::dense(10),
            ],
        }
    }

    /// The four-convolution MNIST network commonly used with TRADES; much
    /// slower than [`ClassifierSpec::desk_default`].
    pub fn four_conv_mnist() -> Self {
        Self {
            input_shape: [1, 28, 28],
            num_classes: 10,
            layers: vec![
                Layer::conv(32, 3),
                Layer::Relu,
                Layer::conv(32, 3),
                Layer::Relu,
                Layer::MaxPool { size: 2 },
                Layer::conv(64, 3),
                Layer::Relu,
                Layer::conv(64, 3),
                Layer::Relu,
                Layer::MaxPool { size: 2 },
                Layer::Flatten,
                Layer::dense(200),
                Layer::Relu,
                Layer::dense(200),
                Layer::Relu,
                Layer::dense(10),
            ],
        }
    }

    /// Per-layer output shapes (without the batch axis). Fails if the layers
    /// do not compose or the final output is not `[num_classes]`.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::Config(format!("layer {i} ({layer:?}): {msg}"));
            shape = match (layer, shape.as_slice()) {
                (
                    Layer::Conv {
                        out_channels,
                        kernel,
                        stride,
                        ..
                    },
                    &[_, h, w],
                ) => {
                    if *kernel == 0 || *stride == 0 || *kernel > h || *kernel > w || *out_channels == 0 {
                        return Err(bad(format!("does not fit input {shape:?}")));
                    }
                    vec![*out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1]
                }
                (Layer::MaxPool { size }, &[c, h, w]) => {
                    if *size == 0 || *size > h || *size > w {
                        return Err(bad(format!("does not fit input {shape:?}")));
                    }
                    vec![c, h / size, w / size]
                }
                (Layer::Conv { .. } | Layer::MaxPool { .. }, s) => {
                    return Err(bad(format!("needs a [C, H, W] input, got {s:?}")))
                }
                (Layer::Relu | Layer::Tanh, s) => s.to_vec(),
                (Layer::Flatten, s) => vec![s.iter().product()],
                (Layer::Dense { out_features, .. }, &[_]) => {
                    if *out_features == 0 {
                        return Err(bad("zero output features".into()));
                    }
                    vec![*out_features]
                }
                (Layer::Dense { .. }, s) => {
                    return Err(bad(format!("needs a flat input, got {s:?}")))
                }
            };
            out.push(shape.clone());
        }
        if shape != [self.num_classes] {
            return Err(Error::Config(format!(
                "network output {shape:?} does not match {} classes",
                self.num_classes
            )));
        }
        Ok(out)
    }

    /// Names and shapes of the trainable tensors, in storage order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let shapes = self.layer_shapes()?;
        let mut prev = self.input_shape.to_vec();
        let mut out = Vec::new();
        for (i, (layer, shape)) in self.layers.iter().zip(&shapes).enumerate() {
            match layer {
                Layer::Conv {
                    out_channels,
                    kernel,
                    bias,
                    ..
                } => {
                    out.push((format!("layer{i}.weight"), vec![*out_channels, prev[0], *kernel, *kernel]));
                    if *bias {
                        out.push((format!("layer{i}.bias"), vec![*out_channels]));
                    }
                }
                Layer::Dense { out_features, bias } => {
                    out.push((format!("layer{i}.weight"), vec![*out_features, prev[0]]));
                    if *bias {
                        out.push((format!("layer{i}.bias"), vec![*out_features]));
                    }
                }
                _ => {}
            }
            prev = shape.clone();
        }
        Ok(out)
    }
}

/// Trainable parameters of a classifier built from a [`ClassifierSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights {
    spec: ClassifierSpec,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl ClassifierWeights {
    /// He-uniform weights, zero biases.
    pub fn init(spec: &ClassifierSpec, seed: u64) -> Result<Self> {
        let mut rng = seed::rng(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in spec.param_shapes()? {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let n = shape.iter().product();
                Tensor::raw(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
            };
            names.push(name);
            params.push(t);
        }
        Ok(Self {
            spec: spec.clone(),
            names,
            params,
        })
    }

    pub fn zeros(spec: &ClassifierSpec) -> Result<Self> {
        let (names, params) = spec
            .param_shapes()?
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(s)))
            .unzip();
        Ok(Self {
            spec: spec.clone(),
            names,
            params,
        })
    }

    pub fn from_params(spec: &ClassifierSpec, params: Vec<Tensor>) -> Result<Self> {
        let shapes = spec.param_shapes()?;
        if shapes.len() != params.len() {
            return Err(Error::Shape(format!(
                "spec has {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in shapes.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        Ok(Self {
            spec: spec.clone(),
            names: shapes.into_iter().map(|(n, _)| n).collect(),
            params,
        })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// In-place update `p += k * g` for every parameter, with `grads` in
    /// storage order.
    pub fn apply_update(&mut self, k: f64, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Shape("gradient count does not match parameters".into()));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.axpy(k, g)?;
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.bit_eq(b))
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.spec.input_shape || s[0] == 0 {
            return Err(Error::Shape(format!(
                "input {:?} does not match [B, {}, {}, {}]",
                s, self.spec.input_shape[0], self.spec.input_shape[1], self.spec.input_shape[2]
            )));
        }
        Ok(())
    }

    /// Records the forward pass of `x` on `tape` using `params` (one node per
    /// parameter tensor, in storage order). Returns `[B, num_classes]` logits.
    pub fn forward_on<'t>(&self, x: Var<'t>, params: &[Var<'t>]) -> Result<Var<'t>> {
        let mut h = x;
        let mut next = params.iter();
        let mut take = || {
            next.next()
                .copied()
                .ok_or_else(|| Error::Shape("too few parameter nodes".into()))
        };
        for layer in &self.spec.layers {
            h = match *layer {
                Layer::Conv { stride, bias, .. } => {
                    let w = take()?;
                    let y = h.conv2d(w, stride)?;
                    if bias {
                        y.add_channel_bias(take()?)?
                    } else {
                        y
                    }
                }
                Layer::Dense { bias, .. } => {
                    let w = take()?;
                    let y = h.matmul(w.transpose()?)?;
                    if bias {
                        y.add_channel_bias(take()?)?
                    } else {
                        y
                    }
                }
                Layer::Relu => h.relu(),
                Layer::Tanh => h.tanh(),
                Layer::MaxPool { size } => h.maxpool2d(size)?,
                Layer::Flatten => h.flatten()?,
            };
        }
        Ok(h)
    }

    fn const_params<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }
}

/// Which loss an attack or training step evaluates.
#[derive(Debug, Clone, PartialEq)]
pub enum LossKind {
    /// Softmax cross-entropy against integer labels.
    CrossEntropy(Vec<usize>),
    /// `KL(softmax(reference) || softmax(f(x)))` with fixed reference logits.
    KlToReference(Tensor),
}

impl LossKind {
    pub fn batch_size(&self) -> usize {
        match self {
            LossKind::CrossEntropy(y) => y.len(),
            LossKind::KlToReference(r) => r.batch_size(),
        }
    }

    /// Per-example loss node (`[B]`) for recorded logits.
    pub fn per_example<'t>(&self, logits: Var<'t>) -> Result<Var<'t>> {
        match self {
            LossKind::CrossEntropy(labels) => logits.cross_entropy(labels),
            LossKind::KlToReference(reference) => {
                let r = logits.tape().constant(reference.clone());
                r.kl_div(logits)
            }
        }
    }

    /// Restricts the loss targets to a subset of batch rows.
    pub fn select_rows(&self, rows: &[usize]) -> LossKind {
        match self {
            LossKind::CrossEntropy(y) => LossKind::CrossEntropy(rows.iter().map(|&r| y[r]).collect()),
            LossKind::KlToReference(r) => LossKind::KlToReference(r.select_rows(rows)),
        }
    }
}

/// Logits `[B, num_classes]` for `x` of shape `[B, C, H, W]`.
pub fn forward(weights: &ClassifierWeights, x: &Tensor) -> Result<Tensor> {
    weights.check_input(x)?;
    let tape = Tape::new();
    let params = weights.const_params(&tape);
    let logits = weights.forward_on(tape.constant(x.clone()), &params)?;
    let out = logits.value();
    out.ensure_finite("logits")?;
    Ok(out)
}

pub fn predict(weights: &ClassifierWeights, x: &Tensor) -> Result<Vec<usize>> {
    let logits = forward(weights, x)?;
    Ok((0..logits.batch_size()).map(|i| argmax(logits.row(i))).collect())
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Batch-mean loss.
pub fn loss(weights: &ClassifierWeights, x: &Tensor, kind: &LossKind) -> Result<f64> {
    let losses = per_example_losses(weights, x, kind)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

pub fn per_example_losses(weights: &ClassifierWeights, x: &Tensor, kind: &LossKind) -> Result<Vec<f64>> {
    weights.check_input(x)?;
    if kind.batch_size() != x.batch_size() {
        return Err(Error::Shape(format!(
            "loss targets for {} rows, input has {}",
            kind.batch_size(),
            x.batch_size()
        )));
    }
    let tape = Tape::new();
    let params = weights.const_params(&tape);
    let logits = weights.forward_on(tape.constant(x.clone()), &params)?;
    let l = kind.per_example(logits)?.value();
    l.ensure_finite("loss")?;
    Ok(l.into_data())
}

/// Per-example losses and the gradient of their *sum* with respect to `x`,
/// so each row of the gradient is that example's own input gradient.
pub fn per_example_loss_and_input_grad(
    weights: &ClassifierWeights,
    x: &Tensor,
    kind: &LossKind,
) -> Result<(Vec<f64>, Tensor)> {
    weights.check_input(x)?;
    if kind.batch_size() != x.batch_size() {
        return Err(Error::Shape(format!(
            "loss targets for {} rows, input has {}",
            kind.batch_size(),
            x.batch_size()
        )));
    }
    let tape = Tape::new();
    let params = weights.const_params(&tape);
    let xv = tape.leaf(x.clone());
    let logits = weights.forward_on(xv, &params)?;
    let per = kind.per_example(logits)?;
    let losses = per.value();
    let grads = tape.backward(per.sum())?;
    let g = grads.wrt(xv);
    losses.ensure_finite("loss")?;
    g.ensure_finite("input gradient")?;
    Ok((losses.into_data(), g))
}

/// Batch-mean loss and its gradient with respect to the input (named `"input"`).
pub fn value_and_grad_input(weights: &ClassifierWeights, kind: &LossKind, x: &Tensor) -> Result<GradBundle> {
    let (losses, g) = per_example_loss_and_input_grad(weights, x, kind)?;
    let b = losses.len() as f64;
    Ok(GradBundle {
        loss: losses.iter().sum::<f64>() / b,
        grads: vec![("input".into(), g.scale(1.0 / b))],
    })
}

/// Batch-mean loss and its gradient with respect to every parameter tensor.
pub fn value_and_grad_params(weights: &ClassifierWeights, kind: &LossKind, x: &Tensor) -> Result<GradBundle> {
    weights.check_input(x)?;
    if kind.batch_size() != x.batch_size() {
        return Err(Error::Shape("loss targets do not match the batch".into()));
    }
    let tape = Tape::new();
    let params: Vec<Var<'_>> = weights.params.iter().map(|p| tape.leaf(p.clone())).collect();
    let logits = weights.forward_on(tape.constant(x.clone()), &params)?;
    let loss = kind.per_example(logits)?.mean();
    let grads = tape.backward(loss)?;
    let bundle = GradBundle {
        loss: loss.item(),
        grads: weights
            .names
            .iter()
            .zip(&params)
            .map(|(n, &p)| (n.clone(), grads.wrt(p)))
            .collect(),
    };
    bundle.ensure_finite()?;
    Ok(bundle)
}

pub fn save_checkpoint(weights: &ClassifierWeights, path: impl AsRef<Path>) -> Result<()> {
    let spec = serde_json::to_string(&weights.spec).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Container {
        kind: Kind::Classifier,
        spec,
        tensors: weights.params.clone(),
    }
    .write(path.as_ref())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ClassifierWeights> {
    let c = Container::read(path.as_ref(), Kind::Classifier)?;
    let spec: ClassifierSpec =
        serde_json::from_str(&c.spec).map_err(|e| Error::Checkpoint(format!("bad spec: {e}")))?;
    ClassifierWeights::from_params(&spec, c.tensors).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Loads a checkpoint and checks that it was saved for `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ClassifierSpec) -> Result<ClassifierWeights> {
    let w = load_checkpoint(path)?;
    if w.spec() != expected {
        return Err(Error::Checkpoint("checkpoint spec does not match the requested architecture".into()));
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_spec(classes: usize) -> ClassifierSpec {
        ClassifierSpec {
            input_shape: [classes, 1, 1],
            num_classes: classes,
            layers: vec![Layer::Flatten],
        }
    }

    fn logits_input(rows: &[&[f64]]) -> Tensor {
        let k = rows[0].len();
        Tensor::new(vec![rows.len(), k, 1, 1], rows.concat()).unwrap()
    }

    #[test]
    fn desk_default_composes() {
        let spec = ClassifierSpec::desk_default();
        let shapes = spec.layer_shapes().unwrap();
        assert_eq!(shapes[6], vec![400]);
        assert!(ClassifierSpec::four_conv_mnist().layer_shapes().is_ok());
        let w = ClassifierWeights::init(&spec, 0).unwrap();
        assert_eq!(w.num_params(), 80 + 1168 + 25664 + 650);
    }

    #[test]
    fn mismatched_spec_is_rejected() {
        let mut spec = ClassifierSpec::desk_default();
        spec.num_classes = 9;
        assert!(spec.layer_shapes().is_err());
        let bad = ClassifierSpec {
            input_shape: [1, 4, 4],
            num_classes: 2,
            layers: vec![Layer::dense(2)],
        };
        assert!(bad.layer_shapes().is_err());
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let spec = ClassifierSpec::desk_default();
        let w = ClassifierWeights::zeros(&spec).unwrap();
        let x = Tensor::full(vec![2, 1, 28, 28], 0.7);
        let z = forward(&w, &x).unwrap();
        assert_eq!(z.shape(), &[2, 10]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_inputs_give_identical_rows() {
        let spec = ClassifierSpec::desk_default();
        let w = ClassifierWeights::init(&spec, 3).unwrap();
        let one: Vec<f64> = (0..784).map(|i| ((i * 37) % 255) as f64 / 255.0).collect();
        let x = Tensor::new(vec![3, 1, 28, 28], [one.clone(), one.clone(), one].concat()).unwrap();
        let z = forward(&w, &x).unwrap();
        assert_eq!(z.row(0), z.row(1));
        assert_eq!(z.row(0), z.row(2));
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_classes() {
        let w = ClassifierWeights::zeros(&identity_spec(10)).unwrap();
        let x = logits_input(&[&[0.0; 10]]);
        let l = loss(&w, &x, &LossKind::CrossEntropy(vec![3])).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_class_cross_entropy_hand_value() {
        let w = ClassifierWeights::zeros(&identity_spec(2)).unwrap();
        let x = logits_input(&[&[2.0, 0.0]]);
        let l = loss(&w, &x, &LossKind::CrossEntropy(vec![0])).unwrap();
        let want = -((2f64).exp() / ((2f64).exp() + 1.0)).ln();
        assert!((l - want).abs() < 1e-14);
        assert!((l - 0.126928).abs() < 1e-6);
    }

    #[test]
    fn kl_to_identical_reference_is_zero() {
        let w = ClassifierWeights::zeros(&identity_spec(3)).unwrap();
        let x = logits_input(&[&[0.3, -1.0, 2.0], &[1.0, 1.0, 0.0]]);
        let reference = forward(&w, &x).unwrap();
        let kind = LossKind::KlToReference(reference);
        assert_eq!(loss(&w, &x, &kind).unwrap(), 0.0);
        let g = value_and_grad_input(&w, &kind, &x).unwrap();
        assert!(g.get("input").unwrap().linf_norm() < 1e-15);
    }

    #[test]
    fn identity_model_input_gradient() {
        let w = ClassifierWeights::zeros(&identity_spec(2)).unwrap();
        let x = logits_input(&[&[0.0, 0.0]]);
        let g = value_and_grad_input(&w, &LossKind::CrossEntropy(vec![0]), &x).unwrap();
        assert_eq!(g.get("input").unwrap().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn label_out_of_range_is_an_error() {
        let w = ClassifierWeights::zeros(&identity_spec(2)).unwrap();
        let x = logits_input(&[&[0.0, 0.0]]);
        assert!(matches!(
            loss(&w, &x, &LossKind::CrossEntropy(vec![2])),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn input_shape_mismatch_is_an_error() {
        let w = ClassifierWeights::zeros(&ClassifierSpec::desk_default()).unwrap();
        assert!(matches!(
            forward(&w, &Tensor::zeros(vec![1, 1, 27, 28])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn linear_squared_loss_hand_gradient() {
        // loss = (w x)^2 built directly on the tape; dL/dw = 2 w x^2 = 4 at w=2, x=1.
        let tape = Tape::new();
        let w = tape.leaf(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let x = tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let y = x.matmul(w.transpose().unwrap()).unwrap();
        let l = y.mul(y).unwrap().sum();
        assert_eq!(tape.backward(l).unwrap().wrt(w).item(), 4.0);
    }

    #[test]
    fn zero_input_gives_zero_weight_grads_without_bias() {
        let spec = ClassifierSpec {
            input_shape: [1, 2, 2],
            num_classes: 3,
            layers: vec![
                Layer::Flatten,
                Layer::Dense { out_features: 5, bias: false },
                Layer::Dense { out_features: 3, bias: false },
            ],
        };
        let w = ClassifierWeights::init(&spec, 1).unwrap();
        let g = value_and_grad_params(&w, &LossKind::CrossEntropy(vec![1]), &Tensor::zeros(vec![1, 1, 2, 2])).unwrap();
        for (_, t) in &g.grads {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn checkpoint_round_trip_and_spec_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let w = ClassifierWeights::init(&ClassifierSpec::desk_default(), 9).unwrap();
        save_checkpoint(&w, &path).unwrap();
        assert!(load_checkpoint(&path).unwrap().bit_eq(&w));
        assert!(load_checkpoint_for(&path, &ClassifierSpec::four_conv_mnist()).is_err());
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
