//! The coordinate-wise recurrent maximizer.
//!
//! One small RNN cell is shared by every pixel coordinate; each coordinate
//! carries its own `d`-dimensional hidden state. Per coordinate, with input
//! gradient `g` and hidden state `h`:
//!
//! ```text
//! delta = tanh(V h)
//! h'    = tanh(U g + W h)
//! ```
//!
//! No bias terms are used by default, so `g = 0, h = 0` is an exact fixed
//! point. The optional biased variant exists only to count parameters and to
//! study the cell; it adds `b1` (scalar) to `delta` and `b2` (d-vector) to `h'`.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attacks::{project_scalar, Observer};
use crate::autodiff::GradBundle;
use crate::checkpoint::{Container, Kind};
use crate::classifier::{self, ClassifierWeights, LossKind};
use crate::data::gaussian_perturb;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Which hidden state the perturbation is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Readout {
    /// `delta_t = tanh(V h_t)`: the state before this step's gradient is seen.
    /// With `h_0 = 0` the first perturbation is always zero.
    #[default]
    Current,
    /// `delta_t = tanh(V h_{t+1})`: the state after absorbing `g_t`.
    Updated,
}

impl Readout {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "current" => Ok(Self::Current),
            "updated" => Ok(Self::Updated),
            other => Err(Error::Config(format!("unknown readout '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnnOptimizerParams {
    /// `[d, 1]`
    pub u: Tensor,
    /// `[d, d]`
    pub w: Tensor,
    /// `[1, d]`
    pub v: Tensor,
    /// `[1]`, added inside the readout tanh. `None` in the default cell.
    pub b1: Option<Tensor>,
    /// `[d]`, added inside the state update tanh. `None` in the default cell.
    pub b2: Option<Tensor>,
    pub readout: Readout,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    hidden: usize,
    biases: bool,
    readout: Readout,
}

impl RnnOptimizerParams {
    pub const INIT_RANGE: f64 = 0.1;

    /// Bias-free cell with every weight uniform in `[-0.1, 0.1]`.
    pub fn init(hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("hidden size must be positive".into()));
        }
        let mut rng = seed::rng(seed);
        let mut draw = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| rng.random_range(-Self::INIT_RANGE..=Self::INIT_RANGE))
                .collect();
            Tensor::raw(shape, data)
        };
        Ok(Self {
            u: draw(vec![hidden, 1]),
            w: draw(vec![hidden, hidden]),
            v: draw(vec![1, hidden]),
            b1: None,
            b2: None,
            readout: Readout::Current,
        })
    }

    pub fn zeros(hidden: usize) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("hidden size must be positive".into()));
        }
        Ok(Self {
            u: Tensor::zeros(vec![hidden, 1]),
            w: Tensor::zeros(vec![hidden, hidden]),
            v: Tensor::zeros(vec![1, hidden]),
            b1: None,
            b2: None,
            readout: Readout::Current,
        })
    }

    /// Adds zero-valued bias terms (the variant the default cell removes).
    pub fn with_biases(mut self) -> Self {
        let d = self.hidden_size();
        self.b1 = Some(Tensor::zeros(vec![1]));
        self.b2 = Some(Tensor::zeros(vec![d]));
        self
    }

    pub fn with_readout(mut self, readout: Readout) -> Self {
        self.readout = readout;
        self
    }

    pub fn hidden_size(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn bias_removed(&self) -> bool {
        self.b1.is_none() && self.b2.is_none()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.hidden_size();
        let ok = self.u.shape() == [d, 1]
            && self.w.shape() == [d, d]
            && self.v.shape() == [1, d]
            && self.b1.as_ref().is_none_or(|b| b.shape() == [1])
            && self.b2.as_ref().is_none_or(|b| b.shape() == [d]);
        if !ok || d == 0 {
            return Err(Error::Shape(format!(
                "inconsistent optimizer shapes U{:?} W{:?} V{:?}",
                self.u.shape(),
                self.w.shape(),
                self.v.shape()
            )));
        }
        Ok(())
    }

    /// Trainable tensors in storage order: U, W, V, then b1, b2 if present.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.u, &self.w, &self.v];
        out.extend(self.b1.iter());
        out.extend(self.b2.iter());
        out
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut out = vec!["U", "W", "V"];
        if self.b1.is_some() {
            out.push("b1");
        }
        if self.b2.is_some() {
            out.push("b2");
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.u, &mut self.w, &mut self.v];
        out.extend(self.b1.iter_mut());
        out.extend(self.b2.iter_mut());
        out
    }

    /// `param += k * grad` for every tensor, in [`Self::tensors`] order.
    pub fn apply_update(&mut self, k: f64, grads: &[Tensor]) -> Result<()> {
        let mut ts = self.tensors_mut();
        if ts.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} optimizer gradients for {} tensors",
                grads.len(),
                ts.len()
            )));
        }
        for (t, g) in ts.iter_mut().zip(grads) {
            t.axpy(k, g)?;
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        let (a, b) = (self.tensors(), other.tensors());
        self.readout == other.readout && a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.bit_eq(y))
    }
}

/// Number of trainable scalars: `d + d^2 + d` for the bias-free cell.
pub fn param_count(params: &RnnOptimizerParams) -> usize {
    params.tensors().iter().map(|t| t.len()).sum()
}

/// One `d`-vector per input coordinate, stored as `[B, C, H, W, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub h: Tensor,
}

impl HiddenState {
    pub fn zeros(coords: &[usize], hidden: usize) -> Self {
        let mut shape = coords.to_vec();
        shape.push(hidden);
        Self {
            h: Tensor::zeros(shape),
        }
    }

    pub fn coords(&self) -> &[usize] {
        let s = self.h.shape();
        &s[..s.len() - 1]
    }
}

/// Borrowed view of the cell parameters for per-coordinate evaluation.
struct Cell<'a> {
    d: usize,
    u: &'a [f64],
    w: &'a [f64],
    v: &'a [f64],
    b1: f64,
    b2: Option<&'a [f64]>,
    readout: Readout,
}

impl<'a> Cell<'a> {
    fn new(params: &'a RnnOptimizerParams) -> Self {
        Self {
            d: params.hidden_size(),
            u: params.u.data(),
            w: params.w.data(),
            v: params.v.data(),
            b1: params.b1.as_ref().map_or(0.0, |b| b.data()[0]),
            b2: params.b2.as_ref().map(|b| b.data()),
            readout: params.readout,
        }
    }

    /// Writes `h'` into `out` and returns `delta` for one coordinate.
    #[inline]
    fn forward(&self, g: f64, h: &[f64], out: &mut [f64]) -> f64 {
        let d = self.d;
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.w[i * d..(i + 1) * d];
            let mut pre = self.u[i] * g + row.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
            if let Some(b2) = self.b2 {
                pre += b2[i];
            }
            *o = pre.tanh();
        }
        let src: &[f64] = match self.readout {
            Readout::Current => h,
            Readout::Updated => out,
        };
        (self.v.iter().zip(src).map(|(a, b)| a * b).sum::<f64>() + self.b1).tanh()
    }
}

/// One application of the cell at every coordinate of `g`.
pub fn rnn_step(params: &RnnOptimizerParams, g: &Tensor, state: &HiddenState) -> Result<(Tensor, HiddenState)> {
    params.validate()?;
    let d = params.hidden_size();
    let hs = state.h.shape();
    if hs.last() != Some(&d) || state.coords() != g.shape() {
        return Err(Error::Shape(format!(
            "gradient {:?} and hidden state {:?} (d = {d}) disagree",
            g.shape(),
            hs
        )));
    }
    let cell = Cell::new(params);
    let h = state.h.data();
    let mut delta = Vec::with_capacity(g.len());
    let mut h_next = vec![0.0; h.len()];
    for (n, &gn) in g.data().iter().enumerate() {
        delta.push(cell.forward(gn, &h[n * d..(n + 1) * d], &mut h_next[n * d..(n + 1) * d]));
    }
    Ok((
        Tensor::raw(g.shape().to_vec(), delta),
        HiddenState {
            h: Tensor::raw(hs.to_vec(), h_next),
        },
    ))
}

/// Everything an unrolled learned attack produced.
#[derive(Debug, Clone)]
pub struct UnrollRecord {
    pub x: Tensor,
    pub epsilon: f64,
    /// Start point `x'_0`.
    pub x0: Tensor,
    /// `x'_1 .. x'_T`.
    pub iterates: Vec<Tensor>,
    /// Input gradients of the summed loss at `x'_0 .. x'_T` (T + 1 entries).
    /// Empty when the attack ran for evaluation only.
    pub grads: Vec<Tensor>,
    /// Hidden states `h_1 .. h_T` and perturbations `delta_0 .. delta_{T-1}`,
    /// kept alongside `grads` for back-propagation through time.
    pub hidden: Vec<HiddenState>,
    pub deltas: Vec<Tensor>,
    /// Batch-mean loss at `x'_0`.
    pub initial_loss: f64,
    /// Batch-mean loss at `x'_1 .. x'_T`.
    pub step_losses: Vec<f64>,
}

impl UnrollRecord {
    pub fn steps(&self) -> usize {
        self.iterates.len()
    }
}

/// Per-step weights `w_t` of the meta-loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepWeights {
    /// `w_t = t`.
    Linear,
    /// Only the final step counts.
    FinalOnly,
    Custom(Vec<f64>),
}

impl StepWeights {
    pub fn weights(&self, steps: usize) -> Result<Vec<f64>> {
        match self {
            StepWeights::Linear => Ok((1..=steps).map(|t| t as f64).collect()),
            StepWeights::FinalOnly => Ok((1..=steps).map(|t| if t == steps { 1.0 } else { 0.0 }).collect()),
            StepWeights::Custom(w) if w.len() == steps => Ok(w.clone()),
            StepWeights::Custom(w) => Err(Error::Config(format!(
                "{} step weights for {steps} steps",
                w.len()
            ))),
        }
    }
}

/// `sum_t w_t * L(x'_t)` over the recorded per-step batch-mean losses.
pub fn meta_loss(record: &UnrollRecord, weights: &StepWeights) -> Result<f64> {
    let w = weights.weights(record.steps())?;
    Ok(w.iter().zip(&record.step_losses).map(|(w, l)| w * l).sum())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Runs the learned maximizer for `steps` steps from `x + 0.001 N(0, I)`.
/// The record keeps every input gradient, as needed by [`meta_grad_from_record`].
pub fn learned_attack(
    weights: &ClassifierWeights,
    params: &RnnOptimizerParams,
    x: &Tensor,
    kind: &LossKind,
    epsilon: f64,
    steps: usize,
    seed: u64,
) -> Result<(Tensor, UnrollRecord)> {
    unroll(weights, params, x, kind, epsilon, steps, seed, true, true, None)
}

/// Evaluation variant: optional Gaussian start, an observer, and no stored gradients.
#[allow(clippy::too_many_arguments)]
pub fn learned_attack_observed(
    weights: &ClassifierWeights,
    params: &RnnOptimizerParams,
    x: &Tensor,
    kind: &LossKind,
    epsilon: f64,
    steps: usize,
    seed: u64,
    gaussian_init: bool,
    observer: Option<Observer<'_>>,
) -> Result<(Tensor, UnrollRecord)> {
    unroll(weights, params, x, kind, epsilon, steps, seed, gaussian_init, false, observer)
}

#[allow(clippy::too_many_arguments)]
fn unroll(
    weights: &ClassifierWeights,
    params: &RnnOptimizerParams,
    x: &Tensor,
    kind: &LossKind,
    epsilon: f64,
    steps: usize,
    seed: u64,
    gaussian_init: bool,
    keep_grads: bool,
    mut observer: Option<Observer<'_>>,
) -> Result<(Tensor, UnrollRecord)> {
    params.validate()?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("epsilon must be > 0, got {epsilon}")));
    }
    let x0 = if gaussian_init { gaussian_perturb(x, seed) } else { x.clone() };
    let mut cur = x0.clone();
    let mut state = HiddenState::zeros(x.shape(), params.hidden_size());
    let mut grads = Vec::new();
    let mut hidden = Vec::new();
    let mut deltas = Vec::new();
    let mut iterates = Vec::with_capacity(steps);
    let mut step_losses = Vec::with_capacity(steps);
    let need_grad = |t: usize| keep_grads || t < steps;
    let (losses, mut g) = if need_grad(0) {
        let (l, g) = classifier::per_example_loss_and_input_grad(weights, &cur, kind)?;
        (l, Some(g))
    } else {
        (classifier::per_example_losses(weights, &cur, kind)?, None)
    };
    let initial_loss = mean(&losses);
    for t in 0..steps {
        let gt = g.take().expect("gradient for every non-final step");
        let (delta, next_state) = rnn_step(params, &gt, &state)?;
        if keep_grads {
            grads.push(gt);
            hidden.push(next_state.clone());
        }
        state = next_state;
        let next = Tensor::raw(
            cur.shape().to_vec(),
            x.data()
                .iter()
                .zip(cur.data())
                .zip(delta.data())
                .map(|((&xr, &c), &dl)| project_scalar(xr, c + dl, epsilon))
                .collect(),
        );
        if keep_grads {
            deltas.push(delta);
        }
        cur = next;
        if let Some(f) = observer.as_mut() {
            f(t + 1, &cur);
        }
        let losses = if need_grad(t + 1) {
            let (l, gn) = classifier::per_example_loss_and_input_grad(weights, &cur, kind)?;
            g = Some(gn);
            l
        } else {
            classifier::per_example_losses(weights, &cur, kind)?
        };
        step_losses.push(mean(&losses));
        iterates.push(cur.clone());
    }
    if keep_grads {
        if let Some(gt) = g {
            grads.push(gt);
        }
    }
    Ok((
        cur,
        UnrollRecord {
            x: x.clone(),
            epsilon,
            x0,
            iterates,
            grads,
            hidden,
            deltas,
            initial_loss,
            step_losses,
        },
    ))
}

/// Runs the learned attack and returns the meta-loss gradient over `params`.
#[allow(clippy::too_many_arguments)]
pub fn meta_grad(
    weights: &ClassifierWeights,
    params: &RnnOptimizerParams,
    x: &Tensor,
    kind: &LossKind,
    epsilon: f64,
    steps: usize,
    seed: u64,
    step_weights: &StepWeights,
) -> Result<(GradBundle, UnrollRecord)> {
    let (_, record) = learned_attack(weights, params, x, kind, epsilon, steps, seed)?;
    let bundle = meta_grad_from_record(params, &record, step_weights)?;
    Ok((bundle, record))
}

/// Gradient of the meta-loss with respect to the cell parameters, treating
/// the recorded input gradients as constants.
///
/// Under that convention the derivative of `sum_t w_t L(x'_t)` equals the
/// derivative of `sum_t w_t <g_t, x'_t> / B`, where `g_t` is the recorded
/// gradient at `x'_t`. Each coordinate's recurrence is replayed and
/// back-propagated independently; projection passes gradient only where the
/// unprojected point lies inside `[lo, hi]`.
pub fn meta_grad_from_record(
    params: &RnnOptimizerParams,
    record: &UnrollRecord,
    step_weights: &StepWeights,
) -> Result<GradBundle> {
    params.validate()?;
    let steps = record.steps();
    if record.grads.len() != steps + 1 || record.hidden.len() != steps || record.deltas.len() != steps {
        return Err(Error::Config(
            "record has no stored gradients; run learned_attack to build one".into(),
        ));
    }
    if record.hidden.iter().any(|h| h.h.shape().last() != Some(&params.hidden_size())) {
        return Err(Error::Shape("record hidden size does not match the optimizer".into()));
    }
    let coef: Vec<f64> = step_weights
        .weights(steps)?
        .iter()
        .map(|w| w / record.x.batch_size() as f64)
        .collect();
    let cell = Cell::new(params);
    let d = cell.d;
    let eps = record.epsilon;
    let (mut gu, mut gw, mut gv) = (vec![0.0; d], vec![0.0; d * d], vec![0.0; d]);
    let (mut gb1, mut gb2) = (0.0, vec![0.0; d]);

    // Per-coordinate scratch: hidden states h_0..h_T, perturbations, masks.
    let mut hs = vec![0.0; (steps + 1) * d];
    let mut deltas = vec![0.0; steps];
    let mut inside = vec![false; steps];
    let zero = vec![0.0; d];
    let (mut gh, mut ga, mut gs) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for n in 0..record.x.len() {
        let xr = record.x.data()[n];
        let (lo, hi) = ((xr - eps).max(0.0), (xr + eps).min(1.0));
        let mut cur = record.x0.data()[n];
        hs[..d].copy_from_slice(&zero);
        for t in 0..steps {
            hs[(t + 1) * d..(t + 2) * d].copy_from_slice(&record.hidden[t].h.data()[n * d..(n + 1) * d]);
            deltas[t] = record.deltas[t].data()[n];
            let y = cur + deltas[t];
            inside[t] = lo <= y && y <= hi;
            cur = project_scalar(xr, y, eps);
        }
        gh.iter_mut().for_each(|v| *v = 0.0);
        let mut gx = 0.0;
        for t in (0..steps).rev() {
            gx += coef[t] * record.grads[t + 1].data()[n];
            if !inside[t] {
                gx = 0.0;
            }
            let gr = gx * (1.0 - deltas[t] * deltas[t]);
            let (h_t, h_next) = (&hs[t * d..(t + 1) * d], &hs[(t + 1) * d..(t + 2) * d]);
            let src = match cell.readout {
                Readout::Current => h_t,
                Readout::Updated => h_next,
            };
            for i in 0..d {
                gv[i] += gr * src[i];
                gs[i] = gr * cell.v[i];
            }
            gb1 += gr;
            if cell.readout == Readout::Updated {
                gh.iter_mut().zip(&gs).for_each(|(a, b)| *a += b);
            }
            let g_in = record.grads[t].data()[n];
            for i in 0..d {
                ga[i] = gh[i] * (1.0 - h_next[i] * h_next[i]);
                gu[i] += ga[i] * g_in;
                gb2[i] += ga[i];
                let row = &mut gw[i * d..(i + 1) * d];
                row.iter_mut().zip(h_t).for_each(|(r, h)| *r += ga[i] * h);
            }
            match cell.readout {
                Readout::Current => gh.copy_from_slice(&gs),
                Readout::Updated => gh.iter_mut().for_each(|v| *v = 0.0),
            }
            for (i, &a) in ga.iter().enumerate() {
                let row = &cell.w[i * d..(i + 1) * d];
                gh.iter_mut().zip(row).for_each(|(o, w)| *o += w * a);
            }
        }
    }
    let mut grads = vec![
        Tensor::raw(vec![d, 1], gu),
        Tensor::raw(vec![d, d], gw),
        Tensor::raw(vec![1, d], gv),
    ];
    if params.b1.is_some() {
        grads.push(Tensor::raw(vec![1], vec![gb1]));
    }
    if params.b2.is_some() {
        grads.push(Tensor::raw(vec![d], gb2));
    }
    let bundle = GradBundle {
        loss: meta_loss(record, step_weights)?,
        grads: params.names().into_iter().map(String::from).zip(grads).collect(),
    };
    bundle.ensure_finite()?;
    Ok(bundle)
}

pub fn save_checkpoint(params: &RnnOptimizerParams, path: impl AsRef<Path>) -> Result<()> {
    params.validate()?;
    if params.b1.is_some() != params.b2.is_some() {
        return Err(Error::Checkpoint("optimizer biases must be both present or both absent".into()));
    }
    let header = OptimizerHeader {
        hidden: params.hidden_size(),
        biases: !params.bias_removed(),
        readout: params.readout,
    };
    Container {
        kind: Kind::Optimizer,
        spec: serde_json::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?,
        tensors: params.tensors().into_iter().cloned().collect(),
    }
    .write(path.as_ref())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<RnnOptimizerParams> {
    let c = Container::read(path.as_ref(), Kind::Optimizer)?;
    let header: OptimizerHeader =
        serde_json::from_str(&c.spec).map_err(|e| Error::Checkpoint(format!("bad optimizer header: {e}")))?;
    let expected = if header.biases { 5 } else { 3 };
    if c.tensors.len() != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} optimizer tensors, found {}",
            c.tensors.len()
        )));
    }
    let mut it = c.tensors.into_iter();
    let mut next = || it.next().expect("count checked");
    let params = RnnOptimizerParams {
        u: next(),
        w: next(),
        v: next(),
        b1: header.biases.then(&mut next),
        b2: header.biases.then(&mut next),
        readout: header.readout,
    };
    params.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    if params.hidden_size() != header.hidden {
        return Err(Error::Checkpoint("hidden size does not match the stored tensors".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_unit(readout: Readout) -> RnnOptimizerParams {
        RnnOptimizerParams {
            u: Tensor::full(vec![1, 1], 1.0),
            w: Tensor::full(vec![1, 1], 1.0),
            v: Tensor::full(vec![1, 1], 1.0),
            b1: None,
            b2: None,
            readout,
        }
    }

    #[test]
    fn zero_is_a_fixed_point() {
        let p = RnnOptimizerParams::init(10, 3).unwrap();
        let g = Tensor::zeros(vec![2, 1, 2, 2]);
        let (delta, h) = rnn_step(&p, &g, &HiddenState::zeros(g.shape(), 10)).unwrap();
        assert!(delta.data().iter().all(|&v| v == 0.0));
        assert!(h.h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_evaluated_single_unit() {
        let g = Tensor::full(vec![1, 1, 1, 1], 1.0);
        let (delta, h) = rnn_step(&one_unit(Readout::Current), &g, &HiddenState::zeros(g.shape(), 1)).unwrap();
        assert_eq!(delta.item(), 0.0);
        assert!((h.h.item() - 0.761_594_155_955_764_9).abs() < 1e-15);
        let (delta, _) = rnn_step(&one_unit(Readout::Updated), &g, &HiddenState::zeros(g.shape(), 1)).unwrap();
        assert!((delta.item() - 0.761_594_155_955_764_9f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn parameter_counts() {
        let p = RnnOptimizerParams::zeros(10).unwrap();
        assert_eq!(param_count(&p), 120);
        assert_eq!(param_count(&RnnOptimizerParams::zeros(1).unwrap()), 3);
        let biased = p.with_biases();
        assert_eq!(param_count(&biased), 131);
        assert!(!biased.bias_removed());
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let a = RnnOptimizerParams::init(10, 7).unwrap();
        let b = RnnOptimizerParams::init(10, 7).unwrap();
        assert!(a.bit_eq(&b));
        assert!(a.tensors().iter().all(|t| t.linf_norm() <= 0.1));
        assert!(!a.bit_eq(&RnnOptimizerParams::init(10, 8).unwrap()));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = RnnOptimizerParams::zeros(4).unwrap();
        let g = Tensor::zeros(vec![1, 1, 2, 2]);
        assert!(rnn_step(&p, &g, &HiddenState::zeros(&[1, 1, 2, 3], 4)).is_err());
        assert!(rnn_step(&p, &g, &HiddenState::zeros(g.shape(), 3)).is_err());
    }

    fn record_with_losses(losses: &[f64]) -> UnrollRecord {
        let x = Tensor::zeros(vec![1, 1, 1, 1]);
        UnrollRecord {
            x: x.clone(),
            epsilon: 0.3,
            x0: x.clone(),
            iterates: vec![x; losses.len()],
            grads: Vec::new(),
            hidden: Vec::new(),
            deltas: Vec::new(),
            initial_loss: 0.0,
            step_losses: losses.to_vec(),
        }
    }

    #[test]
    fn meta_loss_weightings() {
        let r = record_with_losses(&[1.0, 2.0, 3.0]);
        assert_eq!(meta_loss(&r, &StepWeights::Linear).unwrap(), 14.0);
        assert_eq!(meta_loss(&r, &StepWeights::FinalOnly).unwrap(), 3.0);
        assert_eq!(StepWeights::Linear.weights(3).unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(meta_loss(&r, &StepWeights::Custom(vec![1.0])).is_err());
    }

    #[test]
    fn optimizer_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("opt.ckpt");
        for p in [
            RnnOptimizerParams::init(10, 1).unwrap(),
            RnnOptimizerParams::init(3, 2).unwrap().with_biases().with_readout(Readout::Updated),
        ] {
            save_checkpoint(&p, &path).unwrap();
            assert!(load_checkpoint(&path).unwrap().bit_eq(&p));
        }
    }
}
