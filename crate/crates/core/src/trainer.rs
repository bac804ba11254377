//! Outer training loops: plain, PGD adversarial training, TRADES, and the two
//! variants whose inner maximizer is the learned RNN.
//!
//! Per batch of an RNN objective the order is fixed: unroll the learned
//! attack, take one ascent step on the optimizer parameters, then one descent
//! step on the classifier. The adversarial input enters the classifier loss as
//! a constant.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::{Attack, AttackConfig, AttackFamily, BlsConfig};
use crate::autodiff::{GradBundle, Tape, Var};
use crate::classifier::{self, ClassifierSpec, ClassifierWeights, LossKind};
use crate::data::{self, Batch, Dataset};
use crate::error::{Error, Result};
use crate::learned::{self, Readout, RnnOptimizerParams, StepWeights};
use crate::seed::derive;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Plain,
    AdvTrain,
    Trades,
    RnnAdv,
    RnnTrades,
}

impl Objective {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "plain" => Ok(Self::Plain),
            "advtrain" | "adv-train" | "pgd" => Ok(Self::AdvTrain),
            "trades" => Ok(Self::Trades),
            "rnn-adv" | "rnnadv" => Ok(Self::RnnAdv),
            "rnn-trades" | "rnntrades" => Ok(Self::RnnTrades),
            other => Err(Error::Config(format!("unknown objective '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Plain => "plain",
            Self::AdvTrain => "advtrain",
            Self::Trades => "trades",
            Self::RnnAdv => "rnn-adv",
            Self::RnnTrades => "rnn-trades",
        }
    }

    pub fn is_trades(self) -> bool {
        matches!(self, Self::Trades | Self::RnnTrades)
    }

    pub fn is_rnn(self) -> bool {
        matches!(self, Self::RnnAdv | Self::RnnTrades)
    }
}

/// How the optimizer-parameter gradient is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MetaGradOrder {
    /// Input gradients inside the unroll are treated as constants.
    #[default]
    FirstOrder,
    /// Differentiates through the input gradients too. Not implemented.
    SecondOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub epochs: usize,
    pub batch_size: usize,
    /// Inner attack steps `T`.
    pub inner_steps: usize,
    pub epsilon: f64,
    /// Fixed PGD step size for the hand-designed inner attacks.
    pub pgd_step: f64,
    /// Use PGD with backtracking line search as the AdvTrain inner attack.
    pub bls: bool,
    /// Optimizer-parameter learning rate (ascent).
    pub alpha1: f64,
    /// Classifier learning rate (descent).
    pub alpha2: f64,
    /// Heavy-ball momentum on the classifier update; 0 disables it.
    pub momentum: f64,
    /// TRADES trade-off: the KL term is weighted by `1 / lambda`.
    pub trades_lambda: f64,
    pub hidden_size: usize,
    pub readout: Readout,
    pub step_weights: StepWeights,
    pub meta_grad: MetaGradOrder,
    pub seed: u64,
    /// Train on a seeded random subset of this many examples.
    pub subset: Option<usize>,
    /// Ramp the attack radius linearly from 0 to `epsilon` over this many
    /// epochs (0 trains at full radius from the start).
    pub epsilon_warmup: f64,
    pub classifier: ClassifierSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Plain,
            epochs: 5,
            batch_size: 64,
            inner_steps: 10,
            epsilon: 0.3,
            pgd_step: 0.075,
            bls: false,
            alpha1: 0.001,
            alpha2: 0.01,
            momentum: 0.0,
            trades_lambda: 6.0,
            hidden_size: 10,
            readout: Readout::Current,
            step_weights: StepWeights::Linear,
            meta_grad: MetaGradOrder::FirstOrder,
            seed: 0,
            subset: None,
            epsilon_warmup: 0.0,
            classifier: ClassifierSpec::desk_default(),
        }
    }
}

impl TrainConfig {
    /// Settings that train stably on a 6k MNIST subset in a few minutes:
    /// heavy-ball momentum 0.9, a two-epoch radius warm-up, a larger
    /// optimizer learning rate than the default and a KL weight of 6.
    pub fn desk(objective: Objective, seed: u64) -> Self {
        Self {
            objective,
            seed,
            subset: Some(6000),
            momentum: 0.9,
            alpha1: 0.01,
            epsilon_warmup: 2.0,
            trades_lambda: 1.0 / 6.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.alpha2 > 0.0 && self.alpha2.is_finite()) {
            return bad(format!("alpha2 must be > 0, got {}", self.alpha2));
        }
        if self.objective.is_rnn() && !(self.alpha1 > 0.0 && self.alpha1.is_finite()) {
            return bad(format!("alpha1 must be > 0, got {}", self.alpha1));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.objective.is_trades() && !(self.trades_lambda > 0.0) {
            return bad(format!("trades lambda must be > 0, got {}", self.trades_lambda));
        }
        if self.objective != Objective::Plain {
            if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
                return bad(format!("epsilon must be > 0, got {}", self.epsilon));
            }
            if !(self.pgd_step > 0.0 && self.pgd_step.is_finite()) {
                return bad(format!("pgd step must be > 0, got {}", self.pgd_step));
            }
        }
        if !(self.epsilon_warmup >= 0.0 && self.epsilon_warmup.is_finite()) {
            return bad(format!("epsilon warmup must be >= 0, got {}", self.epsilon_warmup));
        }
        if self.objective.is_rnn() {
            if self.hidden_size == 0 {
                return bad("hidden size must be positive".into());
            }
            if self.meta_grad == MetaGradOrder::SecondOrder {
                return bad("second-order meta-gradients are not implemented".into());
            }
            self.step_weights.weights(self.inner_steps)?;
        }
        if self.bls && self.objective != Objective::AdvTrain {
            return bad("line search applies to the advtrain objective only".into());
        }
        Ok(())
    }

    /// Same config with the attack radius (and the PGD step, proportionally) replaced.
    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self {
            epsilon,
            pgd_step: self.pgd_step * epsilon / self.epsilon,
            ..self.clone()
        }
    }

    /// The hand-designed inner attack for AdvTrain and TRADES.
    pub fn inner_attack(&self) -> Attack {
        let cfg = AttackConfig {
            step_size: self.pgd_step,
            ..AttackConfig::pgd(self.epsilon, self.inner_steps)
        };
        if self.bls {
            Attack::new(
                "pgd-bls",
                AttackConfig {
                    family: AttackFamily::PgdBls,
                    ..cfg
                },
            )
            .with_bls(BlsConfig::for_epsilon(self.epsilon))
        } else {
            Attack::new("pgd", cfg)
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub theta_loss: f64,
    pub phi_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    /// Total parameter updates so far.
    pub steps: usize,
    pub bls_warnings: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Mutable training state: classifier, learned optimizer, momentum buffer.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub weights: ClassifierWeights,
    pub optimizer: Option<RnnOptimizerParams>,
    pub velocity: Vec<Tensor>,
    pub steps: usize,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let weights = ClassifierWeights::init(&cfg.classifier, derive(cfg.seed, &[0]))?;
        let optimizer = if cfg.objective.is_rnn() {
            Some(RnnOptimizerParams::init(cfg.hidden_size, derive(cfg.seed, &[2]))?.with_readout(cfg.readout))
        } else {
            None
        };
        Ok(Self::from_parts(weights, optimizer))
    }

    pub fn from_parts(weights: ClassifierWeights, optimizer: Option<RnnOptimizerParams>) -> Self {
        let velocity = weights.params().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            weights,
            optimizer,
            velocity,
            steps: 0,
        }
    }
}

/// What the instrumented hooks see, in order, for every batch.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainEvent {
    AttackUnrolled { epoch: usize, batch: usize },
    PhiUpdated { epoch: usize, batch: usize, meta_loss: f64 },
    ThetaUpdated { epoch: usize, batch: usize, loss: f64 },
    EpochEnd(EpochRecord),
}

pub type HookFn<'h> = dyn FnMut(&TrainEvent, &TrainState) + 'h;
pub type Hook<'a> = &'a mut HookFn<'a>;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ClassifierWeights,
    pub optimizer: Option<RnnOptimizerParams>,
    pub log: TrainLog,
}

/// Per-batch statistics returned by [`train_batch`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    pub theta_loss: f64,
    pub phi_loss: Option<f64>,
    pub bls_warnings: usize,
}

/// `CE(f(x), y) + KL(f(x) || f(x')) / lambda`, batch-averaged, and its
/// gradient with respect to every classifier parameter. Both logits depend on
/// the parameters; `x` and `x_adv` are constants.
pub fn trades_loss_and_grad(
    weights: &ClassifierWeights,
    x: &Tensor,
    x_adv: &Tensor,
    labels: &[usize],
    lambda: f64,
) -> Result<GradBundle> {
    x.expect_same_shape(x_adv, "trades inputs")?;
    let tape = Tape::new();
    let params: Vec<Var<'_>> = weights.params().iter().map(|p| tape.leaf(p.clone())).collect();
    let clean = weights.forward_on(tape.constant(x.clone()), &params)?;
    let adv = weights.forward_on(tape.constant(x_adv.clone()), &params)?;
    let ce = clean.cross_entropy(labels)?.mean();
    let kl = clean.kl_div(adv)?.mean();
    let loss = ce.add(kl.scale(1.0 / lambda))?;
    let grads = tape.backward(loss)?;
    let bundle = GradBundle {
        loss: loss.item(),
        grads: weights
            .param_names()
            .iter()
            .zip(&params)
            .map(|(n, &p)| (n.clone(), grads.wrt(p)))
            .collect(),
    };
    bundle.ensure_finite()?;
    Ok(bundle)
}

fn descend(cfg: &TrainConfig, state: &mut TrainState, grads: &GradBundle) -> Result<()> {
    let g: Vec<Tensor> = grads.grads.iter().map(|(_, t)| t.clone()).collect();
    if cfg.momentum > 0.0 {
        for (v, gi) in state.velocity.iter_mut().zip(&g) {
            *v = v.scale(cfg.momentum);
            v.axpy(1.0, gi)?;
        }
        let vel = state.velocity.clone();
        state.weights.apply_update(-cfg.alpha2, &vel)?;
    } else {
        state.weights.apply_update(-cfg.alpha2, &g)?;
    }
    for (name, p) in state.weights.param_names().iter().zip(state.weights.params()) {
        p.ensure_finite(name)?;
    }
    Ok(())
}

/// One batch of the configured objective. `seed` drives the Gaussian start.
pub fn train_batch(
    cfg: &TrainConfig,
    state: &mut TrainState,
    batch: &Batch,
    seed: u64,
    position: (usize, usize),
    mut hook: Option<&mut HookFn<'_>>,
) -> Result<BatchStats> {
    let (epoch, bi) = position;
    let mut emit = |e: TrainEvent, s: &TrainState| {
        if let Some(h) = hook.as_mut() {
            h(&e, s);
        }
    };
    let ce = LossKind::CrossEntropy(batch.y.clone());
    let mut phi_loss = None;
    let mut bls_warnings = 0;
    let theta_grads = match cfg.objective {
        Objective::Plain => classifier::value_and_grad_params(&state.weights, &ce, &batch.x)?,
        Objective::AdvTrain => {
            let out = cfg.inner_attack().run(&state.weights, &batch.x, &ce, seed, None)?;
            bls_warnings = out.bls_warnings;
            emit(TrainEvent::AttackUnrolled { epoch, batch: bi }, state);
            classifier::value_and_grad_params(&state.weights, &ce, &out.x_adv)?
        }
        Objective::Trades => {
            let reference = classifier::forward(&state.weights, &batch.x)?;
            let kl = LossKind::KlToReference(reference);
            let out = cfg.inner_attack().run(&state.weights, &batch.x, &kl, seed, None)?;
            emit(TrainEvent::AttackUnrolled { epoch, batch: bi }, state);
            trades_loss_and_grad(&state.weights, &batch.x, &out.x_adv, &batch.y, cfg.trades_lambda)?
        }
        Objective::RnnAdv | Objective::RnnTrades => {
            let kind = if cfg.objective == Objective::RnnTrades {
                LossKind::KlToReference(classifier::forward(&state.weights, &batch.x)?)
            } else {
                ce.clone()
            };
            let params = state
                .optimizer
                .as_ref()
                .ok_or_else(|| Error::Config("rnn objective without optimizer parameters".into()))?;
            let (x_adv, record) = learned::learned_attack(
                &state.weights,
                params,
                &batch.x,
                &kind,
                cfg.epsilon,
                cfg.inner_steps,
                seed,
            )?;
            emit(TrainEvent::AttackUnrolled { epoch, batch: bi }, state);
            let meta = learned::meta_grad_from_record(params, &record, &cfg.step_weights)?;
            let g: Vec<Tensor> = meta.grads.iter().map(|(_, t)| t.clone()).collect();
            state
                .optimizer
                .as_mut()
                .expect("checked above")
                .apply_update(cfg.alpha1, &g)?;
            phi_loss = Some(meta.loss);
            emit(
                TrainEvent::PhiUpdated {
                    epoch,
                    batch: bi,
                    meta_loss: meta.loss,
                },
                state,
            );
            if cfg.objective == Objective::RnnTrades {
                trades_loss_and_grad(&state.weights, &batch.x, &x_adv, &batch.y, cfg.trades_lambda)?
            } else {
                classifier::value_and_grad_params(&state.weights, &ce, &x_adv)?
            }
        }
    };
    if !theta_grads.loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss at epoch {epoch}, batch {bi}")));
    }
    descend(cfg, state, &theta_grads)?;
    state.steps += 1;
    emit(
        TrainEvent::ThetaUpdated {
            epoch,
            batch: bi,
            loss: theta_grads.loss,
        },
        state,
    );
    Ok(BatchStats {
        theta_loss: theta_grads.loss,
        phi_loss,
        bls_warnings,
    })
}

/// Natural accuracy in percent, evaluated in chunks.
pub fn natural_accuracy(weights: &ClassifierWeights, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0;
    for b in data::sequential_batches(dataset, 256)? {
        correct += classifier::predict(weights, &b.x)?
            .iter()
            .zip(&b.y)
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok(100.0 * correct as f64 / dataset.len() as f64)
}

/// Trains from a fresh state. `validation` (if any) is scored after every epoch.
pub fn train(
    cfg: &TrainConfig,
    dataset: &Dataset,
    validation: Option<&Dataset>,
    hook: Option<Hook<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let state = TrainState::init(cfg)?;
    train_from(cfg, state, dataset, validation, hook)
}

/// Continues training from an existing state.
pub fn train_from(
    cfg: &TrainConfig,
    mut state: TrainState,
    dataset: &Dataset,
    validation: Option<&Dataset>,
    mut hook: Option<Hook<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.sample_shape() != cfg.classifier.input_shape {
        return Err(Error::Shape(format!(
            "dataset samples {:?} do not match the classifier input {:?}",
            dataset.sample_shape(),
            cfg.classifier.input_shape
        )));
    }
    let train_set = match cfg.subset {
        Some(n) if n < dataset.len() => dataset.shuffled_subset(n, derive(cfg.seed, &[1])),
        _ => dataset.clone(),
    };
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let batches = data::batches(&train_set, cfg.batch_size, derive(cfg.seed, &[3, epoch as u64]))?;
        let (mut theta_sum, mut phi_sum, mut warnings) = (0.0, 0.0, 0);
        for (bi, batch) in batches.iter().enumerate() {
            let seed = derive(cfg.seed, &[4, epoch as u64, bi as u64]);
            let progress = (epoch as f64 + (bi + 1) as f64 / batches.len() as f64) / cfg.epsilon_warmup;
            let ramped;
            let batch_cfg = if cfg.epsilon_warmup > 0.0 && progress < 1.0 {
                ramped = cfg.with_epsilon(cfg.epsilon * progress);
                &ramped
            } else {
                cfg
            };
            let stats = train_batch(batch_cfg, &mut state, batch, seed, (epoch, bi), hook.as_deref_mut())?;
            theta_sum += stats.theta_loss;
            phi_sum += stats.phi_loss.unwrap_or(0.0);
            warnings += stats.bls_warnings;
        }
        let n = batches.len() as f64;
        let record = EpochRecord {
            epoch,
            theta_loss: theta_sum / n,
            phi_loss: cfg.objective.is_rnn().then_some(phi_sum / n),
            val_accuracy: validation.map(|v| natural_accuracy(&state.weights, v)).transpose()?,
            steps: state.steps,
            bls_warnings: warnings,
        };
        if let Some(h) = hook.as_mut() {
            h(&TrainEvent::EpochEnd(record.clone()), &state);
        }
        log.epochs.push(record);
    }
    Ok(TrainOutcome {
        weights: state.weights,
        optimizer: state.optimizer,
        log,
    })
}

fn expect_objective(cfg: &TrainConfig, objective: Objective) -> Result<()> {
    if cfg.objective != objective {
        return Err(Error::Config(format!(
            "{} trainer called with objective {}",
            objective.name(),
            cfg.objective.name()
        )));
    }
    Ok(())
}

pub fn train_plain(cfg: &TrainConfig, dataset: &Dataset) -> Result<(ClassifierWeights, TrainLog)> {
    expect_objective(cfg, Objective::Plain)?;
    let out = train(cfg, dataset, None, None)?;
    Ok((out.weights, out.log))
}

/// AdvTrain with an explicit PGD or PGD_BLS inner attack.
pub fn train_advtrain(cfg: &TrainConfig, dataset: &Dataset, inner: &AttackConfig) -> Result<(ClassifierWeights, TrainLog)> {
    expect_objective(cfg, Objective::AdvTrain)?;
    let cfg = match inner.family {
        AttackFamily::Pgd | AttackFamily::PgdBls => TrainConfig {
            inner_steps: inner.steps,
            epsilon: inner.epsilon,
            pgd_step: inner.step_size,
            bls: inner.family == AttackFamily::PgdBls,
            ..cfg.clone()
        },
        other => {
            return Err(Error::Config(format!(
                "advtrain inner attack must be pgd or pgd-bls, got {}",
                other.name()
            )))
        }
    };
    let out = train(&cfg, dataset, None, None)?;
    Ok((out.weights, out.log))
}

pub fn train_trades(cfg: &TrainConfig, dataset: &Dataset, inner: &AttackConfig) -> Result<(ClassifierWeights, TrainLog)> {
    expect_objective(cfg, Objective::Trades)?;
    if inner.family != AttackFamily::Pgd {
        return Err(Error::Config("trades inner attack must be pgd".into()));
    }
    let cfg = TrainConfig {
        inner_steps: inner.steps,
        epsilon: inner.epsilon,
        pgd_step: inner.step_size,
        ..cfg.clone()
    };
    let out = train(&cfg, dataset, None, None)?;
    Ok((out.weights, out.log))
}

pub fn train_rnn_adv(cfg: &TrainConfig, dataset: &Dataset) -> Result<(ClassifierWeights, RnnOptimizerParams, TrainLog)> {
    expect_objective(cfg, Objective::RnnAdv)?;
    let out = train(cfg, dataset, None, None)?;
    Ok((out.weights, out.optimizer.expect("rnn objective"), out.log))
}

pub fn train_rnn_trades(cfg: &TrainConfig, dataset: &Dataset) -> Result<(ClassifierWeights, RnnOptimizerParams, TrainLog)> {
    expect_objective(cfg, Objective::RnnTrades)?;
    let out = train(cfg, dataset, None, None)?;
    Ok((out.weights, out.optimizer.expect("rnn objective"), out.log))
}
