//! Hand-designed inner maximizers over the l-infinity ball: FGSM, fixed-step
//! PGD, PGD with backtracking line search, and a clipped-margin attack.
//!
//! Every attack starts from `x + 0.001 * N(0, I)` (unless disabled), takes
//! signed ascent steps and projects each iterate onto
//! `[x - eps, x + eps] ∩ [0, 1]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sign_value, Tape};
use crate::classifier::{self, ClassifierWeights, LossKind};
use crate::data::gaussian_perturb;
use crate::error::{Error, Result};
use crate::learned::{self, RnnOptimizerParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackFamily {
    Fgsm,
    Pgd,
    PgdBls,
    CwInf,
    Learned,
}

impl AttackFamily {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "fgsm" => Ok(Self::Fgsm),
            "pgd" => Ok(Self::Pgd),
            "pgd-bls" | "pgdbls" | "bls" => Ok(Self::PgdBls),
            "cw" | "cw-inf" | "cwinf" => Ok(Self::CwInf),
            "learned" | "rnn" => Ok(Self::Learned),
            other => Err(Error::Config(format!("unknown attack family '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Fgsm => "fgsm",
            Self::Pgd => "pgd",
            Self::PgdBls => "pgd-bls",
            Self::CwInf => "cw-inf",
            Self::Learned => "learned",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub family: AttackFamily,
    /// l-infinity radius.
    pub epsilon: f64,
    pub steps: usize,
    /// Fixed step size (PGD, FGSM, CW); unused by PGD_BLS and the learned attack.
    pub step_size: f64,
    /// Start from `x + 0.001 N(0, I)` rather than `x`.
    pub gaussian_init: bool,
}

impl AttackConfig {
    /// PGD with the usual `eps / 4` step.
    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        Self {
            family: AttackFamily::Pgd,
            epsilon,
            steps,
            step_size: epsilon / 4.0,
            gaussian_init: true,
        }
    }

    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            family: AttackFamily::Fgsm,
            epsilon,
            steps: 1,
            step_size: epsilon,
            gaussian_init: true,
        }
    }

    pub fn pgd_bls(epsilon: f64, steps: usize) -> Self {
        Self {
            family: AttackFamily::PgdBls,
            ..Self::pgd(epsilon, steps)
        }
    }

    pub fn cw_inf(epsilon: f64, steps: usize) -> Self {
        Self {
            family: AttackFamily::CwInf,
            ..Self::pgd(epsilon, steps)
        }
    }

    pub fn learned(epsilon: f64, steps: usize) -> Self {
        Self {
            family: AttackFamily::Learned,
            ..Self::pgd(epsilon, steps)
        }
    }

    pub fn without_gaussian_init(mut self) -> Self {
        self.gaussian_init = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        let needs_step = matches!(
            self.family,
            AttackFamily::Fgsm | AttackFamily::Pgd | AttackFamily::CwInf
        );
        if needs_step && !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!(
                "step size must be > 0, got {}",
                self.step_size
            )));
        }
        Ok(())
    }

    /// The first iterate: `x` with seeded Gaussian noise when enabled.
    pub fn start(&self, x: &Tensor, seed: u64) -> Tensor {
        if self.gaussian_init {
            gaussian_perturb(x, seed)
        } else {
            x.clone()
        }
    }

    fn expect(&self, family: AttackFamily) -> Result<()> {
        if self.family != family {
            return Err(Error::Config(format!(
                "{} attack called with a {} config",
                family.name(),
                self.family.name()
            )));
        }
        self.validate()
    }
}

/// Which direction the line-search step multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlsDirection {
    /// `sign(grad)`, matching PGD's update direction.
    Sign,
    /// The raw gradient.
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlsConfig {
    pub alpha0: f64,
    pub rho: f64,
    pub c: f64,
    pub max_backtracks: usize,
    pub direction: BlsDirection,
}

impl BlsConfig {
    pub const DEFAULT_RHO: f64 = 0.5;
    pub const DEFAULT_C: f64 = 1e-4;
    pub const DEFAULT_MAX_BACKTRACKS: usize = 10;

    /// Defaults with the first trial step equal to the ball radius.
    pub fn for_epsilon(epsilon: f64) -> Self {
        Self {
            alpha0: epsilon,
            rho: Self::DEFAULT_RHO,
            c: Self::DEFAULT_C,
            max_backtracks: Self::DEFAULT_MAX_BACKTRACKS,
            direction: BlsDirection::Sign,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config(format!("rho must be in (0, 1), got {}", self.rho)));
        }
        if !(self.c > 0.0 && self.c < 1.0) {
            return Err(Error::Config(format!("c must be in (0, 1), got {}", self.c)));
        }
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(Error::Config(format!("alpha0 must be > 0, got {}", self.alpha0)));
        }
        if self.max_backtracks == 0 {
            return Err(Error::Config("max_backtracks must be at least 1".into()));
        }
        Ok(())
    }

    /// The `k`-th trial step, `alpha0 * rho^k`.
    pub fn trial(&self, k: usize) -> f64 {
        self.alpha0 * self.rho.powi(k as i32)
    }
}

/// A per-example objective the attacks ascend. Rows of `x` are independent
/// problems; gradients are of the *sum* of per-example values.
pub trait AttackObjective {
    fn loss_and_grad(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)>;
    fn losses(&self, x: &Tensor) -> Result<Vec<f64>>;
}

/// A classifier's loss for fixed targets.
pub struct ModelObjective<'a> {
    pub weights: &'a ClassifierWeights,
    pub kind: &'a LossKind,
}

impl AttackObjective for ModelObjective<'_> {
    fn loss_and_grad(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        classifier::per_example_loss_and_input_grad(self.weights, x, self.kind)
    }

    fn losses(&self, x: &Tensor) -> Result<Vec<f64>> {
        classifier::per_example_losses(self.weights, x, self.kind)
    }
}

/// Negated clipped margin `-max(z_y - max_{j != y} z_j, -kappa)`; ascending it
/// pushes the true-class logit below the runner-up.
pub struct MarginObjective<'a> {
    pub weights: &'a ClassifierWeights,
    pub labels: &'a [usize],
    pub kappa: f64,
}

impl MarginObjective<'_> {
    fn eval(&self, x: &Tensor, grad: bool) -> Result<(Vec<f64>, Option<Tensor>)> {
        let tape = Tape::new();
        let params: Vec<_> = self.weights.params().iter().map(|p| tape.constant(p.clone())).collect();
        let xv = if grad { tape.leaf(x.clone()) } else { tape.constant(x.clone()) };
        let logits = self.weights.forward_on(xv, &params)?;
        let obj = logits.margin(self.labels, self.kappa)?.scale(-1.0);
        let vals = obj.value();
        vals.ensure_finite("margin loss")?;
        let g = if grad {
            let g = tape.backward(obj.sum())?.wrt(xv);
            g.ensure_finite("margin gradient")?;
            Some(g)
        } else {
            None
        };
        Ok((vals.into_data(), g))
    }
}

impl AttackObjective for MarginObjective<'_> {
    fn loss_and_grad(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let (v, g) = self.eval(x, true)?;
        Ok((v, g.expect("gradient requested")))
    }

    fn losses(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.eval(x, false)?.0)
    }
}

/// Elementwise sign with `sign(0) = 1`.
pub fn sign(t: &Tensor) -> Tensor {
    t.map(sign_value)
}

/// `max(x - eps, min(x', x + eps))` per coordinate, then clamped to `[0, 1]`.
pub fn project(x_ref: &Tensor, x_prime: &Tensor, epsilon: f64) -> Result<Tensor> {
    x_ref.zip_map(x_prime, |x, xp| project_scalar(x, xp, epsilon))
}

#[inline]
pub(crate) fn project_scalar(x: f64, xp: f64, epsilon: f64) -> f64 {
    (x - epsilon).max(xp.min(x + epsilon)).clamp(0.0, 1.0)
}

/// Armijo sufficient-increase test `L(trial) >= L(current) + c * alpha * p^T p`.
pub fn armijo_accepts(loss_at_trial: f64, loss_at_current: f64, alpha: f64, p: &[f64], c: f64) -> bool {
    let pp: f64 = p.iter().map(|v| v * v).sum();
    loss_at_trial >= loss_at_current + c * alpha * pp
}

/// Result of a backtracking search for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct BlsOutcome {
    pub alpha: f64,
    /// Every step size tried, in order.
    pub trials: Vec<f64>,
    /// `false` when no trial passed and `alpha` fell back to `alpha0 * rho^max_backtracks`.
    pub accepted: bool,
}

fn step_point(x_ref: &Tensor, cur: &Tensor, grad: &Tensor, alphas: &[f64], eps: f64, dir: BlsDirection) -> Tensor {
    let n = cur.row_len();
    let mut out = cur.clone();
    for (i, &alpha) in alphas.iter().enumerate() {
        let (xr, c, g) = (x_ref.row(i), cur.row(i), grad.row(i));
        for (j, o) in out.row_mut(i).iter_mut().enumerate().take(n) {
            let d = match dir {
                BlsDirection::Sign => sign_value(g[j]),
                BlsDirection::Gradient => g[j],
            };
            *o = project_scalar(xr[j], c[j] + alpha * d, eps);
        }
    }
    out
}

/// Backtracking line search at `x_prime`, independently for every example.
///
/// Trial `k` uses `alpha0 * rho^k` for `k < max_backtracks`; the trial point
/// is the projected step actually taken by the attack. `losses` and `grad`
/// are the objective and its gradient at `x_prime`.
pub fn bls_search<O: AttackObjective + ?Sized>(
    objective: &O,
    x_ref: &Tensor,
    x_prime: &Tensor,
    epsilon: f64,
    losses: &[f64],
    grad: &Tensor,
    bls: &BlsConfig,
) -> Result<Vec<BlsOutcome>> {
    bls.validate()?;
    let b = x_prime.batch_size();
    if losses.len() != b || grad.shape() != x_prime.shape() || x_ref.shape() != x_prime.shape() {
        return Err(Error::Shape("bls_search inputs disagree on the batch".into()));
    }
    let mut out: Vec<Option<BlsOutcome>> = vec![None; b];
    let mut trials: Vec<Vec<f64>> = vec![Vec::new(); b];
    for k in 0..bls.max_backtracks {
        let alpha = bls.trial(k);
        let alphas = vec![alpha; b];
        let trial = step_point(x_ref, x_prime, grad, &alphas, epsilon, bls.direction);
        let trial_losses = objective.losses(&trial)?;
        for i in 0..b {
            if out[i].is_some() {
                continue;
            }
            if !trial_losses[i].is_finite() {
                return Err(Error::NonFinite(format!("line-search loss at trial {k}")));
            }
            trials[i].push(alpha);
            if armijo_accepts(trial_losses[i], losses[i], alpha, grad.row(i), bls.c) {
                out[i] = Some(BlsOutcome {
                    alpha,
                    trials: std::mem::take(&mut trials[i]),
                    accepted: true,
                });
            }
        }
        if out.iter().all(Option::is_some) {
            break;
        }
    }
    Ok(out
        .into_iter()
        .zip(trials)
        .map(|(o, t)| {
            o.unwrap_or(BlsOutcome {
                alpha: bls.trial(bls.max_backtracks),
                trials: t,
                accepted: false,
            })
        })
        .collect())
}

/// Output of a hand-designed or learned attack.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub x_adv: Tensor,
    /// Batch-mean objective at the start point.
    pub initial_loss: f64,
    /// Batch-mean objective after each step (length = steps).
    pub step_losses: Vec<f64>,
    /// Line-search steps that fell back without passing the Armijo test.
    pub bls_warnings: usize,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Observer of intermediate iterates: called with `(t, x'_t)` after every step.
pub type Observer<'a> = &'a mut dyn FnMut(usize, &Tensor);

/// Signed-gradient ascent with projection; shared by FGSM, PGD and CW.
/// `frozen` marks rows whose objective already meets its target.
fn signed_ascent<O: AttackObjective + ?Sized>(
    objective: &O,
    x: &Tensor,
    cfg: &AttackConfig,
    seed: u64,
    freeze_at: Option<f64>,
    observer: Option<Observer<'_>>,
) -> Result<AttackOutcome> {
    let mut obs = observer;
    let mut cur = cfg.start(x, seed);
    let mut step_losses = Vec::with_capacity(cfg.steps);
    if cfg.steps == 0 {
        let initial = mean(&objective.losses(&cur)?);
        return Ok(AttackOutcome {
            x_adv: cur,
            initial_loss: initial,
            step_losses,
            bls_warnings: 0,
        });
    }
    let (mut losses, mut grad) = objective.loss_and_grad(&cur)?;
    let initial = mean(&losses);
    for t in 0..cfg.steps {
        let n = cur.row_len();
        let mut next = cur.clone();
        for i in 0..cur.batch_size() {
            // Frozen rows are only projected, so a Gaussian start stays feasible.
            let step = if freeze_at.is_some_and(|target| losses[i] >= target) {
                0.0
            } else {
                cfg.step_size
            };
            let (xr, c, g) = (x.row(i), cur.row(i), grad.row(i));
            for (j, o) in next.row_mut(i).iter_mut().enumerate().take(n) {
                *o = project_scalar(xr[j], c[j] + step * sign_value(g[j]), cfg.epsilon);
            }
        }
        cur = next;
        if let Some(f) = obs.as_mut() {
            f(t + 1, &cur);
        }
        if t + 1 < cfg.steps {
            (losses, grad) = objective.loss_and_grad(&cur)?;
        } else {
            losses = objective.losses(&cur)?;
        }
        if losses.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("attack loss at step {}", t + 1)));
        }
        step_losses.push(mean(&losses));
    }
    Ok(AttackOutcome {
        x_adv: cur,
        initial_loss: initial,
        step_losses,
        bls_warnings: 0,
    })
}

/// Fixed-step PGD: `x'_{t+1} = Π(x'_t + α sign(∇L(x'_t)))`.
pub fn pgd_attack<O: AttackObjective + ?Sized>(
    objective: &O,
    x: &Tensor,
    cfg: &AttackConfig,
    seed: u64,
    observer: Option<Observer<'_>>,
) -> Result<AttackOutcome> {
    cfg.expect(AttackFamily::Pgd)?;
    signed_ascent(objective, x, cfg, seed, None, observer)
}

/// A single signed step of size `eps`.
pub fn fgsm_attack<O: AttackObjective + ?Sized>(
    objective: &O,
    x: &Tensor,
    cfg: &AttackConfig,
    seed: u64,
    observer: Option<Observer<'_>>,
) -> Result<AttackOutcome> {
    cfg.expect(AttackFamily::Fgsm)?;
    let one_step = AttackConfig {
        steps: 1,
        step_size: cfg.epsilon,
        ..*cfg
    };
    signed_ascent(objective, x, &one_step, seed, None, observer)
}

/// PGD whose per-example step size comes from [`bls_search`].
pub fn pgd_bls_attack<O: AttackObjective + ?Sized>(
    objective: &O,
    x: &Tensor,
    cfg: &AttackConfig,
    bls: &BlsConfig,
    seed: u64,
    observer: Option<Observer<'_>>,
) -> Result<AttackOutcome> {
    cfg.expect(AttackFamily::PgdBls)?;
    bls.validate()?;
    let mut obs = observer;
    let mut cur = cfg.start(x, seed);
    let mut step_losses = Vec::with_capacity(cfg.steps);
    let mut warnings = 0;
    if cfg.steps == 0 {
        let initial = mean(&objective.losses(&cur)?);
        return Ok(AttackOutcome {
            x_adv: cur,
            initial_loss: initial,
            step_losses,
            bls_warnings: 0,
        });
    }
    let (mut losses, mut grad) = objective.loss_and_grad(&cur)?;
    let initial = mean(&losses);
    for t in 0..cfg.steps {
        let outcomes = bls_search(objective, x, &cur, cfg.epsilon, &losses, &grad, bls)?;
        warnings += outcomes.iter().filter(|o| !o.accepted).count();
        let alphas: Vec<f64> = outcomes.iter().map(|o| o.alpha).collect();
        cur = step_point(x, &cur, &grad, &alphas, cfg.epsilon, bls.direction);
        if let Some(f) = obs.as_mut() {
            f(t + 1, &cur);
        }
        if t + 1 < cfg.steps {
            (losses, grad) = objective.loss_and_grad(&cur)?;
        } else {
            losses = objective.losses(&cur)?;
        }
        if losses.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("attack loss at step {}", t + 1)));
        }
        step_losses.push(mean(&losses));
    }
    Ok(AttackOutcome {
        x_adv: cur,
        initial_loss: initial,
        step_losses,
        bls_warnings: warnings,
    })
}

/// Margin attack with `kappa = 0`: signed ascent on the negated clipped
/// margin with step `cfg.step_size`. Examples stop moving once their margin
/// reaches `-kappa`, so a misclassified point stays misclassified.
pub fn cw_inf_attack(
    weights: &ClassifierWeights,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    seed: u64,
    observer: Option<Observer<'_>>,
) -> Result<AttackOutcome> {
    cfg.expect(AttackFamily::CwInf)?;
    const KAPPA: f64 = 0.0;
    let objective = MarginObjective {
        weights,
        labels,
        kappa: KAPPA,
    };
    signed_ascent(&objective, x, cfg, seed, Some(KAPPA), observer)
}

/// A fully specified attack, ready to run against any classifier.
#[derive(Debug, Clone)]
pub struct Attack {
    pub name: String,
    pub config: AttackConfig,
    pub bls: Option<BlsConfig>,
    pub optimizer: Option<RnnOptimizerParams>,
}

impl Attack {
    pub fn new(name: impl Into<String>, config: AttackConfig) -> Self {
        Self {
            name: name.into(),
            config,
            bls: None,
            optimizer: None,
        }
    }

    pub fn with_bls(mut self, bls: BlsConfig) -> Self {
        self.bls = Some(bls);
        self
    }

    pub fn with_optimizer(mut self, params: RnnOptimizerParams) -> Self {
        self.optimizer = Some(params);
        self
    }

    /// Zero-step, noise-free attack: `x_adv = x`.
    pub fn identity(epsilon: f64) -> Self {
        Self::new(
            "natural",
            AttackConfig {
                steps: 0,
                ..AttackConfig::pgd(epsilon, 0).without_gaussian_init()
            },
        )
    }

    pub fn with_steps(&self, steps: usize) -> Self {
        let mut a = self.clone();
        a.config.steps = steps;
        a
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        match self.config.family {
            AttackFamily::PgdBls => self
                .bls
                .ok_or_else(|| Error::Config("PGD_BLS attack needs a line-search config".into()))?
                .validate(),
            AttackFamily::Learned => {
                self.optimizer
                    .as_ref()
                    .ok_or_else(|| Error::Config("learned attack needs optimizer parameters".into()))?;
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Runs the attack on `x`; `labels` are the true classes (used by CW and
    /// by the default cross-entropy objective).
    pub fn run(
        &self,
        weights: &ClassifierWeights,
        x: &Tensor,
        kind: &LossKind,
        seed: u64,
        observer: Option<Observer<'_>>,
    ) -> Result<AttackOutcome> {
        self.validate()?;
        let objective = ModelObjective { weights, kind };
        match self.config.family {
            AttackFamily::Pgd => pgd_attack(&objective, x, &self.config, seed, observer),
            AttackFamily::Fgsm => fgsm_attack(&objective, x, &self.config, seed, observer),
            AttackFamily::PgdBls => {
                let bls = self.bls.expect("validated");
                pgd_bls_attack(&objective, x, &self.config, &bls, seed, observer)
            }
            AttackFamily::CwInf => {
                let LossKind::CrossEntropy(labels) = kind else {
                    return Err(Error::Config("the margin attack needs class labels".into()));
                };
                cw_inf_attack(weights, x, labels, &self.config, seed, observer)
            }
            AttackFamily::Learned => {
                let params = self.optimizer.as_ref().expect("validated");
                let (x_adv, record) = learned::learned_attack_observed(
                    weights,
                    params,
                    x,
                    kind,
                    self.config.epsilon,
                    self.config.steps,
                    seed,
                    self.config.gaussian_init,
                    observer,
                )?;
                Ok(AttackOutcome {
                    x_adv,
                    initial_loss: record.initial_loss,
                    step_losses: record.step_losses.clone(),
                    bls_warnings: 0,
                })
            }
        }
    }
}
