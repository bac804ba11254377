//! Evaluation protocol: robust-accuracy tables with a min column, loss
//! trajectories, loss landscapes, transfer attacks and step generalization.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attacks::{Attack, AttackConfig, AttackFamily, BlsConfig};
use crate::autodiff::sign_value;
use crate::classifier::{self, ClassifierWeights, LossKind};
use crate::data::{self, Batch, Dataset};
use crate::error::{Error, Result};
use crate::learned::RnnOptimizerParams;
use crate::seed::{self, derive};
use crate::tensor::Tensor;

/// Batch size used when sweeping a dataset.
pub const EVAL_BATCH: usize = 200;
/// Size of the fixed batch used for trajectories.
pub const TRAJECTORY_BATCH: usize = 128;
/// Slack allowed on the l-infinity constraint.
pub const FEASIBILITY_TOL: f64 = 1e-12;

/// Builds an attack from a table column name: `natural`, `fgsm`, `pgd<N>`,
/// `pgdbls<N>`, `cw<N>` or `learned<N>`.
pub fn parse_attack(name: &str, epsilon: f64, optimizer: Option<&RnnOptimizerParams>) -> Result<Attack> {
    let lower = name.to_ascii_lowercase();
    let split = lower.find(|c: char| c.is_ascii_digit()).unwrap_or(lower.len());
    let (family, digits) = lower.split_at(split);
    let family = family.trim_end_matches(['-', '_']);
    let steps = || -> Result<usize> {
        digits
            .parse()
            .map_err(|_| Error::Config(format!("attack '{name}' needs a step count, e.g. pgd10")))
    };
    let attack = match family {
        "natural" | "none" if digits.is_empty() => Attack::identity(epsilon),
        "fgsm" if digits.is_empty() => Attack::new(name, AttackConfig::fgsm(epsilon)),
        "pgd" => Attack::new(name, AttackConfig::pgd(epsilon, steps()?)),
        "pgdbls" | "pgd-bls" | "bls" => {
            Attack::new(name, AttackConfig::pgd_bls(epsilon, steps()?)).with_bls(BlsConfig::for_epsilon(epsilon))
        }
        "cw" | "cwinf" => Attack::new(name, AttackConfig::cw_inf(epsilon, steps()?)),
        "learned" | "rnn" => {
            let params = optimizer.ok_or_else(|| {
                Error::Config(format!("attack '{name}' needs a learned optimizer checkpoint"))
            })?;
            Attack::new(name, AttackConfig::learned(epsilon, steps()?)).with_optimizer(params.clone())
        }
        _ => return Err(Error::Config(format!("unknown attack '{name}'"))),
    };
    attack.validate()?;
    Ok(attack)
}

fn check_feasible(x: &Tensor, x_adv: &Tensor, epsilon: f64) -> Result<()> {
    for (&a, &b) in x.data().iter().zip(x_adv.data()) {
        if (b - a).abs() > epsilon + FEASIBILITY_TOL || !(0.0..=1.0).contains(&b) {
            return Err(Error::Shape(format!(
                "attack produced an infeasible point ({b} from {a}, eps {epsilon})"
            )));
        }
    }
    Ok(())
}

fn correct(weights: &ClassifierWeights, x: &Tensor, y: &[usize]) -> Result<usize> {
    Ok(classifier::predict(weights, x)?
        .iter()
        .zip(y)
        .filter(|(p, y)| p == y)
        .count())
}

/// Adversarial examples for one batch, crafted against `source`.
fn craft(source: &ClassifierWeights, attack: &Attack, batch: &Batch, seed: u64) -> Result<Tensor> {
    let kind = LossKind::CrossEntropy(batch.y.clone());
    let x_adv = attack.run(source, &batch.x, &kind, seed, None)?.x_adv;
    if attack.config.steps > 0 {
        check_feasible(&batch.x, &x_adv, attack.config.epsilon)?;
    }
    Ok(x_adv)
}

/// Percentage of `dataset` still classified correctly after `attack`.
pub fn robust_accuracy(weights: &ClassifierWeights, attack: &Attack, dataset: &Dataset, seed: u64) -> Result<f64> {
    transfer_eval(weights, weights, attack, dataset, seed)
}

/// Adversarial examples are crafted on `surrogate` and scored on `target`.
pub fn transfer_eval(
    surrogate: &ClassifierWeights,
    target: &ClassifierWeights,
    attack: &Attack,
    dataset: &Dataset,
    seed: u64,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (s, t) = (surrogate.spec(), target.spec());
    if s.input_shape != t.input_shape || s.num_classes != t.num_classes {
        return Err(Error::Shape("surrogate and target disagree on input or output shape".into()));
    }
    let mut hits = 0;
    for (bi, batch) in data::sequential_batches(dataset, EVAL_BATCH)?.iter().enumerate() {
        let x_adv = craft(surrogate, attack, batch, derive(seed, &[bi as u64]))?;
        hits += correct(target, &x_adv, &batch.y)?;
    }
    Ok(100.0 * hits as f64 / dataset.len() as f64)
}

/// Robust accuracy under `attack` for each seed, and the lowest of them.
pub fn lowest_over_seeds(weights: &ClassifierWeights, attack: &Attack, dataset: &Dataset, seeds: &[u64]) -> Result<(Vec<f64>, f64)> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let all = seeds
        .iter()
        .map(|&s| robust_accuracy(weights, attack, dataset, s))
        .collect::<Result<Vec<_>>>()?;
    let lowest = all.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((all, lowest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub defense: String,
    pub natural: f64,
    /// One cell per attack column, in [`EvalReport::attacks`] order.
    pub cells: Vec<f64>,
    pub min: Option<f64>,
}

/// Defenses by attacks, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub attacks: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn new(attacks: Vec<String>) -> Self {
        Self {
            attacks,
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, defense: impl Into<String>, natural: f64, cells: Vec<f64>) -> Result<()> {
        if cells.len() != self.attacks.len() {
            return Err(Error::Shape(format!(
                "{} cells for {} attack columns",
                cells.len(),
                self.attacks.len()
            )));
        }
        if std::iter::once(natural).chain(cells.iter().copied()).any(|v| !(0.0..=100.0).contains(&v)) {
            return Err(Error::Config("accuracies must lie in [0, 100]".into()));
        }
        self.rows.push(ReportRow {
            defense: defense.into(),
            natural,
            cells,
            min: None,
        });
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("Defense,Natural");
        for a in &self.attacks {
            out.push(',');
            out.push_str(a);
        }
        out.push_str(",Min\n");
        for r in &self.rows {
            let _ = write!(out, "{},{:.2}", r.defense, r.natural);
            for c in &r.cells {
                let _ = write!(out, ",{c:.2}");
            }
            match r.min {
                Some(m) => {
                    let _ = writeln!(out, ",{m:.2}");
                }
                None => out.push_str(",\n"),
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, csv: impl AsRef<Path>, json: impl AsRef<Path>) -> Result<()> {
        let (csv, json) = (csv.as_ref(), json.as_ref());
        std::fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))?;
        std::fs::write(json, self.to_json()).map_err(|e| Error::io(json, e))
    }
}

/// Fills the min column: the row minimum over attack cells (Natural excluded).
pub fn min_across_attacks(mut report: EvalReport) -> Result<EvalReport> {
    if report.attacks.is_empty() {
        return Err(Error::Config("the min column needs at least one attack column".into()));
    }
    for r in &mut report.rows {
        r.min = Some(r.cells.iter().copied().fold(f64::INFINITY, f64::min));
    }
    Ok(report)
}

/// Evaluates every defense under every attack and fills the min column.
pub fn build_report(
    defenses: &[(String, &ClassifierWeights)],
    attacks: &[Attack],
    dataset: &Dataset,
    seed: u64,
) -> Result<EvalReport> {
    let mut report = EvalReport::new(attacks.iter().map(|a| a.name.clone()).collect());
    for (name, w) in defenses {
        let natural = robust_accuracy(w, &Attack::identity(1.0), dataset, seed)?;
        let cells = attacks
            .iter()
            .map(|a| robust_accuracy(w, a, dataset, seed))
            .collect::<Result<Vec<_>>>()?;
        report.push_row(name.clone(), natural, cells)?;
    }
    min_across_attacks(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub attack: String,
    /// Mean loss at the start point.
    pub initial: f64,
    /// Mean loss after each step.
    pub per_step: Vec<f64>,
    /// Accuracy (percent) after each step.
    pub per_step_accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub steps: usize,
    pub entries: Vec<Trajectory>,
}

impl TrajectoryLog {
    /// Rows are steps `0..=T`; one loss column per attack.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step");
        for e in &self.entries {
            let _ = write!(out, ",{}", e.attack);
        }
        out.push('\n');
        for t in 0..=self.steps {
            let _ = write!(out, "{t}");
            for e in &self.entries {
                let v = if t == 0 { e.initial } else { e.per_step[t - 1] };
                let _ = write!(out, ",{v:.10}");
            }
            out.push('\n');
        }
        out
    }
}

/// A fixed, seeded evaluation batch of up to `n` examples.
pub fn eval_batch(dataset: &Dataset, n: usize, seed: u64) -> Result<Batch> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let sub = dataset.shuffled_subset(n.min(dataset.len()), seed);
    let idx: Vec<usize> = (0..sub.len()).collect();
    Ok(sub.select(&idx))
}

/// Per-step mean cross-entropy (and accuracy) of each attack on one batch. All
/// attacks share the Gaussian start via `seed`.
pub fn attack_trajectory(weights: &ClassifierWeights, attacks: &[Attack], batch: &Batch, seed: u64) -> Result<TrajectoryLog> {
    let steps = attacks.first().map_or(0, |a| a.config.steps);
    if attacks.iter().any(|a| a.config.steps != steps) {
        return Err(Error::Config("all trajectory attacks must run the same number of steps".into()));
    }
    let kind = LossKind::CrossEntropy(batch.y.clone());
    let mut entries = Vec::with_capacity(attacks.len());
    for a in attacks {
        let mut iterates = Vec::with_capacity(steps);
        let mut obs = |_: usize, x: &Tensor| iterates.push(x.clone());
        a.run(weights, &batch.x, &kind, seed, Some(&mut obs))?;
        // Margin attacks report their own objective; score everything with
        // cross-entropy so the columns are comparable.
        let initial = classifier::loss(weights, &a.config.start(&batch.x, seed), &kind)?;
        let per_step = iterates
            .iter()
            .map(|x| classifier::loss(weights, x, &kind))
            .collect::<Result<Vec<_>>>()?;
        let per_step_accuracy = iterates
            .iter()
            .map(|x| Ok(100.0 * correct(weights, x, &batch.y)? as f64 / batch.len() as f64))
            .collect::<Result<Vec<_>>>()?;
        entries.push(Trajectory {
            attack: a.name.clone(),
            initial,
            per_step,
            per_step_accuracy,
        });
    }
    Ok(TrajectoryLog { steps, entries })
}

/// Loss over the plane `x + u d1 + v d2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub us: Vec<f64>,
    pub vs: Vec<f64>,
    /// `z[i][j]` is the loss at `(us[i], vs[j])`.
    pub z: Vec<Vec<f64>>,
}

impl LandscapeGrid {
    pub fn max(&self) -> f64 {
        self.z.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Value at the grid center; exact `(0, 0)` for odd resolutions.
    pub fn center(&self) -> f64 {
        self.z[self.us.len() / 2][self.vs.len() / 2]
    }

    /// Header row `u\v,<vs...>`, then one row per `u`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("u\\v");
        for v in &self.vs {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
        for (u, row) in self.us.iter().zip(&self.z) {
            let _ = write!(out, "{u}");
            for z in row {
                let _ = write!(out, ",{z:.10}");
            }
            out.push('\n');
        }
        out
    }
}

/// `n` points symmetric about zero on `[-extent, extent]`; the middle point
/// is exactly zero when `n` is odd.
pub fn symmetric_linspace(extent: f64, n: usize) -> Vec<f64> {
    let m = (n - 1) as f64;
    (0..n).map(|i| extent * (2.0 * i as f64 - m) / m).collect()
}

/// Loss landscape around one example: `d1 = sign(grad_x L(x))`, `d2` a seeded
/// Rademacher vector. Offsets are not projected or clipped.
pub fn loss_landscape(
    weights: &ClassifierWeights,
    x: &Tensor,
    label: usize,
    extent: f64,
    resolution: usize,
    seed: u64,
) -> Result<LandscapeGrid> {
    if resolution < 2 {
        return Err(Error::Config("landscape resolution must be at least 2".into()));
    }
    if !(extent > 0.0 && extent.is_finite()) {
        return Err(Error::Config(format!("landscape extent must be > 0, got {extent}")));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(&weights.spec().input_shape);
    let x = x.reshape(shape.clone())?;
    let kind = LossKind::CrossEntropy(vec![label]);
    let (_, g) = classifier::per_example_loss_and_input_grad(weights, &x, &kind)?;
    let d1: Vec<f64> = g.data().iter().map(|&v| sign_value(v)).collect();
    let mut rng = seed::rng(seed);
    let d2: Vec<f64> = (0..x.len()).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let us = symmetric_linspace(extent, resolution);
    let vs = us.clone();
    let points: Vec<(f64, f64)> = us.iter().flat_map(|&u| vs.iter().map(move |&v| (u, v))).collect();
    let mut z_flat = Vec::with_capacity(points.len());
    for chunk in points.chunks(EVAL_BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * x.len());
        for &(u, v) in chunk {
            data.extend(x.data().iter().zip(&d1).zip(&d2).map(|((&xi, &a), &b)| xi + u * a + v * b));
        }
        let mut s = shape.clone();
        s[0] = chunk.len();
        let batch = Tensor::new(s, data)?;
        z_flat.extend(classifier::per_example_losses(
            weights,
            &batch,
            &LossKind::CrossEntropy(vec![label; chunk.len()]),
        )?);
    }
    let z = z_flat.chunks(resolution).map(<[f64]>::to_vec).collect();
    Ok(LandscapeGrid { us, vs, z })
}

/// Robust accuracy under the learned attack run for each step count. The
/// hidden state is carried through every step of a run.
pub fn step_generalization(
    weights: &ClassifierWeights,
    params: &RnnOptimizerParams,
    dataset: &Dataset,
    epsilon: f64,
    steps_list: &[usize],
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    steps_list
        .iter()
        .map(|&steps| {
            let attack = Attack::new(format!("learned{steps}"), AttackConfig::learned(epsilon, steps))
                .with_optimizer(params.clone());
            Ok((steps, robust_accuracy(weights, &attack, dataset, seed)?))
        })
        .collect()
}

/// Column name for an attack family and step count, matching [`parse_attack`].
pub fn attack_name(family: AttackFamily, steps: usize) -> String {
    match family {
        AttackFamily::Fgsm => "fgsm".into(),
        AttackFamily::Pgd => format!("pgd{steps}"),
        AttackFamily::PgdBls => format!("pgdbls{steps}"),
        AttackFamily::CwInf => format!("cw{steps}"),
        AttackFamily::Learned => format!("learned{steps}"),
    }
}
