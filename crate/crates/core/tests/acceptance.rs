//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --release --test acceptance`. Desk-scale criteria
//! train on a 6k MNIST subset, so the full run takes most of an hour on one
//! core. The process exits 0 whatever the verdicts are; a panic means the
//! suite itself broke.

mod common;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use rand::Rng as _;
use rnnadv::attacks::{
    armijo_accepts, bls_search, project, Attack, AttackConfig, AttackObjective, BlsConfig, ModelObjective,
};
use rnnadv::autodiff::finite_diff_grad;
use rnnadv::classifier::{self, ClassifierWeights, LossKind};
use rnnadv::data::{self, Dataset, Split};
use rnnadv::eval::{self, EvalReport};
use rnnadv::learned::{self, param_count, rnn_step, HiddenState, Readout, RnnOptimizerParams, StepWeights};
use rnnadv::seed::derive;
use rnnadv::trainer::{self, Objective, TrainConfig};
use rnnadv::Tensor;

const SEEDS: [u64; 3] = [1, 2, 3];
const EPSILON: f64 = 0.3;
const TRAIN_SIZE: usize = 6000;
const TEST_SIZE: usize = 1000;
/// Examples used for the 40-step learned attack, to stay inside its budget.
const LONG_ATTACK_SIZE: usize = 500;
const GRAD_TRIALS: u64 = 200;
const GRAD_TOL: f64 = 1e-5;
const META_GRAD_TOL: f64 = 1e-4;
const FEASIBILITY_CHECKS: usize = 10_000;
const FEAS_TOL: f64 = 1e-12;
/// Percentage points of slack in the robustness ordering.
const ORDERING_SLACK: f64 = 2.0;
const MAJORITY: usize = 2;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn report(n: usize, title: &str, budget: Option<Duration>, elapsed: Duration, v: Verdict) {
    let in_time = budget.is_none_or(|b| elapsed <= b);
    let status = if v.pass && in_time { "PASS" } else { "FAIL" };
    let budget = budget.map_or(String::new(), |b| format!(" / {}s", b.as_secs_f64()));
    let late = if in_time { "" } else { " (over budget)" };
    println!(
        "{status} criterion {n:>2}: {title}: {} [{:.1}s{budget}{late}]",
        v.detail,
        elapsed.as_secs_f64()
    );
}

fn percent(xs: &[bool]) -> f64 {
    100.0 * xs.iter().filter(|&&b| b).count() as f64 / xs.len().max(1) as f64
}

fn count(xs: &[bool]) -> usize {
    xs.iter().filter(|&&b| b).count()
}

// ---------------------------------------------------------------------------
// Criteria that need no training.

fn c1() -> Verdict {
    let p = RnnOptimizerParams::init(10, 0).unwrap();
    let n = param_count(&p);
    verdict(n == 120, format!("param_count(d=10) = {n}"))
}

fn c2() -> Verdict {
    let mut worst = [0.0f64; 3];
    for trial in 0..GRAD_TRIALS {
        let spec = if trial % 2 == 0 { tiny_spec() } else { mlp_spec() };
        let w = weights(&spec, trial, 2.0);
        let (x, y) = batch(&spec, 2, derive(7, &[trial]), 0.0, 1.0);
        let kind = if trial % 4 == 3 {
            let (r, _) = batch(&spec, 2, derive(8, &[trial]), 0.0, 1.0);
            LossKind::KlToReference(classifier::forward(&w, &r).unwrap())
        } else {
            LossKind::CrossEntropy(y.clone())
        };
        let a = classifier::value_and_grad_input(&w, &kind, &x).unwrap();
        let fd = finite_diff_grad(|x| classifier::loss(&w, x, &kind), &x, 1e-5).unwrap();
        worst[0] = worst[0].max(rel_err(a.get("input").unwrap(), &fd));

        let kind = LossKind::CrossEntropy(y);
        let a = classifier::value_and_grad_params(&w, &kind, &x).unwrap();
        let fd: Vec<Tensor> = (0..w.params().len())
            .map(|k| {
                finite_diff_grad(
                    |p| {
                        let mut ps = w.params().to_vec();
                        ps[k] = p.clone();
                        classifier::loss(&ClassifierWeights::from_params(&spec, ps).unwrap(), &x, &kind)
                    },
                    &w.params()[k],
                    1e-5,
                )
                .unwrap()
            })
            .collect();
        let got: Vec<Tensor> = a.grads.iter().map(|(_, g)| g.clone()).collect();
        worst[1] = worst[1].max(rel_err(&flat(&got), &flat(&fd)));

        let spec = mlp_spec();
        let w = weights(&spec, trial + 500, 2.0);
        let (x, y) = batch(&spec, 2, derive(13, &[trial]), 0.1, 0.9);
        let kind = LossKind::CrossEntropy(y);
        let mut p = RnnOptimizerParams::init(3, trial).unwrap();
        if trial % 3 == 1 {
            p = p.with_readout(Readout::Updated);
        }
        let eps = if trial % 5 == 0 { 0.02 } else { EPSILON };
        let steps = 1 + trial as usize % 5;
        let sw = StepWeights::Linear;
        let (bundle, record) = learned::meta_grad(&w, &p, &x, &kind, eps, steps, trial, &sw).unwrap();
        let got: Vec<Tensor> = bundle.grads.iter().map(|(_, g)| g.clone()).collect();
        let oracle = meta_grad_oracle(&w, &p, &record, &kind, &sw, 1e-5);
        worst[2] = worst[2].max(rel_err(&flat(&got), &flat(&oracle)));
    }
    verdict(
        worst[0] <= GRAD_TOL && worst[1] <= GRAD_TOL && worst[2] <= META_GRAD_TOL,
        format!(
            "{GRAD_TRIALS} trials, worst relative error input {:.1e}, params {:.1e}, meta {:.1e}",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn c3() -> Verdict {
    let mut checks = 0;
    let mut violations = 0;
    let mut trial = 0u64;
    while checks < FEASIBILITY_CHECKS {
        let spec = relu_spec();
        let mut rng = rnnadv::seed::rng(derive(30, &[trial]));
        let eps = rng.random_range(0.01..0.5);
        let steps = rng.random_range(1..8);
        let w = weights(&spec, trial, 3.0);
        let (x, y) = batch(&spec, 4, derive(31, &[trial]), 0.0, 1.0);
        let kind = LossKind::CrossEntropy(y);
        let opt = RnnOptimizerParams::init(4, trial).unwrap();
        let opt = RnnOptimizerParams {
            u: opt.u.scale(50.0),
            v: opt.v.scale(20.0),
            ..opt
        };
        let attacks = [
            Attack::new("fgsm", AttackConfig::fgsm(eps)),
            Attack::new("pgd", AttackConfig::pgd(eps, steps)),
            Attack::new("bls", AttackConfig::pgd_bls(eps, steps)).with_bls(BlsConfig::for_epsilon(eps)),
            Attack::new("cw", AttackConfig::cw_inf(eps, steps)),
            Attack::new("learned", AttackConfig::learned(eps, steps)).with_optimizer(opt),
        ];
        for a in &attacks {
            let mut obs = |_: usize, it: &Tensor| {
                let cols = it.len() / it.batch_size();
                for (xr, ir) in x.data().chunks(cols).zip(it.data().chunks(cols)) {
                    checks += 1;
                    let ok = xr
                        .iter()
                        .zip(ir)
                        .all(|(&a, &b)| (b - a).abs() <= eps + FEAS_TOL && (0.0..=1.0).contains(&b));
                    if !ok {
                        violations += 1;
                    }
                }
            };
            a.run(&w, &x, &kind, trial, Some(&mut obs)).unwrap();
        }
        trial += 1;
    }
    verdict(
        violations == 0,
        format!("{checks} iterate checks over 5 families, {violations} violations"),
    )
}

/// Elementwise toy objective, summed per row.
struct Toy<F: Fn(f64) -> (f64, f64)>(F);

impl<F: Fn(f64) -> (f64, f64)> AttackObjective for Toy<F> {
    fn loss_and_grad(&self, x: &Tensor) -> rnnadv::Result<(Vec<f64>, Tensor)> {
        Ok((self.losses(x)?, x.map(|v| (self.0)(v).1)))
    }
    fn losses(&self, x: &Tensor) -> rnnadv::Result<Vec<f64>> {
        Ok((0..x.batch_size()).map(|i| x.row(i).iter().map(|&v| (self.0)(v).0).sum()).collect())
    }
}

fn c4() -> Verdict {
    // f(z) = z - z^2 at z = 0 with alpha0 = 1: the full step lands at f = 0,
    // short of the Armijo bound, and the halved step is accepted.
    let toy = Toy(|z| (z - z * z, 1.0 - 2.0 * z));
    let x = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
    let (l, g) = toy.loss_and_grad(&x).unwrap();
    let bls = BlsConfig {
        alpha0: 1.0,
        ..BlsConfig::for_epsilon(1.0)
    };
    let out = bls_search(&toy, &x, &x, 1.0, &l, &g, &bls).unwrap();
    let toy_ok = out[0].trials == [1.0, 0.5] && out[0].alpha == 0.5 && out[0].accepted;

    let (mut accepted, mut warnings, mut bad) = (0, 0, 0);
    for seed in 0..40u64 {
        let spec = tiny_spec();
        let w = weights(&spec, seed, 2.0);
        let (x, y) = batch(&spec, 6, derive(40, &[seed]), 0.0, 1.0);
        let kind = LossKind::CrossEntropy(y);
        let obj = ModelObjective {
            weights: &w,
            kind: &kind,
        };
        // Search from the clean point and from a perturbed iterate.
        let start = project(&x, &data::gaussian_perturb(&x, seed), EPSILON).unwrap();
        for cur in [x.clone(), start] {
            let (losses, grad) = obj.loss_and_grad(&cur).unwrap();
            let bls = BlsConfig::for_epsilon(EPSILON);
            for (i, o) in bls_search(&obj, &x, &cur, EPSILON, &losses, &grad, &bls).unwrap().iter().enumerate() {
                let expected: Vec<f64> = (0..o.trials.len()).map(|k| bls.alpha0 * bls.rho.powi(k as i32)).collect();
                if o.trials != expected {
                    bad += 1;
                }
                if !o.accepted {
                    warnings += 1;
                    continue;
                }
                accepted += 1;
                let stepped = Tensor::new(
                    cur.shape().to_vec(),
                    cur.data()
                        .iter()
                        .zip(grad.data())
                        .map(|(c, g)| c + o.alpha * if *g < 0.0 { -1.0 } else { 1.0 })
                        .collect(),
                )
                .unwrap();
                let trial = project(&x, &stepped, EPSILON).unwrap();
                let tl = classifier::per_example_losses(&w, &trial, &kind).unwrap()[i];
                if !armijo_accepts(tl, losses[i], o.alpha, grad.row(i), bls.c) {
                    bad += 1;
                }
            }
        }
    }
    verdict(
        toy_ok && bad == 0 && accepted > 0,
        format!(
            "toy trials {:?} -> {}, {accepted} accepted steps checked, {warnings} warnings, {bad} violations",
            out[0].trials, out[0].alpha
        ),
    )
}

fn c5() -> Verdict {
    let mut ok = true;
    for seed in 0..100u64 {
        let d = 1 + seed as usize % 16;
        let p = RnnOptimizerParams::init(d, seed).unwrap();
        let big = RnnOptimizerParams {
            u: p.u.scale(100.0),
            w: p.w.scale(100.0),
            v: p.v.scale(100.0),
            ..p
        };
        for params in [big.clone(), big.with_readout(Readout::Updated), RnnOptimizerParams::zeros(d).unwrap()] {
            let g = Tensor::zeros(vec![2, 1, 3, 3]);
            let (delta, next) = rnn_step(&params, &g, &HiddenState::zeros(g.shape(), d)).unwrap();
            ok &= delta.data().iter().all(|&v| v == 0.0) && next.h.data().iter().all(|&v| v == 0.0);
        }
    }
    verdict(ok, "rnn_step(0, 0) == (0, 0) for 300 parameter sets")
}

fn c11() -> Verdict {
    let mut r = EvalReport::new(["a", "b", "c", "d", "e"].map(String::from).to_vec());
    r.push_row("AdvTrain", 99.0, vec![94.89, 94.28, 98.38, 95.83, 94.39]).unwrap();
    let r = eval::min_across_attacks(r).unwrap();
    let min = r.rows[0].min.unwrap();
    let csv_ok = r.to_csv().lines().nth(1).is_some_and(|l| l.ends_with(",94.28"));
    verdict(min == 94.28 && csv_ok, format!("row minimum {min}"))
}

// ---------------------------------------------------------------------------
// Desk-scale criteria.

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
enum Model {
    Plain,
    AdvTrain,
    AdvTrainBls,
    Trades,
    RnnAdv,
    RnnTrades,
}

impl Model {
    fn config(self, seed: u64) -> TrainConfig {
        let (objective, bls) = match self {
            Model::Plain => (Objective::Plain, false),
            Model::AdvTrain => (Objective::AdvTrain, false),
            Model::AdvTrainBls => (Objective::AdvTrain, true),
            Model::Trades => (Objective::Trades, false),
            Model::RnnAdv => (Objective::RnnAdv, false),
            Model::RnnTrades => (Objective::RnnTrades, false),
        };
        TrainConfig {
            bls,
            ..TrainConfig::desk(objective, seed)
        }
    }
}

struct Trained {
    weights: ClassifierWeights,
    optimizer: Option<RnnOptimizerParams>,
    took: Duration,
}

struct Desk {
    train: Dataset,
    test: Dataset,
    models: HashMap<(Model, u64), Trained>,
}

impl Desk {
    fn load(dir: &Path) -> rnnadv::Result<Self> {
        Ok(Desk {
            train: data::load_mnist_dir(dir, Split::Train)?,
            test: data::load_mnist_dir(dir, Split::Test)?.head(TEST_SIZE),
            models: HashMap::new(),
        })
    }

    /// Trains on first use; returns the model and the training time charged
    /// to this call (zero when cached).
    fn get(&mut self, m: Model, seed: u64) -> (&Trained, Duration) {
        let mut charged = Duration::ZERO;
        if !self.models.contains_key(&(m, seed)) {
            let t = Instant::now();
            let cfg = m.config(seed);
            assert_eq!(cfg.subset, Some(TRAIN_SIZE));
            let out = trainer::train(&cfg, &self.train, None, None).unwrap();
            let took = t.elapsed();
            eprintln!("  trained {m:?} seed {seed} in {:.0}s", took.as_secs_f64());
            charged = took;
            self.models.insert(
                (m, seed),
                Trained {
                    weights: out.weights,
                    optimizer: out.optimizer,
                    took,
                },
            );
        }
        (&self.models[&(m, seed)], charged)
    }
}

fn pgd10() -> Attack {
    eval::parse_attack("pgd10", EPSILON, None).unwrap()
}

fn c6(desk: &mut Desk) -> (Verdict, Duration) {
    let mut extra = Duration::ZERO;
    let (mut defense, mut attack) = (Vec::new(), Vec::new());
    let mut parts = Vec::new();
    for s in SEEDS {
        let (adv, t1) = desk.get(Model::AdvTrain, s);
        let adv = adv.weights.clone();
        let (bls, t2) = desk.get(Model::AdvTrainBls, s);
        let bls = bls.weights.clone();
        extra += t1 + t2;
        let a_pgd = eval::robust_accuracy(&adv, &pgd10(), &desk.test, s).unwrap();
        let b_pgd = eval::robust_accuracy(&bls, &pgd10(), &desk.test, s).unwrap();
        let a_bls = eval::robust_accuracy(&adv, &eval::parse_attack("pgdbls10", EPSILON, None).unwrap(), &desk.test, s).unwrap();
        defense.push(b_pgd >= a_pgd);
        attack.push(a_bls <= a_pgd);
        parts.push(format!("s{s}: bls-trained {b_pgd:.1} vs {a_pgd:.1}, bls-attack {a_bls:.1}"));
    }
    (
        verdict(
            count(&defense) >= MAJORITY && count(&attack) >= MAJORITY,
            format!(
                "defense {}/3, attack {}/3 ({})",
                count(&defense),
                count(&attack),
                parts.join("; ")
            ),
        ),
        extra,
    )
}

fn c7(desk: &mut Desk) -> (Verdict, Duration) {
    let mut extra = Duration::ZERO;
    let (mut at_t, mut at_1) = (Vec::new(), Vec::new());
    let batches = data::sequential_batches(&desk.test, eval::TRAJECTORY_BATCH).unwrap();
    for s in SEEDS {
        let (m, t) = desk.get(Model::RnnAdv, s);
        extra += t;
        let (w, opt) = (m.weights.clone(), m.optimizer.clone().unwrap());
        let attacks = [
            pgd10(),
            eval::parse_attack("learned10", EPSILON, Some(&opt)).unwrap(),
        ];
        for (bi, b) in batches.iter().enumerate() {
            let log = eval::attack_trajectory(&w, &attacks, b, derive(s, &[70, bi as u64])).unwrap();
            let (p, l) = (&log.entries[0].per_step, &log.entries[1].per_step);
            at_t.push(l[9] > p[9]);
            at_1.push(l[0] > p[0]);
        }
    }
    let (pt, p1) = (percent(&at_t), percent(&at_1));
    (
        verdict(
            pt >= 60.0 && p1 >= 70.0,
            format!(
                "learned loss above PGD-10 at step T on {pt:.0}% and at step 1 on {p1:.0}% of {} batches",
                at_t.len()
            ),
        ),
        extra,
    )
}

fn c8(desk: &mut Desk) -> (Verdict, Duration) {
    let mut extra = Duration::ZERO;
    let (mut adv, mut trades) = (Vec::new(), Vec::new());
    let mut parts = Vec::new();
    for s in SEEDS {
        let mut acc = HashMap::new();
        for m in [Model::AdvTrain, Model::RnnAdv, Model::Trades, Model::RnnTrades] {
            let (t, took) = desk.get(m, s);
            let w = t.weights.clone();
            extra += took;
            acc.insert(m, eval::robust_accuracy(&w, &pgd10(), &desk.test, s).unwrap());
        }
        adv.push(acc[&Model::RnnAdv] >= acc[&Model::AdvTrain] - ORDERING_SLACK);
        trades.push(acc[&Model::RnnTrades] >= acc[&Model::Trades] - ORDERING_SLACK);
        parts.push(format!(
            "s{s}: rnn-adv {:.1} / adv {:.1}, rnn-trades {:.1} / trades {:.1}",
            acc[&Model::RnnAdv],
            acc[&Model::AdvTrain],
            acc[&Model::RnnTrades],
            acc[&Model::Trades]
        ));
    }
    (
        verdict(
            count(&adv) >= MAJORITY && count(&trades) >= MAJORITY,
            format!("adv {}/3, trades {}/3 ({})", count(&adv), count(&trades), parts.join("; ")),
        ),
        extra,
    )
}

fn c9(desk: &mut Desk) -> (Verdict, Duration) {
    let mut extra = Duration::ZERO;
    let test = desk.test.head(LONG_ATTACK_SIZE);
    let mut per_seed = Vec::new();
    let mut parts = Vec::new();
    for s in SEEDS {
        let (m, t) = desk.get(Model::RnnAdv, s);
        extra += t;
        let opt = m.optimizer.clone().unwrap();
        let mut all = true;
        for d in [Model::AdvTrain, Model::Trades, Model::RnnAdv, Model::RnnTrades] {
            let (t, took) = desk.get(d, s);
            let w = t.weights.clone();
            extra += took;
            let rows = eval::step_generalization(&w, &opt, &test, EPSILON, &[10, 40], s).unwrap();
            all &= rows[1].1 <= rows[0].1;
            parts.push(format!("s{s} {d:?} {:.1}->{:.1}", rows[0].1, rows[1].1));
        }
        per_seed.push(all);
    }
    (
        verdict(
            count(&per_seed) >= MAJORITY,
            format!("learned40 <= learned10 on every defense in {}/3 seeds ({})", count(&per_seed), parts.join(", ")),
        ),
        extra,
    )
}

fn c10(desk: &mut Desk) -> (Verdict, Duration) {
    // Surrogates share the architecture but come from a different seed.
    let mut extra = Duration::ZERO;
    let mut never_stronger = true;
    let mut adv_stronger = Vec::new();
    let mut parts = Vec::new();
    let defenses = [Model::AdvTrain, Model::Trades, Model::RnnAdv, Model::RnnTrades];
    for (i, s) in SEEDS.into_iter().enumerate() {
        let other = SEEDS[(i + 1) % SEEDS.len()];
        let mut fetch = |desk: &mut Desk, m: Model, seed: u64| {
            let (t, took) = desk.get(m, seed);
            extra += took;
            t.weights.clone()
        };
        let plain = fetch(desk, Model::Plain, other);
        let adv = fetch(desk, Model::AdvTrain, other);
        let (mut from_plain, mut from_adv) = (0.0, 0.0);
        for d in defenses {
            let w = fetch(desk, d, s);
            let white = eval::robust_accuracy(&w, &pgd10(), &desk.test, s).unwrap();
            let tp = eval::transfer_eval(&plain, &w, &pgd10(), &desk.test, s).unwrap();
            let ta = eval::transfer_eval(&adv, &w, &pgd10(), &desk.test, s).unwrap();
            never_stronger &= tp >= white && ta >= white;
            from_plain += tp / defenses.len() as f64;
            from_adv += ta / defenses.len() as f64;
        }
        adv_stronger.push(from_adv < from_plain);
        parts.push(format!("s{s}: mean transfer from adv {from_adv:.1} vs plain {from_plain:.1}"));
    }
    (
        verdict(
            never_stronger && count(&adv_stronger) >= MAJORITY,
            format!(
                "transfer >= white-box everywhere: {never_stronger}; adversarial surrogate stronger in {}/3 ({})",
                count(&adv_stronger),
                parts.join("; ")
            ),
        ),
        extra,
    )
}

// ---------------------------------------------------------------------------
// Determinism through the command line.

fn same_outputs(a: &Path, b: &Path) -> Result<(), String> {
    let mut names: Vec<_> = fs::read_dir(a).map_err(|e| e.to_string())?.map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for n in names {
        if n == "effective-config.txt" {
            continue;
        }
        if fs::read(a.join(&n)).ok() != fs::read(b.join(&n)).ok() {
            return Err(format!("{} differs", n.to_string_lossy()));
        }
    }
    Ok(())
}

fn c12(data_dir: &Path) -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let p = |s: &str| root.join(s).to_str().unwrap().to_string();
    let run = |args: &[String]| -> bool {
        Command::new(env!("CARGO_BIN_EXE_rnnadv"))
            .args(args)
            .env("RNNADV_DATA", data_dir)
            .output()
            .map(|o| o.status.success())
            .unwrap_or(false)
    };
    let clf = p("train/classifier.ckpt");
    let opt = p("train/optimizer.ckpt");
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let commands: Vec<(&str, Vec<String>)> = vec![
        (
            "train",
            s(&[
                "train", "--objective", "rnn-trades", "--epochs", "1", "--subset", "256", "--batch-size", "32",
                "--inner-steps", "3", "--test-subset", "100", "--seed", "5", "--out", &p("train"),
            ]),
        ),
        (
            "attack",
            s(&[
                "attack", "--classifier-ckpt", &clf, "--family", "learned", "--optimizer-ckpt", &opt, "--steps", "5",
                "--test-subset", "100", "--out", &p("attack"),
            ]),
        ),
        (
            "eval",
            s(&[
                "eval", "--defenses", &format!("m:{clf}"), "--attacks", "fgsm,pgd5,pgdbls5,cw5,learned5",
                "--optimizer-ckpt", &opt, "--test-subset", "100", "--out", &p("eval"),
            ]),
        ),
        ("landscape", s(&["landscape", "--classifier-ckpt", &clf, "--resolution", "9", "--seed", "7", "--out", &p("landscape")])),
        (
            "transfer",
            s(&[
                "transfer", "--surrogate-ckpt", &clf, "--target-ckpt", &clf, "--test-subset", "100", "--out",
                &p("transfer"),
            ]),
        ),
    ];
    let mut results = Vec::new();
    for (name, args) in &commands {
        if !run(args) {
            results.push(format!("{name}: run failed"));
            continue;
        }
        let again = [
            name.to_string(),
            "--config".into(),
            p(&format!("{name}/effective-config.txt")),
            "--out".into(),
            p(&format!("{name}-again")),
        ];
        if !run(&again) {
            results.push(format!("{name}: re-run failed"));
            continue;
        }
        if let Err(e) = same_outputs(&root.join(name), &root.join(format!("{name}-again"))) {
            results.push(format!("{name}: {e}"));
        }
    }
    if results.is_empty() {
        verdict(true, "train, attack, eval, landscape and transfer re-runs are bit-identical")
    } else {
        verdict(false, results.join("; "))
    }
}

fn data_dir() -> PathBuf {
    std::env::var_os("RNNADV_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

fn main() {
    let secs = Duration::from_secs;
    let (v, t) = timed(c1);
    report(1, "parameter count", Some(Duration::from_millis(1)), t, v);
    let (v, t) = timed(c2);
    report(2, "gradient correctness", Some(secs(120)), t, v);
    let (v, t) = timed(c3);
    report(3, "feasibility", Some(secs(60)), t, v);
    let (v, t) = timed(c4);
    report(4, "line search", None, t, v);
    let (v, t) = timed(c5);
    report(5, "bias-free fixed point", None, t, v);

    let dir = data_dir();
    match Desk::load(&dir) {
        Ok(mut desk) => {
            // Budgets cover training charged on first use plus evaluation,
            // except where the criterion counts only post-training work.
            let (r, t) = timed(|| c6(&mut desk));
            report(6, "line search helps training and attack", Some(secs(30 * 60)), t, r.0);
            let (r, t) = timed(|| c7(&mut desk));
            report(7, "learned attack outpaces PGD", Some(secs(5 * 60)), t - r.1, r.0);
            // Budgeted on the twelve trainings it compares.
            let (v, _) = c8(&mut desk);
            let all_four: Duration = desk
                .models
                .iter()
                .filter(|(k, _)| matches!(k.0, Model::AdvTrain | Model::Trades | Model::RnnAdv | Model::RnnTrades))
                .map(|(_, m)| m.took)
                .sum();
            report(8, "learned-maximizer training is not worse", Some(secs(90 * 60)), all_four, v);
            let (r, t) = timed(|| c9(&mut desk));
            report(9, "more learned steps do not help the defense", Some(secs(5 * 60)), t - r.1, r.0);
            let (r, t) = timed(|| c10(&mut desk));
            report(10, "transfer is weaker than white-box", Some(secs(15 * 60)), t - r.1, r.0);
        }
        Err(e) => {
            for (n, title) in [
                (6, "line search helps training and attack"),
                (7, "learned attack outpaces PGD"),
                (8, "learned-maximizer training is not worse"),
                (9, "more learned steps do not help the defense"),
                (10, "transfer is weaker than white-box"),
            ] {
                report(n, title, None, Duration::ZERO, verdict(false, format!("no data at {}: {e}", dir.display())));
            }
        }
    }

    let (v, t) = timed(c11);
    report(11, "min column", None, t, v);
    let (v, t) = timed(|| c12(&dir));
    report(12, "determinism", None, t, v);
}
