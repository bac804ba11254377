//! `rnnadv` command line: train, attack, eval, landscape, transfer.
//!
//! Every option is a `key = value` setting. Values come from built-in
//! defaults, then an optional `--config` file, then flags. The resolved set
//! is written to `effective-config.txt` in the output directory, and passing
//! that file back with `--config` reproduces the run.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use serde::Serialize;

use crate::attacks::{Attack, AttackFamily};
use crate::classifier::{self, ClassifierSpec, ClassifierWeights};
use crate::data::{self, Dataset, Split};
use crate::eval;
use crate::learned::{self, Readout, RnnOptimizerParams, StepWeights};
use crate::seed::derive;
use crate::trainer::{self, MetaGradOrder, Objective, TrainConfig, TrainEvent, TrainState};
use crate::Error;

/// Overrides the built-in data directory default.
pub const DATA_ENV: &str = "RNNADV_DATA";
pub const EFFECTIVE_CONFIG: &str = "effective-config.txt";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; exit code 1.
    Usage(String),
    /// Failure while running; exit code 2.
    Runtime(Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

struct Key {
    name: &'static str,
    default: &'static str,
    help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

const COMMON: &[Key] = &[
    key("seed", "0", "base seed; every random choice derives from it"),
    key("data", "", "MNIST IDX directory (default: $RNNADV_DATA or data/mnist)"),
    key("out", "out", "output directory"),
    key("epsilon", "0.3", "L-infinity radius"),
    key("test-subset", "1000", "number of test examples to evaluate on"),
];

const TRAIN: &[Key] = &[
    key("objective", "plain", "plain, advtrain, trades, rnn-adv or rnn-trades"),
    key("arch", "desk", "classifier: desk or four-conv"),
    key("epochs", "5", "training epochs"),
    key("batch-size", "64", "minibatch size"),
    key("inner-steps", "10", "inner attack steps (at least 1)"),
    key("pgd-step", "", "PGD step size for hand-designed inner attacks (default epsilon/4)"),
    key("bls", "false", "use PGD with backtracking line search as the advtrain inner attack"),
    key("alpha1", "0.001", "optimizer learning rate"),
    key("alpha2", "0.01", "classifier learning rate"),
    key("momentum", "0", "heavy-ball momentum on the classifier update"),
    key("lambda", "6", "TRADES trade-off; the KL term is weighted by 1/lambda"),
    key("hidden", "10", "RNN hidden size"),
    key("readout", "current", "RNN output from the current (current) or updated (updated) state"),
    key("step-weights", "linear", "meta-loss step weights: linear or final"),
    key("meta-grad", "first-order", "meta-gradient order (only first-order is supported)"),
    key("subset", "6000", "train on a seeded subset of this size (0 for all)"),
    key("epsilon-warmup", "0", "epochs over which the attack radius ramps up to epsilon"),
];

const ATTACK: &[Key] = &[
    key("classifier-ckpt", "", "classifier checkpoint to attack"),
    key("family", "pgd", "fgsm, pgd, pgd-bls, cw or learned"),
    key("steps", "10", "attack steps"),
    key("step-size", "", "fixed step size (default depends on the family)"),
    key("gaussian-init", "true", "start from a Gaussian-perturbed input"),
    key("optimizer-ckpt", "", "learned optimizer checkpoint (family learned)"),
    key("trajectory-batch", "128", "examples in the per-step trajectory batch"),
];

const EVAL: &[Key] = &[
    key("defenses", "", "comma-separated name:checkpoint pairs"),
    key("attacks", "pgd10,pgd100,cw10", "comma-separated attack columns, e.g. fgsm,pgd10,pgdbls10,cw10,learned10"),
    key("optimizer-ckpt", "", "learned optimizer checkpoint (learnedN columns)"),
];

const LANDSCAPE: &[Key] = &[
    key("classifier-ckpt", "", "classifier checkpoint"),
    key("index", "0", "test example index"),
    key("extent", "0.3", "grid half-width along each direction"),
    key("resolution", "21", "grid points per axis"),
];

const TRANSFER: &[Key] = &[
    key("surrogate-ckpt", "", "classifier the attack is crafted on"),
    key("target-ckpt", "", "classifier the attack is scored on"),
    key("attack", "pgd10", "attack name, e.g. pgd10 or learned10"),
    key("optimizer-ckpt", "", "learned optimizer checkpoint (learnedN attacks)"),
];

const COMMANDS: &[(&str, &str, &[Key])] = &[
    ("train", "train a classifier (and learned optimizer)", TRAIN),
    ("attack", "robust accuracy and per-step trajectory of one attack", ATTACK),
    ("eval", "robust accuracy table over defenses and attacks", EVAL),
    ("landscape", "loss surface around one test example", LANDSCAPE),
    ("transfer", "attack crafted on a surrogate, scored on a target", TRANSFER),
];

fn command() -> Command {
    let mut cmd = Command::new("rnnadv")
        .about("Adversarial training with a learned inner maximizer")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about, keys) in COMMANDS {
        let mut sub = Command::new(*name).about(*about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key = value settings; flags override them"),
        );
        for k in COMMON.iter().chain(keys.iter()) {
            sub = sub.arg(Arg::new(k.name).long(k.name).value_name("VALUE").help(k.help).action(ArgAction::Set));
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

/// Resolved settings of one command, before typing.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub command: String,
    pub values: BTreeMap<String, String>,
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn resolve(name: &str, keys: &[Key], m: &ArgMatches) -> CliResult<Settings> {
    let mut values: BTreeMap<String, String> = COMMON
        .iter()
        .chain(keys)
        .map(|k| (k.name.to_string(), k.default.to_string()))
        .collect();
    if let Ok(dir) = std::env::var(DATA_ENV) {
        values.insert("data".into(), dir);
    }
    if values["data"].is_empty() {
        values.insert("data".into(), "data/mnist".into());
    }
    if let Some(path) = m.get_one::<String>("config") {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("{path}: {e}")))?;
        for (k, v) in parse_config(&text)? {
            if !values.contains_key(&k) {
                return Err(usage(format!("{path}: unknown key '{k}' for {name}")));
            }
            values.insert(k, v);
        }
    }
    for k in COMMON.iter().chain(keys) {
        if let Some(v) = m.get_one::<String>(k.name) {
            values.insert(k.name.to_string(), v.clone());
        }
    }
    Ok(Settings {
        command: name.to_string(),
        values,
    })
}

impl Settings {
    fn raw(&self, key: &str) -> &str {
        self.values.get(key).map_or("", String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .parse()
            .map_err(|e| usage(format!("{key} = '{}': {e}", self.raw(key))))
    }

    fn path(&self, key: &str) -> CliResult<PathBuf> {
        match self.raw(key) {
            "" => Err(usage(format!("--{key} is required"))),
            p => Ok(PathBuf::from(p)),
        }
    }

    fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    /// `key = value` lines in key order.
    pub fn to_config(&self) -> String {
        let mut s = format!("# rnnadv {}\n", self.command);
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

fn config_err(e: Error) -> CliError {
    usage(e.to_string())
}

fn train_config(s: &mut Settings) -> CliResult<TrainConfig> {
    let epsilon: f64 = s.parse("epsilon")?;
    if s.raw("pgd-step").is_empty() {
        s.set("pgd-step", epsilon / 4.0);
    }
    let inner_steps: usize = s.parse("inner-steps")?;
    if inner_steps == 0 {
        return Err(usage("--inner-steps must be at least 1"));
    }
    let subset: usize = s.parse("subset")?;
    let cfg = TrainConfig {
        objective: Objective::parse(s.raw("objective")).map_err(config_err)?,
        epochs: s.parse("epochs")?,
        batch_size: s.parse("batch-size")?,
        inner_steps,
        epsilon,
        pgd_step: s.parse("pgd-step")?,
        bls: s.parse("bls")?,
        alpha1: s.parse("alpha1")?,
        alpha2: s.parse("alpha2")?,
        momentum: s.parse("momentum")?,
        trades_lambda: s.parse("lambda")?,
        hidden_size: s.parse("hidden")?,
        readout: Readout::parse(s.raw("readout")).map_err(config_err)?,
        step_weights: match s.raw("step-weights") {
            "linear" => StepWeights::Linear,
            "final" => StepWeights::FinalOnly,
            other => return Err(usage(format!("unknown step-weights '{other}'"))),
        },
        meta_grad: match s.raw("meta-grad") {
            "first-order" => MetaGradOrder::FirstOrder,
            "second-order" => MetaGradOrder::SecondOrder,
            other => return Err(usage(format!("unknown meta-grad '{other}'"))),
        },
        seed: s.parse("seed")?,
        subset: (subset > 0).then_some(subset),
        epsilon_warmup: s.parse("epsilon-warmup")?,
        classifier: match s.raw("arch") {
            "desk" => ClassifierSpec::desk_default(),
            "four-conv" => ClassifierSpec::four_conv_mnist(),
            other => return Err(usage(format!("unknown arch '{other}'"))),
        },
    };
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

fn test_set(s: &Settings) -> CliResult<Dataset> {
    let n: usize = s.parse("test-subset")?;
    let test = data::load_mnist_dir(s.raw("data"), Split::Test)?;
    Ok(if n == 0 { test } else { test.head(n.min(test.len())) })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(Error::io(path, e)))
}

fn optional_optimizer(s: &Settings) -> CliResult<Option<RnnOptimizerParams>> {
    match s.raw("optimizer-ckpt") {
        "" => Ok(None),
        p => Ok(Some(learned::load_checkpoint(p)?)),
    }
}

fn needs_optimizer(names: &[&str]) -> bool {
    names.iter().any(|n| n.starts_with("learned") || n.starts_with("rnn"))
}

/// Checks everything that can be checked without touching the filesystem,
/// filling in derived defaults.
fn prepare(s: &mut Settings) -> CliResult<()> {
    let epsilon: f64 = s.parse("epsilon")?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(usage(format!("epsilon must be > 0, got {epsilon}")));
    }
    s.parse::<u64>("seed")?;
    s.parse::<usize>("test-subset")?;
    match s.command.as_str() {
        "train" => {
            train_config(s)?;
        }
        "attack" => {
            s.path("classifier-ckpt")?;
            let family = AttackFamily::parse(s.raw("family")).map_err(config_err)?;
            s.set("family", family.name());
            let steps: usize = s.parse("steps")?;
            if family == AttackFamily::Learned && s.raw("optimizer-ckpt").is_empty() {
                return Err(usage("--family learned needs --optimizer-ckpt"));
            }
            // Resolve the family's step size so the record is explicit.
            let name = eval::attack_name(family, steps);
            let dummy = (family == AttackFamily::Learned).then(|| RnnOptimizerParams::zeros(1).unwrap());
            let mut attack = eval::parse_attack(&name, epsilon, dummy.as_ref()).map_err(config_err)?;
            if s.raw("step-size").is_empty() {
                s.set("step-size", attack.config.step_size);
            }
            attack.config.step_size = s.parse("step-size")?;
            attack.config.gaussian_init = s.parse("gaussian-init")?;
            attack.config.validate().map_err(config_err)?;
            s.parse::<usize>("trajectory-batch")?;
        }
        "eval" => {
            defenses(s)?;
            let names: Vec<&str> = s.raw("attacks").split(',').map(str::trim).collect();
            if needs_optimizer(&names) && s.raw("optimizer-ckpt").is_empty() {
                return Err(usage("learned attack columns need --optimizer-ckpt"));
            }
            let dummy = RnnOptimizerParams::zeros(1).unwrap();
            for n in names {
                eval::parse_attack(n, epsilon, Some(&dummy)).map_err(config_err)?;
            }
        }
        "landscape" => {
            s.path("classifier-ckpt")?;
            s.parse::<usize>("index")?;
            s.parse::<f64>("extent")?;
            if s.parse::<usize>("resolution")? < 2 {
                return Err(usage("resolution must be at least 2"));
            }
        }
        "transfer" => {
            s.path("surrogate-ckpt")?;
            s.path("target-ckpt")?;
            let name = s.raw("attack").to_string();
            if needs_optimizer(&[&name]) && s.raw("optimizer-ckpt").is_empty() {
                return Err(usage("a learned attack needs --optimizer-ckpt"));
            }
            let dummy = RnnOptimizerParams::zeros(1).unwrap();
            eval::parse_attack(&name, epsilon, Some(&dummy)).map_err(config_err)?;
        }
        other => return Err(usage(format!("unknown command '{other}'"))),
    }
    Ok(())
}

fn defenses(s: &Settings) -> CliResult<Vec<(String, PathBuf)>> {
    let raw = s.raw("defenses");
    if raw.is_empty() {
        return Err(usage("--defenses is required (name:checkpoint,...)"));
    }
    raw.split(',')
        .map(|d| {
            let (name, path) = d
                .trim()
                .split_once(':')
                .ok_or_else(|| usage(format!("defense '{d}' is not name:checkpoint")))?;
            Ok((name.to_string(), PathBuf::from(path)))
        })
        .collect()
}

fn cmd_train(s: &mut Settings, out: &Path) -> CliResult<()> {
    let cfg = train_config(s)?;
    let train = data::load_mnist_dir(s.raw("data"), Split::Train)?;
    let test = test_set(s)?;
    let mut save_err = None;
    let mut hook = |e: &TrainEvent, st: &TrainState| {
        if let TrainEvent::EpochEnd(r) = e {
            eprintln!(
                "epoch {} loss {:.4} val {}",
                r.epoch,
                r.theta_loss,
                r.val_accuracy.map_or("-".into(), |a| format!("{a:.2}%"))
            );
            let res = classifier::save_checkpoint(&st.weights, out.join(format!("classifier-epoch{}.ckpt", r.epoch)))
                .and_then(|_| match &st.optimizer {
                    Some(p) => learned::save_checkpoint(p, out.join(format!("optimizer-epoch{}.ckpt", r.epoch))),
                    None => Ok(()),
                });
            if let Err(e) = res {
                save_err.get_or_insert(e);
            }
        }
    };
    let outcome = trainer::train(&cfg, &train, Some(&test), Some(&mut hook))?;
    if let Some(e) = save_err {
        return Err(e.into());
    }
    classifier::save_checkpoint(&outcome.weights, out.join("classifier.ckpt"))?;
    if let Some(p) = &outcome.optimizer {
        learned::save_checkpoint(p, out.join("optimizer.ckpt"))?;
    }
    outcome.log.write_jsonl(out.join("train-log.jsonl"))?;
    Ok(())
}

#[derive(Serialize)]
struct AttackRecord {
    attack: String,
    epsilon: f64,
    steps: usize,
    step_size: f64,
    examples: usize,
    natural_accuracy: f64,
    robust_accuracy: f64,
}

fn build_attack(s: &Settings, name: &str, optimizer: Option<&RnnOptimizerParams>) -> CliResult<Attack> {
    Ok(eval::parse_attack(name, s.parse("epsilon")?, optimizer)?)
}

fn cmd_attack(s: &Settings, out: &Path) -> CliResult<()> {
    let weights = classifier::load_checkpoint(s.path("classifier-ckpt")?)?;
    let optimizer = optional_optimizer(s)?;
    let family = AttackFamily::parse(s.raw("family"))?;
    let steps: usize = s.parse("steps")?;
    let seed: u64 = s.parse("seed")?;
    let mut attack = build_attack(s, &eval::attack_name(family, steps), optimizer.as_ref())?;
    attack.config.step_size = s.parse("step-size")?;
    attack.config.gaussian_init = s.parse("gaussian-init")?;
    let test = test_set(s)?;
    let natural = trainer::natural_accuracy(&weights, &test)?;
    let robust = eval::robust_accuracy(&weights, &attack, &test, seed)?;
    let record = AttackRecord {
        attack: attack.name.clone(),
        epsilon: attack.config.epsilon,
        steps,
        step_size: attack.config.step_size,
        examples: test.len(),
        natural_accuracy: natural,
        robust_accuracy: robust,
    };
    write(&out.join("attack.json"), serde_json::to_string_pretty(&record).unwrap())?;
    let batch = eval::eval_batch(&test, s.parse("trajectory-batch")?, derive(seed, &[7]))?;
    let log = eval::attack_trajectory(&weights, std::slice::from_ref(&attack), &batch, seed)?;
    write(&out.join("trajectory.csv"), log.to_csv())?;
    println!("{}: natural {natural:.2}% robust {robust:.2}%", attack.name);
    Ok(())
}

fn cmd_eval(s: &Settings, out: &Path) -> CliResult<()> {
    let optimizer = optional_optimizer(s)?;
    let attacks = s
        .raw("attacks")
        .split(',')
        .map(|n| build_attack(s, n.trim(), optimizer.as_ref()))
        .collect::<CliResult<Vec<_>>>()?;
    let loaded = defenses(s)?
        .into_iter()
        .map(|(n, p)| Ok((n, classifier::load_checkpoint(p)?)))
        .collect::<CliResult<Vec<(String, ClassifierWeights)>>>()?;
    let refs: Vec<(String, &ClassifierWeights)> = loaded.iter().map(|(n, w)| (n.clone(), w)).collect();
    let report = eval::build_report(&refs, &attacks, &test_set(s)?, s.parse("seed")?)?;
    report.write(out.join("report.csv"), out.join("report.json"))?;
    print!("{}", report.to_csv());
    Ok(())
}

fn cmd_landscape(s: &Settings, out: &Path) -> CliResult<()> {
    let weights = classifier::load_checkpoint(s.path("classifier-ckpt")?)?;
    let test = test_set(s)?;
    let index: usize = s.parse("index")?;
    if index >= test.len() {
        return Err(usage(format!("index {index} out of range for {} test examples", test.len())));
    }
    let b = test.select(&[index]);
    let grid = eval::loss_landscape(
        &weights,
        &b.x,
        b.y[0],
        s.parse("extent")?,
        s.parse("resolution")?,
        s.parse("seed")?,
    )?;
    write(&out.join("landscape.csv"), grid.to_csv())?;
    println!("center {:.6} max {:.6}", grid.center(), grid.max());
    Ok(())
}

#[derive(Serialize)]
struct TransferRecord {
    attack: String,
    surrogate: String,
    target: String,
    examples: usize,
    transfer_accuracy: f64,
    white_box_accuracy: f64,
}

fn cmd_transfer(s: &Settings, out: &Path) -> CliResult<()> {
    let surrogate = classifier::load_checkpoint(s.path("surrogate-ckpt")?)?;
    let target = classifier::load_checkpoint(s.path("target-ckpt")?)?;
    let optimizer = optional_optimizer(s)?;
    let attack = build_attack(s, s.raw("attack"), optimizer.as_ref())?;
    let test = test_set(s)?;
    let seed: u64 = s.parse("seed")?;
    let transfer = eval::transfer_eval(&surrogate, &target, &attack, &test, seed)?;
    let white = eval::robust_accuracy(&target, &attack, &test, seed)?;
    let record = TransferRecord {
        attack: attack.name.clone(),
        surrogate: s.raw("surrogate-ckpt").into(),
        target: s.raw("target-ckpt").into(),
        examples: test.len(),
        transfer_accuracy: transfer,
        white_box_accuracy: white,
    };
    write(&out.join("transfer.json"), serde_json::to_string_pretty(&record).unwrap())?;
    println!("{}: transfer {transfer:.2}% white-box {white:.2}%", attack.name);
    Ok(())
}

/// Parses arguments and resolves settings without running anything.
pub fn settings_from_args<I, T>(args: I) -> CliResult<Settings>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let m = command().try_get_matches_from(args).map_err(|e| usage(e.to_string()))?;
    let (name, sub) = m.subcommand().ok_or_else(|| usage("missing subcommand"))?;
    let keys = COMMANDS.iter().find(|c| c.0 == name).map(|c| c.2).unwrap_or(&[]);
    let mut s = resolve(name, keys, sub)?;
    prepare(&mut s)?;
    Ok(s)
}

/// Runs a fully resolved command, writing the effective config first.
pub fn execute(mut s: Settings) -> CliResult<()> {
    let out = PathBuf::from(s.raw("out"));
    fs::create_dir_all(&out).map_err(|e| CliError::Runtime(Error::io(&out, e)))?;
    write(&out.join(EFFECTIVE_CONFIG), s.to_config())?;
    match s.command.as_str() {
        "train" => cmd_train(&mut s, &out),
        "attack" => cmd_attack(&s, &out),
        "eval" => cmd_eval(&s, &out),
        "landscape" => cmd_landscape(&s, &out),
        "transfer" => cmd_transfer(&s, &out),
        other => Err(usage(format!("unknown command '{other}'"))),
    }
}

/// Entry point; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    // Help and version go to stdout with exit code 0.
    if let Err(e) = command().try_get_matches_from(&args) {
        if !e.use_stderr() {
            let _ = e.print();
            return 0;
        }
    }
    match settings_from_args(args).and_then(execute) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            match e {
                CliError::Usage(_) => 1,
                CliError::Runtime(_) => 2,
            }
        }
    }
}
