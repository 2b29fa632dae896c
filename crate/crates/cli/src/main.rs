use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use recloss::data::{self, Format, InteractionDataset, SplitSpec, SyntheticSpec};
use recloss::eval::{self, EvalReport};
use recloss::experiment::ExperimentConfig;
use recloss::linear::{self, LinearModel};
use recloss::model::MfModel;
use recloss::seed::Stream;
use recloss::trainer;

mod verify;

#[derive(Parser, Debug)]
#[command(name = "recloss", version, about = "Train and certify recommendation losses")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Default)]
struct ConfigArgs {
    /// Experiment config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set loss.temperature=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load an interaction file, renumber ids, split into train/test.
    Prepare {
        /// Interaction file. Omit together with `--synthetic`.
        #[arg(long, required_unless_present = "synthetic")]
        input: Option<PathBuf>,
        /// Generate a MovieLens-100k-shaped synthetic dataset instead.
        #[arg(long, conflicts_with = "input")]
        synthetic: bool,
        #[arg(long, default_value = "adjacency")]
        format: String,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an MF model with the configured loss and evaluate it on test.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a saved model (or the popularity baseline) on test.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint directory written by `train` or `linear`.
        #[arg(long, required_unless_present = "popularity")]
        model: Option<PathBuf>,
        /// Rank by training popularity instead of a model.
        #[arg(long, conflicts_with = "model")]
        popularity: bool,
        #[arg(long, default_value_t = 20)]
        k: usize,
    },
    /// Fit a closed-form linear model and evaluate it on test.
    Linear {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long, default_value_t = 20)]
        k: usize,
    },
    /// Run a certification suite; exit code 1 on any violation.
    Verify {
        #[arg(long, value_enum)]
        suite: verify::Suite,
        /// Suite size; each suite has its own default.
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for the CSV evidence.
        #[arg(long, default_value = "verify")]
        out: PathBuf,
    },
    /// Train and evaluate once per value of one config key.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Config key to vary, e.g. `loss.temperature`.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// List every config key with its default.
    Keys,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Method {
    Ials,
    IalsDebiased,
    Ease,
    EaseDebiased,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Ials => "ials",
            Method::IalsDebiased => "ials-debiased",
            Method::Ease => "ease",
            Method::EaseDebiased => "ease-debiased",
        }
    }
}

/// Outcome that maps onto the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Usage, configuration or I/O problem: exit 2.
    Usage(String),
    /// A certification suite found a violation: exit 1.
    Verification(String),
}

impl From<recloss::Error> for Failure {
    fn from(e: recloss::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed:\n{msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::Prepare {
            input,
            synthetic,
            format,
            test_fraction,
            seed,
            out,
        } => prepare(input.as_deref(), synthetic, &format, test_fraction, seed, &out),
        Command::Train { cfg } => train(&load_config(&cfg)?),
        Command::Eval {
            cfg,
            model,
            popularity,
            k,
        } => eval_cmd(&load_config(&cfg)?, model.as_deref(), popularity, k),
        Command::Linear { cfg, method, k } => linear_cmd(&load_config(&cfg)?, method, k),
        Command::Verify {
            suite,
            trials,
            seed,
            out,
        } => verify::run(suite, trials, seed, &out),
        Command::Sweep { cfg, param, values } => sweep(load_config(&cfg)?, &param, &values),
        Command::Keys => {
            print!("{}", ExperimentConfig::describe_keys());
            Ok(())
        }
    }
}

fn load_config(args: &ConfigArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::new(),
    };
    for pair in &args.overrides {
        cfg.set_pair(pair)?;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> CliResult {
    data::write_text(path, text).map_err(Failure::from)
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.path("output.dir").unwrap_or_else(|| PathBuf::from("out"))
}

fn prepare(
    input: Option<&Path>,
    synthetic: bool,
    format: &str,
    test_fraction: f64,
    seed: u64,
    out: &Path,
) -> CliResult {
    let spec = SplitSpec::new(test_fraction, seed)?;
    let raw = match input {
        Some(p) if !synthetic => data::load_interactions(p, format.parse::<Format>()?)?,
        _ => data::synthetic(&SyntheticSpec::movielens_100k_like(seed))?,
    };
    let (ds, users, items) = data::densify(&raw);
    let (train, test) = data::split(&ds, &spec);
    fs::create_dir_all(out).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", out.display())))?;
    write(&out.join("train.txt"), &train.to_pairs_string())?;
    write(&out.join("test.txt"), &test.to_pairs_string())?;
    write(&out.join("user_ids.txt"), &users.to_text())?;
    write(&out.join("item_ids.txt"), &items.to_text())?;
    let stats = ds.stats();
    let summary = format!(
        "{stats}\ntrain_interactions={}\ntest_interactions={}\n",
        train.n_interactions(),
        test.n_interactions()
    );
    write(&out.join("stats.txt"), &summary)?;
    println!("{stats}");
    Ok(())
}

/// Train and test sets, widened to a common index space.
fn load_data(cfg: &ExperimentConfig) -> CliResult<(InteractionDataset, InteractionDataset)> {
    let need = |key: &str| {
        cfg.path(key)
            .ok_or_else(|| Failure::Usage(format!("config key `{key}` is required")))
    };
    let format = cfg.format();
    let train = data::load_interactions(need("data.train")?, format)?;
    let test = data::load_interactions(need("data.test")?, format)?;
    let (nu, ni) = (
        train.n_users().max(test.n_users()),
        train.n_items().max(test.n_items()),
    );
    Ok((train.with_dims(nu, ni)?, test.with_dims(nu, ni)?))
}

/// Fitting set and optional validation set carved from `train`.
fn validation_split(
    cfg: &ExperimentConfig,
    train: &InteractionDataset,
) -> CliResult<(InteractionDataset, Option<InteractionDataset>)> {
    if let Some(p) = cfg.path("data.valid") {
        let valid = data::load_interactions(p, cfg.format())?;
        let valid = valid.with_dims(train.n_users(), train.n_items())?;
        return Ok((train.clone(), Some(valid)));
    }
    let frac = cfg.valid_fraction();
    if frac == 0.0 {
        return Ok((train.clone(), None));
    }
    let spec = SplitSpec::new(frac, cfg.seed())?;
    let (fit, valid) = data::split_stream(train, &spec, Stream::Validation);
    Ok((fit, (valid.n_interactions() > 0).then_some(valid)))
}

struct TrainOutcome {
    report: EvalReport,
    model: MfModel<f64>,
    history: trainer::TrainHistory,
}

fn fit_and_eval(cfg: &ExperimentConfig) -> CliResult<TrainOutcome> {
    let tc = cfg.train_config()?;
    let (train, test) = load_data(cfg)?;
    let (fit, valid) = validation_split(cfg, &train)?;
    let (model, history) = trainer::train::<f64>(&tc, &fit, valid.as_ref())?;
    let report = eval::evaluate(|u| model.score_all_items(u), &train, &test, tc.eval_k)?;
    Ok(TrainOutcome {
        report,
        model,
        history,
    })
}

fn train(cfg: &ExperimentConfig) -> CliResult {
    let family = cfg.train_config()?.loss.family;
    let out = out_dir(cfg);
    let o = fit_and_eval(cfg)?;
    o.model.save(out.join("model"))?;
    o.history.write_csv(&out.join("history.csv"))?;
    write(&out.join("report.csv"), &o.report.to_csv("mf", family.name()))?;
    write(&out.join("config.conf"), &cfg.emit_resolved())?;
    print!("{}", o.report.table("mf", family.name()));
    println!(
        "stop={} best_epoch={} epochs={}",
        o.history.stop.name(),
        o.history.best_epoch.map_or("-".to_string(), |e| e.to_string()),
        o.history.records.len()
    );
    Ok(())
}

fn eval_cmd(cfg: &ExperimentConfig, model: Option<&Path>, popularity: bool, k: usize) -> CliResult {
    let (train, test) = load_data(cfg)?;
    let (name, report) = match model {
        Some(dir) if !popularity => {
            if dir.join("kind.txt").exists() {
                let m = LinearModel::<f64>::load(dir)?;
                let scores = |u| linear::linear_scores(&m, &train, u).unwrap_or_default();
                // surface dimension errors before the parallel pass
                linear::linear_scores(&m, &train, 0)?;
                (m.kind(), eval::evaluate(scores, &train, &test, k)?)
            } else {
                let m = MfModel::<f64>::load(dir)?;
                if m.n_users() != train.n_users() || m.n_items() != train.n_items() {
                    return Err(Failure::Usage(format!(
                        "model is {}x{}, data is {}x{}",
                        m.n_users(),
                        m.n_items(),
                        train.n_users(),
                        train.n_items()
                    )));
                }
                ("mf", eval::evaluate(|u| m.score_all_items(u), &train, &test, k)?)
            }
        }
        _ => {
            let p = eval::popularity_baseline(&train)?;
            ("popularity", eval::evaluate(|u| p.for_user(u), &train, &test, k)?)
        }
    };
    write(&out_dir(cfg).join("eval.csv"), &report.to_csv(name, "-"))?;
    print!("{}", report.table(name, "-"));
    Ok(())
}

fn linear_cmd(cfg: &ExperimentConfig, method: Method, k: usize) -> CliResult {
    let model = match method {
        Method::Ials | Method::IalsDebiased => {
            let ic = cfg.ials_config(method == Method::IalsDebiased)?;
            let (train, test) = load_data(cfg)?;
            (linear::ials_fit::<f64>(&train, &ic)?, train, test)
        }
        Method::Ease | Method::EaseDebiased => {
            let ec = cfg.ease_config(method == Method::EaseDebiased)?;
            let (train, test) = load_data(cfg)?;
            (linear::ease_fit::<f64>(&train, &ec)?, train, test)
        }
    };
    let (m, train, test) = model;
    linear::linear_scores(&m, &train, 0)?;
    let report = eval::evaluate(
        |u| linear::linear_scores(&m, &train, u).unwrap_or_default(),
        &train,
        &test,
        k,
    )?;
    let out = out_dir(cfg);
    m.save(out.join(method.name()))?;
    write(
        &out.join(format!("report-{}.csv", method.name())),
        &report.to_csv(method.name(), "-"),
    )?;
    write(&out.join("config.conf"), &cfg.emit_resolved())?;
    print!("{}", report.table(method.name(), "-"));
    Ok(())
}

pub const SWEEP_HEADER: &str = "param,value,recall20,ndcg20";

fn sweep(base: ExperimentConfig, param: &str, values: &[String]) -> CliResult {
    if !ExperimentConfig::is_known_key(param) {
        return Err(Failure::Usage(format!("unknown sweep parameter `{param}`")));
    }
    if values.is_empty() {
        return Err(Failure::Usage("--values is empty".into()));
    }
    // every point is checked before the first one trains
    let mut points = Vec::with_capacity(values.len());
    for v in values {
        let mut cfg = base.clone();
        cfg.set(param, v.trim())?;
        cfg.set("train.eval_k", "20")?;
        cfg.train_config()?;
        points.push((v.trim().to_string(), cfg));
    }
    let mut csv = format!("{SWEEP_HEADER}\n");
    println!("{SWEEP_HEADER}");
    for (v, cfg) in &points {
        let o = fit_and_eval(cfg)?;
        let row = format!("{param},{v},{:.6},{:.6}", o.report.recall, o.report.ndcg);
        println!("{row}");
        csv.push_str(&row);
        csv.push('\n');
    }
    write(&out_dir(&base).join("sweep.csv"), &csv)?;
    Ok(())
}
