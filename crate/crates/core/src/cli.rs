//! The `metatl` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 input or config error,
//! 3 checkpoint incompatible with the dataset.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{self, SplitDataset};
use crate::error::Error;
use crate::eval;
use crate::gradcheck;
use crate::meta::TrainState;
use crate::model::ParamView;
use crate::sampler::IndexedLog;
use crate::snapshot;
use crate::synthetic;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INCOMPATIBLE: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "metatl",
    version,
    about = "Meta-trained transition model for cold-start sequential recommendation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Meta-train on the training users and write a checkpoint.
    Train(ConfigArgs),
    /// Adapt to each test user and report MRR / Hit@1 as JSON.
    Eval(ConfigArgs),
    /// Generate a synthetic Markov-chain interaction log (TSV).
    Gen(ConfigArgs),
    /// Compare analytic gradients with finite differences.
    Checkgrad(ConfigArgs),
}

macro_rules! config_args {
    ($($field:ident),* $(,)?) => {
        /// Every flag mirrors a config-file key.
        #[derive(Debug, Args)]
        struct ConfigArgs {
            /// Flat `key = value` config file; flags override it.
            #[arg(long, value_name = "FILE")]
            config: Option<PathBuf>,
            $(
                #[arg(long, value_name = "VALUE")]
                $field: Option<String>,
            )*
        }

        impl ConfigArgs {
            fn overrides(&self) -> Vec<(&'static str, &str)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$field {
                        out.push((stringify!($field), v.as_str()));
                    }
                )*
                out
            }
        }
    };
}

config_args!(
    dim,
    task_lr,
    meta_lr,
    margin,
    k,
    inner_steps,
    meta_batch,
    negatives_per_pair,
    eval_negatives,
    seed,
    outer_optimizer,
    mode,
    second_order,
    data,
    cache,
    split_time,
    split_boundary,
    min_item_count,
    checkpoint,
    metrics,
    eval_csv,
    output,
    epochs,
    tasks_per_epoch,
    workers,
    trials,
    n_items,
    n_train_users,
    n_test_users,
    seq_len_min,
    seq_len_max,
    noise,
    successor,
);

#[derive(Debug)]
struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    fn input(e: impl std::fmt::Display) -> Self {
        CliError {
            code: EXIT_INPUT,
            message: e.to_string(),
        }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError {
            code: EXIT_RUNTIME,
            message: e.to_string(),
        }
    }

    fn incompatible(e: impl std::fmt::Display) -> Self {
        CliError {
            code: EXIT_INCOMPATIBLE,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parse `args` (including the program name) and run the subcommand.
/// Metrics and results go to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    let result = match &cli.command {
        Command::Train(a) => load_config(a).and_then(|c| in_pool(&c, || cmd_train(&c, out, err))),
        Command::Eval(a) => load_config(a).and_then(|c| in_pool(&c, || cmd_eval(&c, out, err))),
        Command::Gen(a) => load_config(a).and_then(|c| cmd_gen(&c, out, err)),
        Command::Checkgrad(a) => load_config(a).and_then(|c| cmd_checkgrad(&c, out)),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

fn load_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path).map_err(CliError::input)?,
        None => RunConfig::default(),
    };
    for (key, value) in args.overrides() {
        cfg.set(key, value).map_err(CliError::input)?;
    }
    cfg.validate().map_err(CliError::input)?;
    Ok(cfg)
}

fn in_pool<T: Send>(cfg: &RunConfig, f: impl FnOnce() -> CliResult<T> + Send) -> CliResult<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(CliError::runtime)?;
    pool.install(f)
}

fn require<'a>(path: &'a Option<PathBuf>, key: &str) -> CliResult<&'a Path> {
    path.as_deref()
        .ok_or_else(|| CliError::input(format!("missing required setting `{key}`")))
}

fn load_split(cfg: &RunConfig, err: &mut dyn Write) -> CliResult<SplitDataset> {
    let path = require(&cfg.data, "data")?;
    if let Some(cache) = &cfg.cache {
        if cache.exists() {
            return data::load_cache(cache).map_err(CliError::input);
        }
    }
    let ds = data::load_dataset(path, cfg.min_item_count, cfg.split_time, cfg.split_boundary)
        .map_err(CliError::input)?;
    for w in &ds.warnings {
        let _ = writeln!(err, "warning: {w}");
    }
    if let Some(cache) = &cfg.cache {
        data::save_cache(&ds, cache).map_err(CliError::runtime)?;
    }
    Ok(ds)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::runtime(Error::io(path, e)))
}

fn cmd_train(cfg: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<i32> {
    let checkpoint = require(&cfg.checkpoint, "checkpoint")?;
    let ds = load_split(cfg, err)?;
    let hp = cfg.effective_hyper();
    let log = IndexedLog::new(ds.train_users, ds.items.len()).map_err(CliError::runtime)?;
    let mut state = TrainState::initialize(ds.items.len(), hp).map_err(CliError::runtime)?;
    let mut metrics_file = cfg.metrics.as_deref().map(create).transpose()?;

    let start = Instant::now();
    let mut io_error = None;
    let trained = state.train(&log, cfg.epochs, cfg.tasks_per_epoch, |s| {
        let line = serde_json::json!({
            "step": s.step,
            "tasks": s.tasks,
            "support_loss": s.support_loss,
            "query_loss": s.query_loss,
            "wall_time": start.elapsed().as_secs_f64(),
        })
        .to_string();
        let mut write = |w: &mut dyn Write| {
            if let Err(e) = writeln!(w, "{line}") {
                io_error.get_or_insert(e);
            }
        };
        write(&mut *out);
        if let Some(f) = metrics_file.as_mut() {
            write(f);
        }
    });
    match trained {
        Ok(()) => {}
        Err(e @ Error::EmptyPopulation(_)) => return Err(CliError::input(e)),
        Err(e) => return Err(CliError::runtime(e)),
    }
    if let Some(e) = io_error {
        return Err(CliError::runtime(e));
    }
    if let Some(mut f) = metrics_file {
        f.flush().map_err(CliError::runtime)?;
    }
    snapshot::save(&state.params, checkpoint).map_err(CliError::runtime)?;
    let _ = writeln!(
        err,
        "wrote {} after {} meta-steps",
        checkpoint.display(),
        state.step
    );
    Ok(EXIT_OK)
}

fn cmd_eval(cfg: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<i32> {
    let checkpoint = require(&cfg.checkpoint, "checkpoint")?;
    let ds = load_split(cfg, err)?;
    let params = match snapshot::load(checkpoint) {
        Ok(p) => p,
        Err(e @ Error::Io { .. }) => return Err(CliError::input(e)),
        Err(e) => return Err(CliError::incompatible(e)),
    };
    if params.n_items() != ds.items.len() {
        return Err(CliError::incompatible(format!(
            "checkpoint has {} items, dataset vocabulary has {}",
            params.n_items(),
            ds.items.len()
        )));
    }
    let mut hp = cfg.effective_hyper();
    if cfg.is_explicit("dim") && hp.dim != params.dim() {
        return Err(CliError::incompatible(format!(
            "checkpoint dim {} differs from configured dim {}",
            params.dim(),
            hp.dim
        )));
    }
    hp.dim = params.dim();
    let test_log = IndexedLog::new(ds.test_users, ds.items.len()).map_err(CliError::runtime)?;
    let (result, per_user) =
        eval::evaluate_detailed(&params, &test_log, &hp).map_err(CliError::runtime)?;
    if let Some(w) = &result.warning {
        let _ = writeln!(err, "warning: {w}");
    }
    if let Some(path) = &cfg.eval_csv {
        let mut f = create(path)?;
        eval::write_user_csv(&per_user, &mut f).map_err(CliError::runtime)?;
    }
    let json = serde_json::to_string(&result).map_err(CliError::runtime)?;
    writeln!(out, "{json}").map_err(CliError::runtime)?;
    Ok(EXIT_OK)
}

fn cmd_gen(cfg: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<i32> {
    let spec = cfg.markov_spec().map_err(CliError::input)?;
    let log = synthetic::gen_dataset(&spec, cfg.hyper.seed).map_err(CliError::input)?;
    match &cfg.output {
        Some(path) => {
            data::save_log(&log, path).map_err(CliError::runtime)?;
            let _ = writeln!(
                err,
                "wrote {} interactions to {}",
                log.len(),
                path.display()
            );
        }
        None => data::write_log(&log, out).map_err(CliError::runtime)?,
    }
    Ok(EXIT_OK)
}

fn cmd_checkgrad(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<i32> {
    let report = gradcheck::check_gradients(&cfg.hyper, cfg.trials).map_err(CliError::input)?;
    writeln!(out, "{}", report.summary()).map_err(CliError::runtime)?;
    Ok(if report.passed { EXIT_OK } else { EXIT_RUNTIME })
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn flags_mirror_config_keys() {
        let cmd = Cli::command();
        let train = cmd.find_subcommand("train").unwrap();
        let flags: Vec<String> = train
            .get_arguments()
            .filter_map(|a| a.get_long().map(str::to_string))
            .collect();
        for key in crate::config::KEYS {
            let flag = key.replace('_', "-");
            assert!(flags.contains(&flag), "missing --{flag}");
        }
    }

    #[test]
    fn bad_flag_is_input_error() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(
            run(["metatl", "train", "--bogus", "1"], &mut o, &mut e),
            EXIT_INPUT
        );
        assert_eq!(
            run(["metatl", "gen", "--dim", "x"], &mut o, &mut e),
            EXIT_INPUT
        );
        assert_eq!(run(["metatl", "--help"], &mut o, &mut e), EXIT_OK);
    }
}
