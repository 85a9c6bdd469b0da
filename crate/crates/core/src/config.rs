//! Run configuration: a flat `key = value` file, overridable key by key.
//!
//! Lines starting with `#` and blank lines are ignored. Keys are
//! case-insensitive and `-` and `_` are interchangeable, so `task-lr` on the
//! command line and `task_lr` in a file name the same setting.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::data::{SplitBoundary, DEFAULT_MIN_ITEM_COUNT};
use crate::error::{Error, Result};
use crate::hyper::HyperParams;
use crate::rng;
use crate::synthetic::{MarkovSpec, Successor, DEFAULT_SPLIT_TIME};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Full model with inner-loop adaptation.
    MetaTl,
    /// Adaptation removed at train and test time.
    MetaTlMinus,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "metatl" => Ok(Mode::MetaTl),
            "metatl-minus" | "metatl--" => Ok(Mode::MetaTlMinus),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected metatl|metatl-minus)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuccessorKind {
    Cycle,
    RandomPermutation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_items: usize,
    pub n_train_users: usize,
    pub n_test_users: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub noise: f64,
    pub successor: SuccessorKind,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_items: 500,
            n_train_users: 2_000,
            n_test_users: 200,
            seq_len_min: 10,
            seq_len_max: 20,
            noise: 0.0,
            successor: SuccessorKind::Cycle,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub hyper: HyperParams,
    pub mode: Mode,
    pub second_order: bool,
    pub data: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub split_time: i64,
    pub split_boundary: SplitBoundary,
    pub min_item_count: usize,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub eval_csv: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub epochs: usize,
    pub tasks_per_epoch: usize,
    /// 0 means one worker per available processor.
    pub workers: usize,
    pub trials: usize,
    pub synthetic: SyntheticConfig,
    explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            hyper: HyperParams::default(),
            mode: Mode::MetaTl,
            second_order: false,
            data: None,
            cache: None,
            split_time: DEFAULT_SPLIT_TIME,
            split_boundary: SplitBoundary::Test,
            min_item_count: DEFAULT_MIN_ITEM_COUNT,
            checkpoint: None,
            metrics: None,
            eval_csv: None,
            output: None,
            epochs: 10,
            tasks_per_epoch: 1024,
            workers: 0,
            trials: 100,
            synthetic: SyntheticConfig::default(),
            explicit: BTreeSet::new(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "dim",
    "task_lr",
    "meta_lr",
    "margin",
    "k",
    "inner_steps",
    "meta_batch",
    "negatives_per_pair",
    "eval_negatives",
    "seed",
    "outer_optimizer",
    "mode",
    "second_order",
    "data",
    "cache",
    "split_time",
    "split_boundary",
    "min_item_count",
    "checkpoint",
    "metrics",
    "eval_csv",
    "output",
    "epochs",
    "tasks_per_epoch",
    "workers",
    "trials",
    "n_items",
    "n_train_users",
    "n_test_users",
    "seq_len_min",
    "seq_len_max",
    "noise",
    "successor",
];

fn normalize(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean {value:?} for {key}"
        ))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = normalize(key);
        let v = value.trim();
        let hp = &mut self.hyper;
        let syn = &mut self.synthetic;
        match key.as_str() {
            "dim" => hp.dim = parse(&key, v)?,
            "task_lr" => hp.task_lr = parse(&key, v)?,
            "meta_lr" => hp.meta_lr = parse(&key, v)?,
            "margin" => hp.margin = parse(&key, v)?,
            "k" => hp.k = parse(&key, v)?,
            "inner_steps" => hp.inner_steps = parse(&key, v)?,
            "meta_batch" => hp.meta_batch = parse(&key, v)?,
            "negatives_per_pair" => hp.negatives_per_pair = parse(&key, v)?,
            "eval_negatives" => hp.eval_negatives = parse(&key, v)?,
            "seed" => hp.seed = parse(&key, v)?,
            "outer_optimizer" => hp.outer_optimizer = v.parse()?,
            "mode" => self.mode = v.parse()?,
            "second_order" => self.second_order = parse_bool(&key, v)?,
            "data" => self.data = Some(PathBuf::from(v)),
            "cache" => self.cache = Some(PathBuf::from(v)),
            "split_time" => self.split_time = parse(&key, v)?,
            "split_boundary" => self.split_boundary = v.parse()?,
            "min_item_count" => self.min_item_count = parse(&key, v)?,
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "metrics" => self.metrics = Some(PathBuf::from(v)),
            "eval_csv" => self.eval_csv = Some(PathBuf::from(v)),
            "output" => self.output = Some(PathBuf::from(v)),
            "epochs" => self.epochs = parse(&key, v)?,
            "tasks_per_epoch" => self.tasks_per_epoch = parse(&key, v)?,
            "workers" => self.workers = parse(&key, v)?,
            "trials" => self.trials = parse(&key, v)?,
            "n_items" => syn.n_items = parse(&key, v)?,
            "n_train_users" => syn.n_train_users = parse(&key, v)?,
            "n_test_users" => syn.n_test_users = parse(&key, v)?,
            "seq_len_min" => syn.seq_len_min = parse(&key, v)?,
            "seq_len_max" => syn.seq_len_max = parse(&key, v)?,
            "noise" => syn.noise = parse(&key, v)?,
            "successor" => {
                syn.successor = match v {
                    "cycle" => SuccessorKind::Cycle,
                    "random" | "random-permutation" => SuccessorKind::RandomPermutation,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown successor {other:?} (expected cycle|random)"
                        )))
                    }
                }
            }
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        self.explicit.insert(key);
        Ok(())
    }

    /// Whether `key` was set by a file or an override rather than defaulted.
    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(&normalize(key))
    }

    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at_line = |message: String| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at_line("expected key = value".into()))?;
            self.set(key, value).map_err(|e| match e {
                Error::Config(m) => at_line(m),
                other => at_line(other.to_string()),
            })?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Hyperparameters with the mode applied.
    pub fn effective_hyper(&self) -> HyperParams {
        let mut hp = self.hyper.clone();
        if self.mode == Mode::MetaTlMinus {
            hp.inner_steps = 0;
        }
        hp
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.second_order {
            return Err(Error::Unimplemented(
                "second-order meta-gradients; only the first-order update is available",
            ));
        }
        Ok(())
    }

    pub fn markov_spec(&self) -> Result<MarkovSpec> {
        let s = &self.synthetic;
        let successor = match s.successor {
            SuccessorKind::Cycle => MarkovSpec::cycle(s.n_items).successor,
            SuccessorKind::RandomPermutation => {
                let mut perm: Vec<u32> = (0..s.n_items as u32).collect();
                perm.shuffle(&mut rng::stream(self.hyper.seed, rng::SYNTHETIC_STREAM));
                Successor::Permutation(perm)
            }
        };
        let spec = MarkovSpec {
            n_items: s.n_items,
            successor,
            n_train_users: s.n_train_users,
            n_test_users: s.n_test_users,
            seq_len_range: (s.seq_len_min, s.seq_len_max),
            noise: s.noise,
            split_time: self.split_time,
        };
        spec.validate()?;
        Ok(spec)
    }
}
