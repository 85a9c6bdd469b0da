//! Interaction logs: parsing, item-frequency filtering and the timestamp
//! based user split.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ItemId;

pub const DEFAULT_MIN_ITEM_COUNT: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

impl Interaction {
    pub fn new(user: impl Into<String>, item: impl Into<String>, timestamp: i64) -> Self {
        Interaction {
            user: user.into(),
            item: item.into(),
            timestamp,
        }
    }
}

fn parse_line(line: &str) -> std::result::Result<Interaction, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 {
        return Err(format!(
            "expected 3 tab-separated fields (user, item, timestamp), found {}",
            fields.len()
        ));
    }
    let (user, item, ts) = (fields[0], fields[1], fields[2].trim());
    if user.is_empty() || item.is_empty() {
        return Err("user and item ids must be non-empty".into());
    }
    let timestamp: i64 = ts
        .parse()
        .map_err(|_| format!("timestamp {ts:?} is not an integer"))?;
    if timestamp < 0 {
        return Err(format!("timestamp {timestamp} is negative"));
    }
    Ok(Interaction::new(user, item, timestamp))
}

/// Parse `user<TAB>item<TAB>timestamp` lines. Blank lines are skipped.
pub fn parse_reader<R: BufRead>(reader: R, source: &str) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(line).map_err(|message| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            message,
        })?);
    }
    Ok(out)
}

pub fn parse_log(path: impl AsRef<Path>) -> Result<Vec<Interaction>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_reader(BufReader::new(file), &path.display().to_string())
}

pub fn write_log<W: Write>(log: &[Interaction], mut out: W) -> std::io::Result<()> {
    for r in log {
        writeln!(out, "{}\t{}\t{}", r.user, r.item, r.timestamp)?;
    }
    out.flush()
}

pub fn save_log(log: &[Interaction], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_log(log, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// Drop every interaction whose item occurs fewer than `min_count` times.
/// One pass only: counts are not recomputed after removal.
pub fn filter_items(log: &[Interaction], min_count: usize) -> Vec<Interaction> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in log {
        *counts.entry(r.item.as_str()).or_default() += 1;
    }
    log.iter()
        .filter(|r| counts[r.item.as_str()] >= min_count)
        .cloned()
        .collect()
}

/// Which side receives a user whose first interaction is exactly at the
/// split time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitBoundary {
    #[default]
    Test,
    Train,
}

impl std::str::FromStr for SplitBoundary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test" => Ok(SplitBoundary::Test),
            "train" => Ok(SplitBoundary::Train),
            other => Err(Error::Config(format!(
                "unknown split boundary {other:?} (expected test|train)"
            ))),
        }
    }
}

/// Bijection between external item ids and dense [`ItemId`]s, in order of
/// first appearance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct ItemIndex {
    names: Vec<String>,
    lookup: HashMap<String, ItemId>,
}

impl ItemIndex {
    pub fn get_or_insert(&mut self, name: &str) -> ItemId {
        if let Some(&id) = self.lookup.get(name) {
            return id;
        }
        let id = ItemId(self.names.len() as u32);
        self.names.push(name.to_string());
        self.lookup.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ItemId> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: ItemId) -> Option<&str> {
        self.names.get(id.index()).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

impl From<Vec<String>> for ItemIndex {
    fn from(names: Vec<String>) -> Self {
        let lookup = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), ItemId(i as u32)))
            .collect();
        ItemIndex { names, lookup }
    }
}

impl From<ItemIndex> for Vec<String> {
    fn from(index: ItemIndex) -> Self {
        index.names
    }
}

/// One user's interactions sorted by (timestamp, input order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserHistory {
    pub name: String,
    pub items: Vec<ItemId>,
    pub timestamps: Vec<i64>,
}

impl UserHistory {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn first_timestamp(&self) -> Option<i64> {
        self.timestamps.first().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train_users: Vec<UserHistory>,
    pub test_users: Vec<UserHistory>,
    pub items: ItemIndex,
    pub split_time: i64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl SplitDataset {
    pub fn n_items(&self) -> usize {
        self.items.len()
    }
}

/// Partition users by the time of their first interaction: before
/// `split_time` goes to train, after it to test. Users keep all of their
/// interactions.
pub fn temporal_split(
    log: &[Interaction],
    split_time: i64,
    boundary: SplitBoundary,
) -> Result<SplitDataset> {
    if log.is_empty() {
        return Err(Error::EmptyPopulation("interaction log is empty".into()));
    }
    let mut items = ItemIndex::default();
    let mut user_slot: HashMap<&str, usize> = HashMap::new();
    let mut grouped: Vec<(&str, Vec<(i64, ItemId)>)> = Vec::new();
    for r in log {
        let item = items.get_or_insert(&r.item);
        let slot = *user_slot.entry(r.user.as_str()).or_insert_with(|| {
            grouped.push((r.user.as_str(), Vec::new()));
            grouped.len() - 1
        });
        grouped[slot].1.push((r.timestamp, item));
    }

    let mut train_users = Vec::new();
    let mut test_users = Vec::new();
    for (name, mut events) in grouped {
        // stable: equal timestamps keep file order
        events.sort_by_key(|&(ts, _)| ts);
        let history = UserHistory {
            name: name.to_string(),
            items: events.iter().map(|&(_, i)| i).collect(),
            timestamps: events.iter().map(|&(t, _)| t).collect(),
        };
        let first = events[0].0;
        let is_test = match boundary {
            SplitBoundary::Test => first >= split_time,
            SplitBoundary::Train => first > split_time,
        };
        if is_test {
            test_users.push(history);
        } else {
            train_users.push(history);
        }
    }

    let mut warnings = Vec::new();
    if train_users.is_empty() {
        warnings.push(format!("no training users start before {split_time}"));
    }
    if test_users.is_empty() {
        warnings.push(format!("no test users start at or after {split_time}"));
    }
    Ok(SplitDataset {
        train_users,
        test_users,
        items,
        split_time,
        warnings,
    })
}

/// Parse, filter and split in one go.
pub fn load_dataset(
    path: impl AsRef<Path>,
    min_item_count: usize,
    split_time: i64,
    boundary: SplitBoundary,
) -> Result<SplitDataset> {
    let log = parse_log(path)?;
    let filtered = filter_items(&log, min_item_count);
    temporal_split(&filtered, split_time, boundary)
}

const CACHE_FORMAT: &str = "metatl-split";
const CACHE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CacheFile {
    format: String,
    version: u32,
    dataset: SplitDataset,
}

pub fn save_cache(dataset: &SplitDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer(
        &mut out,
        &CacheFile {
            format: CACHE_FORMAT.into(),
            version: CACHE_VERSION,
            dataset: dataset.clone(),
        },
    )?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_cache(path: impl AsRef<Path>) -> Result<SplitDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let cache: CacheFile = serde_json::from_reader(BufReader::new(file))?;
    if cache.format != CACHE_FORMAT || cache.version != CACHE_VERSION {
        return Err(Error::invalid(format!(
            "unsupported cache {} v{} (expected {CACHE_FORMAT} v{CACHE_VERSION})",
            cache.format, cache.version
        )));
    }
    Ok(cache.dataset)
}
