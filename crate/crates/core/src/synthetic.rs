//! Synthetic interaction logs driven by a shared Markov chain over items.
//!
//! Each user starts at a uniformly random item and at every step follows the
//! chain's successor with probability `1 - noise`, or jumps to a uniformly
//! random item otherwise. Because the transition rule is known, the best
//! possible next-item prediction is known too.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Interaction;
use crate::error::{Error, Result};
use crate::rng;
use crate::ItemId;

const DAY: i64 = 86_400;
/// Training users start up to this long before the split time.
const TRAIN_SPAN: i64 = 365 * DAY;
/// Test users start within this long after the split time.
const TEST_SPAN: i64 = 30 * DAY;
const MAX_GAP: i64 = 3_600;
/// 2014-01-01T00:00:00Z
pub const DEFAULT_SPLIT_TIME: i64 = 1_388_534_400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "table", rename_all = "snake_case")]
pub enum Successor {
    /// Deterministic successor: `item -> table[item]`.
    Permutation(Vec<u32>),
    /// Row-stochastic transition matrix.
    Stochastic(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovSpec {
    pub n_items: usize,
    pub successor: Successor,
    pub n_train_users: usize,
    pub n_test_users: usize,
    /// Inclusive range of sequence lengths.
    pub seq_len_range: (usize, usize),
    pub noise: f64,
    pub split_time: i64,
}

impl MarkovSpec {
    /// The cycle `0 -> 1 -> ... -> n-1 -> 0`.
    pub fn cycle(n_items: usize) -> Self {
        MarkovSpec {
            n_items,
            successor: Successor::Permutation(
                (0..n_items)
                    .map(|i| ((i + 1) % n_items.max(1)) as u32)
                    .collect(),
            ),
            n_train_users: 1_000,
            n_test_users: 100,
            seq_len_range: (10, 20),
            noise: 0.0,
            split_time: DEFAULT_SPLIT_TIME,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_items < 2 {
            return bad(format!("n_items must be at least 2, got {}", self.n_items));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return bad(format!("noise must be in [0, 1), got {}", self.noise));
        }
        let (lo, hi) = self.seq_len_range;
        if lo == 0 || hi < lo {
            return bad(format!("invalid sequence length range ({lo}, {hi})"));
        }
        if self.split_time < TRAIN_SPAN + DAY {
            return bad(format!(
                "split_time must be at least {} so timestamps stay non-negative",
                TRAIN_SPAN + DAY
            ));
        }
        match &self.successor {
            Successor::Permutation(p) => {
                if p.len() != self.n_items {
                    return bad(format!(
                        "permutation has {} entries, expected {}",
                        p.len(),
                        self.n_items
                    ));
                }
                let mut seen = vec![false; self.n_items];
                for &j in p {
                    let j = j as usize;
                    if j >= self.n_items || std::mem::replace(&mut seen[j], true) {
                        return bad("successor table is not a permutation".into());
                    }
                }
            }
            Successor::Stochastic(rows) => {
                if rows.len() != self.n_items {
                    return bad(format!(
                        "matrix has {} rows, expected {}",
                        rows.len(),
                        self.n_items
                    ));
                }
                for (i, row) in rows.iter().enumerate() {
                    if row.len() != self.n_items {
                        return bad(format!("row {i} has {} entries", row.len()));
                    }
                    if row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
                        return bad(format!("row {i} has a negative or non-finite entry"));
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > 1e-9 {
                        return bad(format!("row {i} sums to {sum}, not 1"));
                    }
                }
            }
        }
        Ok(())
    }

    fn next_item<R: Rng + ?Sized>(&self, current: usize, rng: &mut R) -> usize {
        if self.noise > 0.0 && rng.random::<f64>() < self.noise {
            return rng.random_range(0..self.n_items);
        }
        match &self.successor {
            Successor::Permutation(p) => p[current] as usize,
            Successor::Stochastic(rows) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (j, &p) in rows[current].iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return j;
                    }
                }
                // rounding left a sliver above the last cumulative sum
                rows[current].iter().rposition(|&p| p > 0.0).unwrap_or(0)
            }
        }
    }

    /// Item name used in generated logs.
    pub fn item_name(item: usize) -> String {
        format!("i{item:05}")
    }

    /// Hit@1 upper bound for the permutation chain:
    /// `1 - noise + noise / n_items`.
    pub fn hit_at_1_ceiling(&self) -> f64 {
        1.0 - self.noise + self.noise / self.n_items as f64
    }
}

/// Generate one user's chronological item sequence.
fn user_sequence<R: Rng + ?Sized>(spec: &MarkovSpec, rng: &mut R) -> Vec<usize> {
    let (lo, hi) = spec.seq_len_range;
    let len = rng.random_range(lo..=hi);
    let start = rng.random_range(0..spec.n_items);
    walk(spec, start, len, rng)
}

fn walk<R: Rng + ?Sized>(spec: &MarkovSpec, start: usize, len: usize, rng: &mut R) -> Vec<usize> {
    let mut seq = Vec::with_capacity(len);
    let mut cur = start;
    seq.push(cur);
    for _ in 1..len {
        cur = spec.next_item(cur, rng);
        seq.push(cur);
    }
    seq
}

/// Generate a log in the input schema of the data pipeline. Training users
/// (`u*`) all start before the split time, test users (`t*`) strictly after.
pub fn gen_dataset(spec: &MarkovSpec, seed: u64) -> Result<Vec<Interaction>> {
    spec.validate()?;
    let mut log = Vec::new();
    let n_users = spec.n_train_users + spec.n_test_users;
    for u in 0..n_users {
        let mut rng = rng::synthetic_user_stream(seed, u);
        let is_test = u >= spec.n_train_users;
        let (name, mut ts) = if is_test {
            let idx = u - spec.n_train_users;
            (
                format!("t{idx:06}"),
                spec.split_time + 1 + rng.random_range(0..TEST_SPAN),
            )
        } else {
            (
                format!("u{u:06}"),
                spec.split_time - rng.random_range(DAY..=TRAIN_SPAN),
            )
        };
        for item in user_sequence(spec, &mut rng) {
            log.push(Interaction::new(
                name.clone(),
                MarkovSpec::item_name(item),
                ts,
            ));
            ts += 1 + rng.random_range(0..MAX_GAP);
        }
    }
    Ok(log)
}

/// Most likely successor of `item`; ties go to the lowest index.
pub fn oracle_best_next(spec: &MarkovSpec, item: usize) -> Result<ItemId> {
    if item >= spec.n_items {
        return Err(Error::invalid(format!(
            "item {item} outside 0..{}",
            spec.n_items
        )));
    }
    Ok(ItemId(match &spec.successor {
        Successor::Permutation(p) => p[item],
        Successor::Stochastic(rows) => {
            let row = &rows[item];
            let mut best = 0;
            for (j, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = j;
                }
            }
            best as u32
        }
    }))
}
