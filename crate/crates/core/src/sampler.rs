//! Few-shot episode construction and negative sampling.
//!
//! A meta-training task picks a random user, draws `k + 1` of their
//! interactions without replacement, restores chronological order and splits
//! the resulting sequence `i_1 .. i_{k+1}` into the support pairs
//! `i_1->i_2 .. i_{k-1}->i_k` and the query pair `i_k->i_{k+1}`.

use std::collections::HashSet;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::UserHistory;
use crate::error::{Error, Result};
use crate::hyper::HyperParams;
use crate::model::Triple;
use crate::{ItemId, UserIdx};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransitionPair {
    pub user: UserIdx,
    pub head: ItemId,
    pub tail: ItemId,
}

impl TransitionPair {
    pub fn items(&self) -> (ItemId, ItemId) {
        (self.head, self.tail)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub user: UserIdx,
    pub support: Vec<TransitionPair>,
    pub query: TransitionPair,
    /// Indices into the user's history of the `k + 1` sampled interactions,
    /// ascending.
    pub positions: Vec<usize>,
}

/// Users with their histories plus per-user interacted-item sets.
#[derive(Debug, Clone)]
pub struct IndexedLog {
    users: Vec<UserHistory>,
    seen: Vec<Vec<ItemId>>,
    n_items: usize,
}

impl IndexedLog {
    pub fn new(users: Vec<UserHistory>, n_items: usize) -> Result<Self> {
        let mut seen = Vec::with_capacity(users.len());
        for u in &users {
            if let Some(bad) = u.items.iter().find(|i| i.index() >= n_items) {
                return Err(Error::UnknownItem(*bad));
            }
            let mut s = u.items.clone();
            s.sort_unstable();
            s.dedup();
            seen.push(s);
        }
        Ok(IndexedLog {
            users,
            seen,
            n_items,
        })
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn users(&self) -> &[UserHistory] {
        &self.users
    }

    pub fn user(&self, user: UserIdx) -> Result<&UserHistory> {
        self.users
            .get(user)
            .ok_or_else(|| Error::invalid(format!("unknown user index {user}")))
    }

    /// Distinct items the user ever interacted with, sorted.
    pub fn interacted(&self, user: UserIdx) -> Result<&[ItemId]> {
        self.seen
            .get(user)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("unknown user index {user}")))
    }

    pub fn has_interacted(&self, user: UserIdx, item: ItemId) -> Result<bool> {
        Ok(self.interacted(user)?.binary_search(&item).is_ok())
    }

    fn complement(&self, user: UserIdx) -> Result<Vec<ItemId>> {
        let seen = self.interacted(user)?;
        Ok((0..self.n_items as u32)
            .map(ItemId)
            .filter(|i| seen.binary_search(i).is_err())
            .collect())
    }
}

/// Samples tasks from users with at least `k + 1` interactions.
#[derive(Debug, Clone)]
pub struct TaskSampler<'a> {
    log: &'a IndexedLog,
    k: usize,
    eligible: Vec<UserIdx>,
}

impl<'a> TaskSampler<'a> {
    pub fn new(log: &'a IndexedLog, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid(format!("k must be at least 2, got {k}")));
        }
        let eligible: Vec<_> = (0..log.n_users())
            .filter(|&u| log.users[u].len() > k)
            .collect();
        if eligible.is_empty() {
            return Err(Error::EmptyPopulation(format!(
                "no user has at least {} interactions",
                k + 1
            )));
        }
        Ok(TaskSampler { log, k, eligible })
    }

    pub fn eligible_users(&self) -> &[UserIdx] {
        &self.eligible
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Task {
        let user = self.eligible[rng.random_range(0..self.eligible.len())];
        let history = &self.log.users[user];
        let mut positions = index::sample(rng, history.len(), self.k + 1).into_vec();
        // histories are already in (timestamp, input order) order
        positions.sort_unstable();
        let seq: Vec<ItemId> = positions.iter().map(|&p| history.items[p]).collect();
        let mut pairs: Vec<TransitionPair> = seq
            .windows(2)
            .map(|w| TransitionPair {
                user,
                head: w[0],
                tail: w[1],
            })
            .collect();
        let query = pairs.pop().expect("k >= 2 gives at least two pairs");
        Task {
            user,
            support: pairs,
            query,
            positions,
        }
    }
}

pub fn sample_task<R: Rng + ?Sized>(
    log: &IndexedLog,
    hp: &HyperParams,
    rng: &mut R,
) -> Result<Task> {
    Ok(TaskSampler::new(log, hp.k)?.sample(rng))
}

/// Uniform draw from the items `user` never interacted with.
pub fn sample_negative<R: Rng + ?Sized>(
    log: &IndexedLog,
    user: UserIdx,
    rng: &mut R,
) -> Result<ItemId> {
    let seen = log.interacted(user)?;
    if seen.len() >= log.n_items {
        return Err(Error::ExhaustedNegatives { user });
    }
    if seen.len() * 2 <= log.n_items {
        loop {
            let item = ItemId(rng.random_range(0..log.n_items as u32));
            if seen.binary_search(&item).is_err() {
                return Ok(item);
            }
        }
    }
    let pool = log.complement(user)?;
    Ok(pool[rng.random_range(0..pool.len())])
}

/// `count` distinct items the user never interacted with, uniformly without
/// replacement.
pub fn sample_distinct_negatives<R: Rng + ?Sized>(
    log: &IndexedLog,
    user: UserIdx,
    count: usize,
    rng: &mut R,
) -> Result<Vec<ItemId>> {
    let seen = log.interacted(user)?;
    let available = log.n_items - seen.len();
    if available < count {
        return Err(Error::NotEnoughNegatives {
            user,
            available,
            requested: count,
        });
    }
    if (seen.len() + count) * 2 <= log.n_items {
        let mut chosen = HashSet::with_capacity(count);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let item = ItemId(rng.random_range(0..log.n_items as u32));
            if seen.binary_search(&item).is_err() && chosen.insert(item) {
                out.push(item);
            }
        }
        return Ok(out);
    }
    let pool = log.complement(user)?;
    Ok(index::sample(rng, pool.len(), count)
        .into_iter()
        .map(|i| pool[i])
        .collect())
}

/// Attach `per_pair` freshly sampled negatives to each pair.
pub fn with_negatives<R: Rng + ?Sized>(
    log: &IndexedLog,
    pairs: &[TransitionPair],
    per_pair: usize,
    rng: &mut R,
) -> Result<Vec<Triple>> {
    let mut out = Vec::with_capacity(pairs.len() * per_pair);
    for p in pairs {
        for _ in 0..per_pair {
            out.push(Triple::new(
                p.head,
                p.tail,
                sample_negative(log, p.user, rng)?,
            ));
        }
    }
    Ok(out)
}

/// Support set and prediction target for a held-out user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestTask {
    pub user: UserIdx,
    pub support: Vec<TransitionPair>,
    pub query_head: ItemId,
    pub truth: ItemId,
}

/// Build the evaluation task from a user's first `k + 1` interactions, or
/// `None` when the history is too short.
pub fn build_test_task(user: UserIdx, history: &UserHistory, k: usize) -> Option<TestTask> {
    if k < 2 || history.len() < k + 1 {
        return None;
    }
    let support = history.items[..k]
        .windows(2)
        .map(|w| TransitionPair {
            user,
            head: w[0],
            tail: w[1],
        })
        .collect();
    Some(TestTask {
        user,
        support,
        query_head: history.items[k - 1],
        truth: history.items[k],
    })
}
