//! Next-item ranking evaluation against sampled negatives.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyper::HyperParams;
use crate::meta;
use crate::model::Params;
use crate::rng;
use crate::sampler::{self, IndexedLog};
use crate::ItemId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mrr: f64,
    pub hit_at_1: f64,
    pub users_evaluated: usize,
    pub users_skipped: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserRank {
    pub user: String,
    pub rank: usize,
    pub reciprocal_rank: f64,
}

/// 1-based rank of `truth`; candidates tied with it are ranked ahead of it.
pub fn rank_truth(scores: &[(ItemId, f64)], truth: ItemId) -> Result<usize> {
    let mut truth_score = None;
    for &(item, s) in scores {
        if s.is_nan() {
            return Err(Error::invalid(format!("score of item {item} is NaN")));
        }
        if item == truth {
            if truth_score.is_some() {
                return Err(Error::invalid(format!(
                    "truth item {truth} appears more than once"
                )));
            }
            truth_score = Some(s);
        }
    }
    let t = truth_score
        .ok_or_else(|| Error::invalid(format!("truth item {truth} is not among the candidates")))?;
    let ahead = scores
        .iter()
        .filter(|&&(item, s)| item != truth && s >= t)
        .count();
    Ok(1 + ahead)
}

/// Aggregate per-user ranks into MRR and Hit@1.
pub fn summarize(ranks: &[usize], users_skipped: usize, k: usize) -> EvalResult {
    let n = ranks.len();
    let (mrr, hit_at_1) = if n == 0 {
        (0.0, 0.0)
    } else {
        let rr: f64 = ranks.iter().map(|&r| 1.0 / r as f64).sum();
        let hits = ranks.iter().filter(|&&r| r == 1).count();
        (rr / n as f64, hits as f64 / n as f64)
    };
    EvalResult {
        mrr,
        hit_at_1,
        users_evaluated: n,
        users_skipped,
        k,
        warning: (n == 0).then(|| format!("no test user has at least {} interactions", k + 1)),
    }
}

enum Outcome {
    Ranked(usize),
    Skipped,
}

fn evaluate_user(
    params: &Params,
    log: &IndexedLog,
    hp: &HyperParams,
    user: usize,
) -> Result<Outcome> {
    let Some(task) = sampler::build_test_task(user, log.user(user)?, hp.k) else {
        return Ok(Outcome::Skipped);
    };
    let mut rng = rng::eval_stream(hp.seed, user);
    let (adapted, tr) = match meta::adapt_for_user(params, &task.support, hp, log, &mut rng) {
        Ok(v) => v,
        Err(Error::ExhaustedNegatives { .. }) => return Ok(Outcome::Skipped),
        Err(e) => return Err(e),
    };
    let negatives = match sampler::sample_distinct_negatives(log, user, hp.eval_negatives, &mut rng)
    {
        Ok(v) => v,
        Err(Error::NotEnoughNegatives { .. }) => return Ok(Outcome::Skipped),
        Err(e) => return Err(e),
    };
    let mut candidates = Vec::with_capacity(negatives.len() + 1);
    candidates.push(task.truth);
    candidates.extend(negatives);
    let scores = meta::predict_scores(&adapted, &tr, task.query_head, &candidates)?;
    let scored: Vec<_> = candidates.into_iter().zip(scores).collect();
    Ok(Outcome::Ranked(rank_truth(&scored, task.truth)?))
}

/// Evaluate every test user and keep per-user ranks.
pub fn evaluate_detailed(
    params: &Params,
    test_log: &IndexedLog,
    hp: &HyperParams,
) -> Result<(EvalResult, Vec<UserRank>)> {
    let outcomes = (0..test_log.n_users())
        .into_par_iter()
        .map(|u| evaluate_user(params, test_log, hp, u))
        .collect::<Result<Vec<_>>>()?;
    let mut ranks = Vec::new();
    let mut per_user = Vec::new();
    let mut skipped = 0;
    for (u, o) in outcomes.into_iter().enumerate() {
        match o {
            Outcome::Ranked(rank) => {
                ranks.push(rank);
                per_user.push(UserRank {
                    user: test_log.users()[u].name.clone(),
                    rank,
                    reciprocal_rank: 1.0 / rank as f64,
                });
            }
            Outcome::Skipped => skipped += 1,
        }
    }
    Ok((summarize(&ranks, skipped, hp.k), per_user))
}

pub fn evaluate(params: &Params, test_log: &IndexedLog, hp: &HyperParams) -> Result<EvalResult> {
    Ok(evaluate_detailed(params, test_log, hp)?.0)
}

/// `user,rank,reciprocal_rank` CSV.
pub fn write_user_csv<W: Write>(ranks: &[UserRank], mut out: W) -> std::io::Result<()> {
    writeln!(out, "user,rank,reciprocal_rank")?;
    for r in ranks {
        writeln!(out, "{},{},{}", r.user, r.rank, r.reciprocal_rank)?;
    }
    out.flush()
}
