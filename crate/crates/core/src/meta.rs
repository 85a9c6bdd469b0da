//! Bilevel optimisation: per-task inner adaptation, first-order meta
//! gradients and the outer update, plus test-time adaptation and scoring.

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hyper::{HyperParams, OuterOptimizer};
use crate::model::{self, AdaptedParams, Grads, ParamView, Params, TransitionRep, Triple};
use crate::rng::{self, EngineRng};
use crate::sampler::{self, IndexedLog, Task, TaskSampler, TransitionPair};
use crate::ItemId;

/// A task with negatives attached to every support and query pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: Vec<Triple>,
    pub query: Vec<Triple>,
}

impl Episode {
    pub fn sample<R: Rng + ?Sized>(
        task: &Task,
        log: &IndexedLog,
        hp: &HyperParams,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Episode {
            support: sampler::with_negatives(log, &task.support, hp.negatives_per_pair, rng)?,
            query: sampler::with_negatives(
                log,
                std::slice::from_ref(&task.query),
                hp.negatives_per_pair,
                rng,
            )?,
        })
    }

    fn context(&self) -> Vec<(ItemId, ItemId)> {
        self.support.iter().map(Triple::pair).collect()
    }
}

/// `inner_steps` plain gradient steps on the support loss. The returned
/// parameters overlay `params`, which is never modified.
pub fn inner_adapt<'a>(
    params: &'a Params,
    support: &[Triple],
    hp: &HyperParams,
) -> Result<AdaptedParams<'a>> {
    if support.is_empty() {
        return Err(Error::invalid("support set is empty"));
    }
    let mut adapted = AdaptedParams::new(params);
    for _ in 0..hp.inner_steps {
        let (_, grads) = model::loss_and_grad(&adapted, hp.margin, support)?;
        adapted.apply_gradient(&grads, hp.task_lr)?;
    }
    Ok(adapted)
}

/// Losses and first-order meta-gradient of one episode.
#[derive(Debug, Clone)]
pub struct TaskOutcome {
    /// Support loss before adaptation.
    pub support_loss: f64,
    /// Query loss after adaptation.
    pub query_loss: f64,
    /// Gradient of the query loss at the adapted parameters.
    pub grads: Grads,
}

pub fn task_outcome(params: &Params, episode: &Episode, hp: &HyperParams) -> Result<TaskOutcome> {
    let context = episode.context();
    let tr = model::support_rep(params, &context)?;
    let support_loss = model::margin_loss(params, hp.margin, &tr, &episode.support)?;
    let adapted = inner_adapt(params, &episode.support, hp)?;
    let (query_loss, grads) =
        model::episode_loss_and_grad(&adapted, hp.margin, &context, &episode.query)?;
    Ok(TaskOutcome {
        support_loss,
        query_loss,
        grads,
    })
}

/// Summed meta-gradient over episodes. Episodes are evaluated in parallel;
/// the reduction runs in episode order.
pub fn meta_gradient(
    params: &Params,
    episodes: &[Episode],
    hp: &HyperParams,
) -> Result<(Grads, Vec<TaskOutcome>)> {
    let outcomes = episodes
        .par_iter()
        .map(|e| task_outcome(params, e, hp))
        .collect::<Vec<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::invalid(format!("task {i} failed: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let mut total = Grads::zeros(params.dim());
    for o in &outcomes {
        total.add_assign(&o.grads);
    }
    Ok((total, outcomes))
}

#[derive(Debug, Clone, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub tasks: usize,
    pub support_loss: f64,
    pub query_loss: f64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam moments. Embedding rows are updated lazily: only rows with a
/// gradient in the current step move.
#[derive(Debug, Clone)]
struct AdamState {
    t: i32,
    m_emb: Vec<f64>,
    v_emb: Vec<f64>,
    m_w: Vec<f64>,
    v_w: Vec<f64>,
    m_b: Vec<f64>,
    v_b: Vec<f64>,
}

impl AdamState {
    fn new(params: &Params) -> Self {
        let dim = params.dim();
        AdamState {
            t: 0,
            m_emb: vec![0.0; params.n_items() * dim],
            v_emb: vec![0.0; params.n_items() * dim],
            m_w: vec![0.0; 2 * dim * dim],
            v_w: vec![0.0; 2 * dim * dim],
            m_b: vec![0.0; dim],
            v_b: vec![0.0; dim],
        }
    }

    fn update(&mut self, params: &mut Params, grads: &Grads, lr: f64) -> Result<()> {
        self.t += 1;
        let lr_t = lr * (1.0 - ADAM_BETA2.powi(self.t)).sqrt() / (1.0 - ADAM_BETA1.powi(self.t));
        let step = |p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                p[i] -= lr_t * m[i] / (v[i].sqrt() + ADAM_EPS);
            }
        };
        let dim = params.dim();
        for (&item, g) in &grads.d_embeddings {
            let row = item.index() * dim..(item.index() + 1) * dim;
            let p = params.embedding_mut(item)?;
            step(p, &mut self.m_emb[row.clone()], &mut self.v_emb[row], g);
        }
        step(
            params.transform_mut(),
            &mut self.m_w,
            &mut self.v_w,
            &grads.d_transform,
        );
        step(
            params.bias_mut(),
            &mut self.m_b,
            &mut self.v_b,
            &grads.d_bias,
        );
        Ok(())
    }
}

/// Shared initialisation plus everything needed to continue meta-training
/// deterministically.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: Params,
    pub hyper: HyperParams,
    pub step: u64,
    rng: EngineRng,
    adam: Option<AdamState>,
}

impl TrainState {
    pub fn new(params: Params, hyper: HyperParams) -> Self {
        let rng = rng::stream(hyper.seed, rng::TRAIN_STREAM);
        TrainState {
            params,
            hyper,
            step: 0,
            rng,
            adam: None,
        }
    }

    /// Fresh parameters seeded from `hyper.seed`.
    pub fn initialize(n_items: usize, hyper: HyperParams) -> Result<Self> {
        let params = initial_params(n_items, &hyper)?;
        Ok(TrainState::new(params, hyper))
    }

    pub fn rng(&mut self) -> &mut EngineRng {
        &mut self.rng
    }

    /// Sample negatives for each task, then take one meta-step.
    pub fn meta_batch_step(&mut self, tasks: &[Task], log: &IndexedLog) -> Result<StepStats> {
        if tasks.is_empty() {
            return Err(Error::invalid("meta batch is empty"));
        }
        // one seed per task, drawn in order, so parallel sampling is reproducible
        let seeds: Vec<u64> = tasks.iter().map(|_| self.rng.next_u64()).collect();
        let hp = &self.hyper;
        let episodes = tasks
            .par_iter()
            .zip(seeds)
            .map(|(task, seed)| {
                let mut task_rng = rng::stream(seed, 0);
                Episode::sample(task, log, hp, &mut task_rng)
            })
            .collect::<Result<Vec<_>>>()?;
        self.meta_step_on_episodes(&episodes)
    }

    /// One outer update from episodes whose negatives are already fixed.
    pub fn meta_step_on_episodes(&mut self, episodes: &[Episode]) -> Result<StepStats> {
        if episodes.is_empty() {
            return Err(Error::invalid("meta batch is empty"));
        }
        let (grads, outcomes) = meta_gradient(&self.params, episodes, &self.hyper)?;
        if !grads.is_finite() {
            return Err(Error::invalid(format!(
                "non-finite meta-gradient at step {}",
                self.step
            )));
        }
        match self.hyper.outer_optimizer {
            OuterOptimizer::Sgd => self.params.apply_gradient(&grads, self.hyper.meta_lr)?,
            OuterOptimizer::Adam => {
                let params = &self.params;
                self.adam
                    .get_or_insert_with(|| AdamState::new(params))
                    .update(&mut self.params, &grads, self.hyper.meta_lr)?;
            }
        }
        self.step += 1;
        let n = outcomes.len() as f64;
        Ok(StepStats {
            step: self.step,
            tasks: outcomes.len(),
            support_loss: outcomes.iter().map(|o| o.support_loss).sum::<f64>() / n,
            query_loss: outcomes.iter().map(|o| o.query_loss).sum::<f64>() / n,
        })
    }

    /// `epochs x ceil(tasks_per_epoch / meta_batch)` meta-steps.
    pub fn train<F: FnMut(&StepStats)>(
        &mut self,
        log: &IndexedLog,
        epochs: usize,
        tasks_per_epoch: usize,
        mut on_step: F,
    ) -> Result<()> {
        if epochs == 0 || tasks_per_epoch == 0 {
            return Ok(());
        }
        let sampler = TaskSampler::new(log, self.hyper.k)?;
        for _ in 0..epochs {
            let mut remaining = tasks_per_epoch;
            while remaining > 0 {
                let n = remaining.min(self.hyper.meta_batch);
                remaining -= n;
                let tasks: Vec<Task> = (0..n).map(|_| sampler.sample(&mut self.rng)).collect();
                let stats = self.meta_batch_step(&tasks, log)?;
                on_step(&stats);
            }
        }
        Ok(())
    }
}

pub fn initial_params(n_items: usize, hyper: &HyperParams) -> Result<Params> {
    Params::init(
        n_items,
        hyper.dim,
        &mut rng::stream(hyper.seed, rng::INIT_STREAM),
    )
}

/// Fine-tune a copy of the shared parameters on a new user's support pairs
/// and return it with the user's translation vector.
pub fn adapt_for_user<'a, R: Rng + ?Sized>(
    params: &'a Params,
    support: &[TransitionPair],
    hp: &HyperParams,
    log: &IndexedLog,
    rng: &mut R,
) -> Result<(AdaptedParams<'a>, TransitionRep)> {
    if support.is_empty() {
        return Err(Error::invalid("support set is empty"));
    }
    let adapted = if hp.inner_steps == 0 {
        AdaptedParams::new(params)
    } else {
        let triples = sampler::with_negatives(log, support, hp.negatives_per_pair, rng)?;
        inner_adapt(params, &triples, hp)?
    };
    let pairs: Vec<_> = support.iter().map(TransitionPair::items).collect();
    let tr = model::support_rep(&adapted, &pairs)?;
    Ok((adapted, tr))
}

/// Preference of each candidate as the next item after `query_head`:
/// the negated translation distance, so higher is better.
pub fn predict_scores<P: ParamView + ?Sized>(
    params: &P,
    tr: &TransitionRep,
    query_head: ItemId,
    candidates: &[ItemId],
) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::invalid("candidate list is empty"));
    }
    candidates
        .iter()
        .map(|&c| Ok(-model::score(params, tr, query_head, c)?))
        .collect()
}
