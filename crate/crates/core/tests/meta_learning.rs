use metatl::data::{temporal_split, SplitBoundary, SplitDataset};
use metatl::meta::{self, Episode, TrainState};
use metatl::model::{self, ParamView, Params, Triple};
use metatl::sampler::{build_test_task, sample_distinct_negatives, IndexedLog, TaskSampler};
use metatl::synthetic::{gen_dataset, MarkovSpec};
use metatl::{rng, HyperParams, ItemId, OuterOptimizer};

fn dataset(noise: f64, seed: u64) -> SplitDataset {
    let spec = MarkovSpec {
        n_train_users: 300,
        n_test_users: 100,
        noise,
        ..MarkovSpec::cycle(60)
    };
    let log = gen_dataset(&spec, seed).unwrap();
    temporal_split(&log, spec.split_time, SplitBoundary::Test).unwrap()
}

fn indexed(ds: &SplitDataset) -> (IndexedLog, IndexedLog) {
    (
        IndexedLog::new(ds.train_users.clone(), ds.n_items()).unwrap(),
        IndexedLog::new(ds.test_users.clone(), ds.n_items()).unwrap(),
    )
}

fn hp(inner_steps: usize) -> HyperParams {
    HyperParams {
        dim: 8,
        task_lr: 0.05,
        meta_lr: 0.02,
        meta_batch: 16,
        inner_steps,
        ..Default::default()
    }
}

fn sample_episode(log: &IndexedLog, hp: &HyperParams, seed: u64) -> Episode {
    let mut rng = rng::stream(seed, 0);
    let task = TaskSampler::new(log, hp.k).unwrap().sample(&mut rng);
    Episode::sample(&task, log, hp, &mut rng).unwrap()
}

/// First sampled episode whose query hinge is active at `params`.
fn active_episode(log: &IndexedLog, hp: &HyperParams, params: &Params) -> Episode {
    (0..)
        .map(|seed| sample_episode(log, hp, seed))
        .find(|e| query_loss(params, hp, e) > 0.0)
        .unwrap()
}

fn query_loss(params: &Params, hp: &HyperParams, episode: &Episode) -> f64 {
    let context: Vec<_> = episode.support.iter().map(Triple::pair).collect();
    model::episode_loss_and_grad(params, hp.margin, &context, &episode.query)
        .unwrap()
        .0
}

/// Plain SGD written against the raw arrays.
fn manual_sgd(params: &Params, grads: &model::Grads, lr: f64) -> Params {
    let d = params.dim();
    let mut e = params.embeddings().to_vec();
    for (item, g) in &grads.d_embeddings {
        for j in 0..d {
            e[item.index() * d + j] -= lr * g[j];
        }
    }
    let w: Vec<f64> = params
        .transform()
        .iter()
        .zip(&grads.d_transform)
        .map(|(w, g)| w - lr * g)
        .collect();
    let b: Vec<f64> = params
        .bias()
        .iter()
        .zip(&grads.d_bias)
        .map(|(b, g)| b - lr * g)
        .collect();
    Params::from_parts(d, params.n_items(), e, w, b).unwrap()
}

fn max_abs_diff(a: &Params, b: &Params) -> f64 {
    let pairs = a
        .embeddings()
        .iter()
        .zip(b.embeddings())
        .chain(a.transform().iter().zip(b.transform()))
        .chain(a.bias().iter().zip(b.bias()));
    pairs.map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn no_inner_steps_single_task_is_plain_sgd_on_query_loss() {
    let ds = dataset(0.2, 1);
    let (train, _) = indexed(&ds);
    let hp = hp(0);
    let mut state = TrainState::initialize(ds.n_items(), hp.clone()).unwrap();
    let episode = active_episode(&train, &hp, &state.params);
    let before = state.params.clone();

    let context: Vec<_> = episode.support.iter().map(Triple::pair).collect();
    let (_, grads) =
        model::episode_loss_and_grad(&before, hp.margin, &context, &episode.query).unwrap();
    let expected = manual_sgd(&before, &grads, hp.meta_lr);

    state
        .meta_step_on_episodes(std::slice::from_ref(&episode))
        .unwrap();
    assert!(!grads.is_zero());
    assert!(max_abs_diff(&state.params, &expected) <= 1e-12);
}

#[test]
fn tiny_outer_step_lowers_query_loss() {
    let ds = dataset(0.2, 2);
    let (train, _) = indexed(&ds);
    let hp = HyperParams {
        meta_lr: 1e-6,
        ..hp(0)
    };
    for seed in 0..20 {
        let episode = sample_episode(&train, &hp, seed);
        let mut state = TrainState::initialize(ds.n_items(), hp.clone()).unwrap();
        let before = query_loss(&state.params, &hp, &episode);
        if before == 0.0 {
            continue;
        }
        state
            .meta_step_on_episodes(std::slice::from_ref(&episode))
            .unwrap();
        assert!(
            query_loss(&state.params, &hp, &episode) < before,
            "seed {seed}"
        );
    }
}

#[test]
fn query_loss_falls_over_repeated_meta_steps() {
    let ds = dataset(0.0, 3);
    let (train, _) = indexed(&ds);
    let hp = hp(1);
    let mut state = TrainState::initialize(ds.n_items(), hp.clone()).unwrap();
    let episode = active_episode(&train, &hp, &state.params);
    let episodes = vec![episode; 4];
    let losses: Vec<f64> = (0..200)
        .map(|_| state.meta_step_on_episodes(&episodes).unwrap().query_loss)
        .collect();
    let first: f64 = losses[..20].iter().sum();
    let last: f64 = losses[180..].iter().sum();
    assert!(losses[0] > 0.0);
    assert!(last < first, "first 20 sum {first}, last 20 sum {last}");
    assert!(losses[199] < losses[0]);
}

#[test]
fn adaptation_never_touches_shared_params() {
    let ds = dataset(0.0, 4);
    let (_, test) = indexed(&ds);
    let hp = hp(3);
    let params = meta::initial_params(ds.n_items(), &hp).unwrap();
    let fingerprint = params.fingerprint();
    let task = build_test_task(0, test.user(0).unwrap(), hp.k).unwrap();
    let (adapted, _) = meta::adapt_for_user(
        &params,
        &task.support,
        &hp,
        &test,
        &mut rng::eval_stream(0, 0),
    )
    .unwrap();
    assert!(adapted.touched_items().count() > 0);
    assert_eq!(params.fingerprint(), fingerprint);
}

#[test]
fn without_inner_steps_adaptation_is_identity() {
    let ds = dataset(0.0, 5);
    let (_, test) = indexed(&ds);
    let hp = hp(0);
    let params = meta::initial_params(ds.n_items(), &hp).unwrap();
    let task = build_test_task(2, test.user(2).unwrap(), hp.k).unwrap();
    let (adapted, tr) = meta::adapt_for_user(
        &params,
        &task.support,
        &hp,
        &test,
        &mut rng::eval_stream(0, 2),
    )
    .unwrap();
    assert_eq!(adapted.to_params(), params);
    let pairs: Vec<_> = task.support.iter().map(|p| p.items()).collect();
    assert_eq!(tr, model::support_rep(&params, &pairs).unwrap());
}

#[test]
fn adaptation_lowers_query_loss_across_synthetic_users() {
    let ds = dataset(0.0, 6);
    let (train, test) = indexed(&ds);
    let hp = HyperParams {
        outer_optimizer: OuterOptimizer::Adam,
        dim: 16,
        meta_lr: 0.03,
        ..hp(1)
    };
    let mut state = TrainState::initialize(ds.n_items(), hp.clone()).unwrap();
    state.train(&train, 1, 50 * hp.meta_batch, |_| {}).unwrap();
    let (mut before, mut after) = (0.0, 0.0);
    for u in 0..test.n_users() {
        let task = build_test_task(u, test.user(u).unwrap(), hp.k).unwrap();
        let negatives =
            sample_distinct_negatives(&test, u, 20, &mut rng::stream(9, u as u64)).unwrap();
        let query: Vec<_> = negatives
            .iter()
            .map(|&n| Triple::new(task.query_head, task.truth, n))
            .collect();
        let pairs: Vec<_> = task.support.iter().map(|p| p.items()).collect();
        let tr = model::support_rep(&state.params, &pairs).unwrap();
        before += model::margin_loss(&state.params, hp.margin, &tr, &query).unwrap();
        let (adapted, tr) = meta::adapt_for_user(
            &state.params,
            &task.support,
            &hp,
            &test,
            &mut rng::eval_stream(hp.seed, u),
        )
        .unwrap();
        after += model::margin_loss(&adapted, hp.margin, &tr, &query).unwrap();
    }
    assert!(
        after < before,
        "query loss {before} before adaptation, {after} after"
    );
}

#[test]
fn predicted_scores_follow_scalar_distances() {
    let hp = hp(0);
    let params = meta::initial_params(30, &hp).unwrap();
    let tr =
        model::support_rep(&params, &[(ItemId(1), ItemId(2)), (ItemId(2), ItemId(3))]).unwrap();
    let candidates: Vec<ItemId> = (0..30).map(ItemId).collect();
    let scores = meta::predict_scores(&params, &tr, ItemId(3), &candidates).unwrap();
    let d = hp.dim;
    let e = params.embeddings();
    let oracle: Vec<f64> = candidates
        .iter()
        .map(|c| {
            (0..d)
                .map(|j| {
                    let x = e[3 * d + j] + tr.values()[j] - e[c.index() * d + j];
                    x * x
                })
                .sum()
        })
        .collect();
    for i in 0..candidates.len() {
        for j in 0..candidates.len() {
            assert_eq!(scores[i] > scores[j], oracle[i] < oracle[j], "{i} vs {j}");
        }
    }
}
