use std::collections::{BTreeMap, BTreeSet};

use statrs::distribution::{ChiSquared, ContinuousCDF};

use metatl::data::UserHistory;
use metatl::sampler::{sample_negative, IndexedLog, TaskSampler};
use metatl::synthetic::{gen_dataset, MarkovSpec};
use metatl::{rng, ItemId};

fn history(name: &str, items: &[u32]) -> UserHistory {
    UserHistory {
        name: name.into(),
        items: items.iter().map(|&i| ItemId(i)).collect(),
        timestamps: (0..items.len() as i64).map(|t| 100 + 10 * t).collect(),
    }
}

fn chi_square_p_value(counts: &BTreeMap<ItemId, usize>, cells: usize, draws: usize) -> f64 {
    let expected = draws as f64 / cells as f64;
    let stat: f64 = counts
        .values()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(stat)
}

fn check_negative_distribution(seen: &[u32], n_items: usize, seed: u64) {
    let log = IndexedLog::new(vec![history("u", seen)], n_items).unwrap();
    let seen: BTreeSet<ItemId> = seen.iter().map(|&i| ItemId(i)).collect();
    let mut rng = rng::stream(seed, 0);
    let draws = 100_000;
    let mut counts = BTreeMap::new();
    for _ in 0..draws {
        let item = sample_negative(&log, 0, &mut rng).unwrap();
        assert!(!seen.contains(&item), "drew interacted item {item}");
        *counts.entry(item).or_insert(0) += 1;
    }
    let cells = n_items - seen.len();
    assert_eq!(counts.len(), cells);
    let p = chi_square_p_value(&counts, cells, draws);
    assert!(p > 0.01, "chi-square p-value {p}");
}

#[test]
fn negatives_are_uniform_over_unseen_items_by_rejection() {
    check_negative_distribution(&[0, 3, 7], 10, 1);
}

#[test]
fn negatives_are_uniform_over_unseen_items_by_complement() {
    check_negative_distribution(&[0, 1, 2, 4, 6, 8], 10, 2);
}

#[test]
fn single_unseen_item_is_forced() {
    let log = IndexedLog::new(vec![history("u", &[0, 1])], 3).unwrap();
    let mut rng = rng::stream(0, 0);
    for _ in 0..100 {
        assert_eq!(sample_negative(&log, 0, &mut rng).unwrap(), ItemId(2));
    }
}

/// Every task the construction rule can produce from a history.
fn enumerate_tasks(items: &[ItemId], k: usize) -> BTreeSet<Vec<(ItemId, ItemId)>> {
    let n = items.len();
    let mut out = BTreeSet::new();
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k + 1 {
            continue;
        }
        let chosen: Vec<ItemId> = (0..n)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| items[i])
            .collect();
        out.insert(chosen.windows(2).map(|w| (w[0], w[1])).collect());
    }
    out
}

#[test]
fn k4_tasks_match_brute_force_enumeration() {
    let items = [10, 11, 12, 13, 14, 15];
    let log = IndexedLog::new(vec![history("u", &items)], 20).unwrap();
    let ids: Vec<ItemId> = items.iter().map(|&i| ItemId(i)).collect();
    let allowed = enumerate_tasks(&ids, 4);
    assert_eq!(allowed.len(), 6);
    let sampler = TaskSampler::new(&log, 4).unwrap();
    let mut rng = rng::stream(3, 0);
    let mut produced = BTreeSet::new();
    for _ in 0..2_000 {
        let task = sampler.sample(&mut rng);
        assert_eq!(task.support.len(), 3);
        let mut chain: Vec<_> = task.support.iter().map(|p| p.items()).collect();
        chain.push(task.query.items());
        assert!(allowed.contains(&chain), "{chain:?} not producible");
        produced.insert(chain);
    }
    assert_eq!(produced, allowed);
}

#[test]
fn noisy_chain_follows_successor_at_expected_rate() {
    let n_items = 10;
    let spec = MarkovSpec {
        n_train_users: 5_000,
        n_test_users: 0,
        seq_len_range: (21, 21),
        noise: 0.2,
        ..MarkovSpec::cycle(n_items)
    };
    let log = gen_dataset(&spec, 8).unwrap();
    let item = |name: &str| name[1..].parse::<usize>().unwrap();
    let (mut transitions, mut followed) = (0usize, 0usize);
    for w in log.windows(2) {
        if w[0].user == w[1].user {
            transitions += 1;
            if item(&w[1].item) == (item(&w[0].item) + 1) % n_items {
                followed += 1;
            }
        }
    }
    assert_eq!(transitions, 100_000);
    let p = spec.hit_at_1_ceiling();
    assert!((p - 0.82).abs() < 1e-12);
    let sigma = (p * (1.0 - p) / transitions as f64).sqrt();
    let rate = followed as f64 / transitions as f64;
    assert!(
        (rate - p).abs() <= 3.0 * sigma,
        "rate {rate}, expected {p} +- {}",
        3.0 * sigma
    );
}
