//! Independent oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use recmia::dataset::{InteractionTable, ItemId, RatingRecord, UserId};
use recmia::features::Membership;
use recmia::metrics::ScoredSample;
use recmia::mf::FactorModel;
use recmia::pipeline::ExperimentConfig;
use recmia::{AttackTrainConfig, TrainConfig};

/// O(P·N) pair count, ties worth one half.
pub fn brute_force_auc(samples: &[ScoredSample]) -> f64 {
    let pos: Vec<f64> = samples
        .iter()
        .filter(|s| s.label.is_member())
        .map(|s| s.score)
        .collect();
    let neg: Vec<f64> = samples
        .iter()
        .filter(|s| !s.label.is_member())
        .map(|s| s.score)
        .collect();
    let mut halves = 0u64;
    for p in &pos {
        for n in &neg {
            halves += if p > n {
                2
            } else if p == n {
                1
            } else {
                0
            };
        }
    }
    halves as f64 / (2.0 * (pos.len() * neg.len()) as f64)
}

/// Scores every catalog item with explicit loops and fully sorts.
pub fn brute_force_top_n(
    model: &FactorModel,
    user: UserId,
    interacted: &BTreeSet<ItemId>,
    n: usize,
) -> Vec<ItemId> {
    let p = model.user_vector(user).unwrap();
    let mut all: Vec<(f64, ItemId)> = Vec::new();
    for item in model.items() {
        if interacted.contains(&item) {
            continue;
        }
        let q = model.item_vector(item).unwrap();
        let mut s = 0.0;
        for d in 0..p.len() {
            s += p[d] * q[d];
        }
        all.push((s, item));
    }
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(n).map(|(_, i)| i).collect()
}

/// Central finite-difference gradient of `f` at `x`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Max over components of `|a − b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn table(rows: &[(u32, u32, f64)]) -> InteractionTable {
    InteractionTable::from_records(rows.iter().map(|&(u, i, r)| RatingRecord {
        user_id: UserId(u),
        item_id: ItemId(i),
        rating: r,
        timestamp: 0,
    }))
    .unwrap()
}

pub const CLUSTERS: u32 = 4;
pub const CLUSTER_SIZE: u32 = 20;
pub const CLUSTER_PER_USER: u32 = 8;
pub const POPULAR_ITEMS: u32 = 10;
pub const POPULAR_BASE: u32 = 1000;
pub const POPULAR_PER_USER: u32 = 7;
pub const LIST_LENGTH: usize = (POPULAR_ITEMS - POPULAR_PER_USER) as usize;

pub fn cluster_of_item(item: ItemId) -> Option<u32> {
    (item.0 < POPULAR_BASE).then_some(item.0 / 100)
}

/// Forty users in four taste clusters of ten. Each user rates 8 of the 20
/// items of their own cluster at 5.0 and 7 of 10 shared "popular" items at
/// 1.0. Every popular item is rated by 28 users and every cluster item by
/// exactly 4, so popularity lists come from the popular block while a
/// trained recommender ranks high-rated cluster items first.
pub fn separable_table() -> InteractionTable {
    let mut rows = Vec::new();
    for u in 0..40u32 {
        let c = u % CLUSTERS;
        let offset = u / CLUSTERS;
        for j in 0..CLUSTER_PER_USER {
            rows.push((u + 1, c * 100 + (offset * 2 + j) % CLUSTER_SIZE, 5.0));
        }
        for j in 0..POPULAR_PER_USER {
            rows.push((u + 1, POPULAR_BASE + (u + j) % POPULAR_ITEMS, 1.0));
        }
    }
    table(&rows)
}

/// Config for the separable fixture: lists of length 3 (exactly the
/// unrated popular items for non-members) and recommenders trained long
/// enough to learn the cluster structure.
pub fn separable_config(data_path: &Path, out: &Path, seed: u64) -> ExperimentConfig {
    let mf = TrainConfig {
        k: 8,
        learning_rate: 0.05,
        regularization: 0.01,
        epochs: 200,
        ..TrainConfig::default()
    };
    ExperimentConfig {
        data_path: data_path.to_path_buf(),
        seed,
        recommender: mf.clone(),
        embedding: Some(mf),
        rec_list_length: LIST_LENGTH,
        attack: AttackTrainConfig {
            epochs: 300,
            learning_rate: 0.05,
            batch_size: 4,
            ..AttackTrainConfig::default()
        },
        output_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

pub fn write_table(table: &InteractionTable, path: &Path) {
    let f = std::fs::File::create(path).unwrap();
    table.write_csv(f).unwrap();
}

/// Location of ml-latest-small `ratings.csv`: `RECMIA_MOVIELENS` if set,
/// otherwise `data/ml-latest-small/ratings.csv` under the workspace root.
pub fn movielens_path() -> PathBuf {
    std::env::var_os("RECMIA_MOVIELENS")
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/ml-latest-small/ratings.csv")
        })
}

pub fn label_counts(samples: &[ScoredSample]) -> BTreeMap<Membership, usize> {
    let mut m = BTreeMap::new();
    for s in samples {
        *m.entry(s.label).or_default() += 1;
    }
    m
}
