//! Latent factor recommender: SGD matrix factorization, scoring and top-N lists.
//!
//! Ratings are approximated by a plain dot product `p_u · q_i` with no bias
//! terms. Training minimizes
//!
//! ```text
//! L = Σ (r_ui − p_u·q_i)² + λ (Σ_u ‖p_u‖² + Σ_i ‖q_i‖²)
//! ```
//!
//! one rating at a time: with `e = r_ui − p_u·q_i`, both vectors move by
//! `η (e·other − λ·self)`, using the pre-update values of each.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{InteractionTable, ItemId, UserId};
use crate::seeding::{derive_seed, rng_from_seed, shuffle};

#[derive(Debug, Error)]
pub enum MfError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training set has no ratings")]
    EmptyTrainingSet,
    #[error("training diverged at epoch {epoch}: non-finite factor entry")]
    Diverged { epoch: usize },
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("unknown item {0}")]
    UnknownItem(ItemId),
    #[error("factor vector for {what} has length {found}, expected {expected}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("failed to write model dump: {0}")]
    Dump(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub k: usize,
    pub learning_rate: f64,
    pub regularization: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Upper bound of the uniform initializer; `None` means `1/√k`.
    pub init_scale: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 50,
            learning_rate: 0.01,
            regularization: 0.01,
            epochs: 30,
            seed: 0,
            init_scale: None,
        }
    }
}

impl TrainConfig {
    pub fn init_scale(&self) -> f64 {
        self.init_scale
            .unwrap_or_else(|| 1.0 / (self.k.max(1) as f64).sqrt())
    }

    pub fn validate(&self) -> Result<(), MfError> {
        let bad = |m: String| Err(MfError::InvalidConfig(m));
        if self.k < 1 {
            return bad("k must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if !(self.regularization >= 0.0 && self.regularization.is_finite()) {
            return bad(format!(
                "regularization must be >= 0, got {}",
                self.regularization
            ));
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        let scale = self.init_scale();
        if !(scale >= 0.0 && scale.is_finite()) {
            return bad(format!("init_scale must be finite and >= 0, got {scale}"));
        }
        Ok(())
    }
}

/// User and item latent vectors of a common length `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    k: usize,
    user_index: BTreeMap<UserId, usize>,
    item_index: BTreeMap<ItemId, usize>,
    // Row-major, one row of length k per user / item in index order.
    user_factors: Vec<f64>,
    item_factors: Vec<f64>,
}

#[derive(Serialize)]
struct ModelDump<'a> {
    k: usize,
    users: BTreeMap<String, &'a [f64]>,
    items: BTreeMap<String, &'a [f64]>,
}

impl FactorModel {
    /// Random model covering the users and items of `table`, entries drawn
    /// from Uniform(0, init_scale).
    pub fn initialize(table: &InteractionTable, config: &TrainConfig) -> Result<Self, MfError> {
        config.validate()?;
        let mut rng = rng_from_seed(derive_seed(config.seed, "mf-init"));
        let scale = config.init_scale();
        let user_index: BTreeMap<UserId, usize> =
            table.users().enumerate().map(|(i, u)| (u, i)).collect();
        let item_index: BTreeMap<ItemId, usize> =
            table.items().enumerate().map(|(i, it)| (it, i)).collect();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n * config.k)
                .map(|_| rng.gen::<f64>() * scale)
                .collect()
        };
        let user_factors = draw(user_index.len());
        let item_factors = draw(item_index.len());
        Ok(Self {
            k: config.k,
            user_index,
            item_index,
            user_factors,
            item_factors,
        })
    }

    /// Model with explicitly supplied vectors.
    pub fn from_vectors(
        k: usize,
        users: BTreeMap<UserId, Vec<f64>>,
        items: BTreeMap<ItemId, Vec<f64>>,
    ) -> Result<Self, MfError> {
        let check = |what: String, v: &[f64]| {
            if v.len() == k {
                Ok(())
            } else {
                Err(MfError::DimensionMismatch {
                    what,
                    expected: k,
                    found: v.len(),
                })
            }
        };
        let mut user_index = BTreeMap::new();
        let mut user_factors = Vec::with_capacity(users.len() * k);
        for (i, (u, v)) in users.into_iter().enumerate() {
            check(format!("user {u}"), &v)?;
            user_index.insert(u, i);
            user_factors.extend(v);
        }
        let mut item_index = BTreeMap::new();
        let mut item_factors = Vec::with_capacity(items.len() * k);
        for (i, (it, v)) in items.into_iter().enumerate() {
            check(format!("item {it}"), &v)?;
            item_index.insert(it, i);
            item_factors.extend(v);
        }
        Ok(Self {
            k,
            user_index,
            item_index,
            user_factors,
            item_factors,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn users(&self) -> impl Iterator<Item = UserId> + '_ {
        self.user_index.keys().copied()
    }

    pub fn items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.item_index.keys().copied()
    }

    pub fn contains_user(&self, user: UserId) -> bool {
        self.user_index.contains_key(&user)
    }

    pub fn user_vector(&self, user: UserId) -> Option<&[f64]> {
        let i = *self.user_index.get(&user)?;
        Some(&self.user_factors[i * self.k..(i + 1) * self.k])
    }

    pub fn item_vector(&self, item: ItemId) -> Option<&[f64]> {
        let i = *self.item_index.get(&item)?;
        Some(&self.item_factors[i * self.k..(i + 1) * self.k])
    }

    pub fn item_vectors(&self) -> impl Iterator<Item = (ItemId, &[f64])> + '_ {
        self.item_index
            .iter()
            .map(|(&it, &i)| (it, &self.item_factors[i * self.k..(i + 1) * self.k]))
    }

    pub fn is_finite(&self) -> bool {
        self.user_factors
            .iter()
            .chain(&self.item_factors)
            .all(|x| x.is_finite())
    }

    /// Regularized squared-error objective over `table`.
    ///
    /// The penalty covers every vector in the model, so it matches the
    /// training objective when the model was built from the same table.
    pub fn objective(&self, table: &InteractionTable, regularization: f64) -> Result<f64, MfError> {
        let mut loss = 0.0;
        for rec in table.records() {
            let e = rec.rating - self.predict(rec.user_id, rec.item_id)?;
            loss += e * e;
        }
        let norm: f64 = self
            .user_factors
            .iter()
            .chain(&self.item_factors)
            .map(|x| x * x)
            .sum();
        Ok(loss + regularization * norm)
    }

    /// Runs `config.epochs` SGD passes over `table` starting from the
    /// current factors. Every rating in `table` must belong to a user and
    /// item already in the model.
    pub fn fit(&mut self, table: &InteractionTable, config: &TrainConfig) -> Result<(), MfError> {
        config.validate()?;
        if table.is_empty() {
            return Err(MfError::EmptyTrainingSet);
        }
        if config.k != self.k {
            return Err(MfError::DimensionMismatch {
                what: "training config".into(),
                expected: self.k,
                found: config.k,
            });
        }
        let mut samples = Vec::with_capacity(table.num_records());
        for rec in table.records() {
            let u = *self
                .user_index
                .get(&rec.user_id)
                .ok_or(MfError::UnknownUser(rec.user_id))?;
            let i = *self
                .item_index
                .get(&rec.item_id)
                .ok_or(MfError::UnknownItem(rec.item_id))?;
            samples.push((u, i, rec.rating));
        }

        let k = self.k;
        let mut rng = rng_from_seed(derive_seed(config.seed, "mf-order"));
        for epoch in 1..=config.epochs {
            shuffle(&mut samples, &mut rng);
            for &(u, i, r) in &samples {
                let p = &mut self.user_factors[u * k..(u + 1) * k];
                let q = &mut self.item_factors[i * k..(i + 1) * k];
                sgd_step(p, q, r, config.learning_rate, config.regularization);
            }
            if !self.is_finite() {
                return Err(MfError::Diverged { epoch });
            }
            if log::log_enabled!(log::Level::Trace) {
                log::trace!(
                    "mf epoch {epoch}: objective {:.6}",
                    self.objective(table, config.regularization)?
                );
            }
        }
        Ok(())
    }

    pub fn predict(&self, user: UserId, item: ItemId) -> Result<f64, MfError> {
        let p = self.user_vector(user).ok_or(MfError::UnknownUser(user))?;
        let q = self.item_vector(item).ok_or(MfError::UnknownItem(item))?;
        Ok(dot(p, q))
    }

    /// The `n` highest-scoring catalog items not in `interacted`, best first;
    /// equal scores are ordered by ascending item id.
    pub fn recommend_top_n(
        &self,
        user: UserId,
        interacted: &BTreeSet<ItemId>,
        n: usize,
    ) -> Result<Vec<ItemId>, MfError> {
        let p = self.user_vector(user).ok_or(MfError::UnknownUser(user))?;
        let mut scored: Vec<(f64, ItemId)> = self
            .item_vectors()
            .filter(|(it, _)| !interacted.contains(it))
            // + 0.0 folds −0.0 into +0.0 so total_cmp treats them as a tie
            .map(|(it, q)| (dot(p, q) + 0.0, it))
            .collect();
        let by_rank =
            |a: &(f64, ItemId), b: &(f64, ItemId)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if n < scored.len() {
            scored.select_nth_unstable_by(n, by_rank);
            scored.truncate(n);
        }
        scored.sort_unstable_by(by_rank);
        Ok(scored.into_iter().map(|(_, it)| it).collect())
    }

    /// JSON dump `{k, users: {id: [..]}, items: {id: [..]}}`.
    pub fn write_json<W: Write>(&self, writer: W) -> Result<(), MfError> {
        fn slice(f: &[f64], i: usize, k: usize) -> &[f64] {
            &f[i * k..(i + 1) * k]
        }
        let dump = ModelDump {
            k: self.k,
            users: self
                .user_index
                .iter()
                .map(|(u, &i)| (u.to_string(), slice(&self.user_factors, i, self.k)))
                .collect(),
            items: self
                .item_index
                .iter()
                .map(|(it, &i)| (it.to_string(), slice(&self.item_factors, i, self.k)))
                .collect(),
        };
        serde_json::to_writer_pretty(writer, &dump)?;
        Ok(())
    }
}

/// One SGD update on a single rating. Returns the pre-update error
/// `r − p·q`.
pub fn sgd_step(p: &mut [f64], q: &mut [f64], rating: f64, lr: f64, reg: f64) -> f64 {
    let e = rating - dot(p, q);
    for (pf, qf) in p.iter_mut().zip(q.iter_mut()) {
        let (p0, q0) = (*pf, *qf);
        *pf = p0 + lr * (e * q0 - reg * p0);
        *qf = q0 + lr * (e * p0 - reg * q0);
    }
    e
}

/// Per-rating loss `(r − p·q)² + λ(‖p‖² + ‖q‖²)`.
pub fn pointwise_loss(p: &[f64], q: &[f64], rating: f64, reg: f64) -> f64 {
    let e = rating - dot(p, q);
    let norm: f64 = p.iter().chain(q).map(|x| x * x).sum();
    e * e + reg * norm
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Trains a fresh model on `table`.
pub fn train_mf(table: &InteractionTable, config: &TrainConfig) -> Result<FactorModel, MfError> {
    config.validate()?;
    if table.is_empty() {
        return Err(MfError::EmptyTrainingSet);
    }
    let mut model = FactorModel::initialize(table, config)?;
    model.fit(table, config)?;
    Ok(model)
}

/// Most-interacted items in `table`, excluding `excluded`; ties go to the
/// lower item id. Used as the list served to users the model never saw.
pub fn popular_top_n(
    table: &InteractionTable,
    excluded: &BTreeSet<ItemId>,
    n: usize,
) -> Vec<ItemId> {
    let mut ranked: Vec<(usize, ItemId)> = table
        .item_counts()
        .iter()
        .filter(|(it, _)| !excluded.contains(it))
        .map(|(&it, &c)| (c, it))
        .collect();
    ranked.sort_unstable_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    ranked.into_iter().take(n).map(|(_, it)| it).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::RatingRecord;

    fn single_rating(r: f64) -> InteractionTable {
        InteractionTable::from_records([RatingRecord {
            user_id: UserId(1),
            item_id: ItemId(1),
            rating: r,
            timestamp: 0,
        }])
        .unwrap()
    }

    fn single_model(p: f64, q: f64) -> FactorModel {
        FactorModel::from_vectors(
            1,
            [(UserId(1), vec![p])].into_iter().collect(),
            [(ItemId(1), vec![q])].into_iter().collect(),
        )
        .unwrap()
    }

    fn cfg(lr: f64, reg: f64, epochs: usize) -> TrainConfig {
        TrainConfig {
            k: 1,
            learning_rate: lr,
            regularization: reg,
            epochs,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_init_is_a_fixed_point() {
        let mut m = single_model(0.0, 0.0);
        m.fit(&single_rating(1.0), &cfg(0.01, 0.01, 1)).unwrap();
        assert_eq!(m.user_vector(UserId(1)).unwrap(), &[0.0]);
        assert_eq!(m.item_vector(ItemId(1)).unwrap(), &[0.0]);
    }

    #[test]
    fn one_update_golden() {
        let mut m = single_model(0.1, 0.1);
        m.fit(&single_rating(1.0), &cfg(0.5, 0.0, 1)).unwrap();
        let p = m.user_vector(UserId(1)).unwrap()[0];
        let q = m.item_vector(ItemId(1)).unwrap()[0];
        assert!((p - 0.1495).abs() < 1e-12, "{p}");
        assert!((q - 0.1495).abs() < 1e-12, "{q}");
    }

    #[test]
    fn predict_dot_products() {
        let m = FactorModel::from_vectors(
            2,
            [(UserId(1), vec![0.0, 0.0]), (UserId(2), vec![1.0, 2.0])]
                .into_iter()
                .collect(),
            [(ItemId(1), vec![1.0, 1.0]), (ItemId(2), vec![3.0, 4.0])]
                .into_iter()
                .collect(),
        )
        .unwrap();
        assert_eq!(m.predict(UserId(1), ItemId(1)).unwrap(), 0.0);
        assert_eq!(m.predict(UserId(2), ItemId(2)).unwrap(), 11.0);
        assert!(matches!(
            m.predict(UserId(9), ItemId(1)),
            Err(MfError::UnknownUser(UserId(9)))
        ));
        assert!(matches!(
            m.predict(UserId(1), ItemId(9)),
            Err(MfError::UnknownItem(ItemId(9)))
        ));
    }

    #[test]
    fn from_vectors_checks_length() {
        let err = FactorModel::from_vectors(
            2,
            [(UserId(1), vec![0.0])].into_iter().collect(),
            BTreeMap::new(),
        )
        .unwrap_err();
        assert!(matches!(err, MfError::DimensionMismatch { .. }));
    }

    fn abc_model() -> FactorModel {
        // user · item scores: A=3.0, B=2.0, C=1.0
        FactorModel::from_vectors(
            1,
            [(UserId(1), vec![1.0])].into_iter().collect(),
            [
                (ItemId(1), vec![3.0]),
                (ItemId(2), vec![2.0]),
                (ItemId(3), vec![1.0]),
            ]
            .into_iter()
            .collect(),
        )
        .unwrap()
    }

    #[test]
    fn top_n_excludes_interacted() {
        let m = abc_model();
        let seen: BTreeSet<ItemId> = [ItemId(1)].into_iter().collect();
        assert_eq!(
            m.recommend_top_n(UserId(1), &seen, 2).unwrap(),
            vec![ItemId(2), ItemId(3)]
        );
        assert!(m.recommend_top_n(UserId(1), &seen, 0).unwrap().is_empty());
        let all: BTreeSet<ItemId> = m.items().collect();
        assert!(m.recommend_top_n(UserId(1), &all, 5).unwrap().is_empty());
        assert!(matches!(
            m.recommend_top_n(UserId(2), &seen, 1),
            Err(MfError::UnknownUser(_))
        ));
    }

    #[test]
    fn top_n_ties_by_item_id() {
        let m = FactorModel::from_vectors(
            1,
            [(UserId(1), vec![1.0])].into_iter().collect(),
            [
                (ItemId(7), vec![1.0]),
                (ItemId(3), vec![1.0]),
                (ItemId(5), vec![2.0]),
            ]
            .into_iter()
            .collect(),
        )
        .unwrap();
        assert_eq!(
            m.recommend_top_n(UserId(1), &BTreeSet::new(), 3).unwrap(),
            vec![ItemId(5), ItemId(3), ItemId(7)]
        );
    }

    #[test]
    fn signed_zero_scores_tie() {
        // user·item is −0.0 for item 2 and +0.0 for item 9
        let m = FactorModel::from_vectors(
            1,
            [(UserId(1), vec![-1.0])].into_iter().collect(),
            [(ItemId(2), vec![0.0]), (ItemId(9), vec![-0.0])]
                .into_iter()
                .collect(),
        )
        .unwrap();
        assert_eq!(
            m.recommend_top_n(UserId(1), &BTreeSet::new(), 2).unwrap(),
            vec![ItemId(2), ItemId(9)]
        );
    }

    fn counts_table(pairs: &[(u32, u32)]) -> InteractionTable {
        InteractionTable::from_records(pairs.iter().map(|&(u, i)| RatingRecord {
            user_id: UserId(u),
            item_id: ItemId(i),
            rating: 3.0,
            timestamp: 0,
        }))
        .unwrap()
    }

    #[test]
    fn popularity_lists() {
        // A = item 1 with count 3, B = item 2 with count 1
        let t = counts_table(&[(1, 1), (2, 1), (3, 1), (1, 2)]);
        assert_eq!(popular_top_n(&t, &BTreeSet::new(), 1), vec![ItemId(1)]);
        assert_eq!(
            popular_top_n(&t, &BTreeSet::new(), 10),
            vec![ItemId(1), ItemId(2)]
        );
        let ex: BTreeSet<ItemId> = [ItemId(1)].into_iter().collect();
        assert_eq!(popular_top_n(&t, &ex, 10), vec![ItemId(2)]);

        let tie = counts_table(&[(1, 9), (2, 9), (1, 4), (2, 4)]);
        assert_eq!(
            popular_top_n(&tie, &BTreeSet::new(), 2),
            vec![ItemId(4), ItemId(9)]
        );
        assert!(popular_top_n(&InteractionTable::default(), &BTreeSet::new(), 3).is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                k: 0,
                ..Default::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            TrainConfig {
                regularization: -1.0,
                ..Default::default()
            },
            TrainConfig {
                epochs: 0,
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(MfError::InvalidConfig(_))));
        }
        assert!(
            (TrainConfig {
                k: 4,
                ..Default::default()
            }
            .init_scale()
                - 0.5)
                .abs()
                < 1e-15
        );
    }

    #[test]
    fn empty_training_set() {
        assert!(matches!(
            train_mf(&InteractionTable::default(), &TrainConfig::default()),
            Err(MfError::EmptyTrainingSet)
        ));
    }

    #[test]
    fn divergence_names_epoch() {
        let mut m = single_model(10.0, 10.0);
        let err = m.fit(&single_rating(5.0), &cfg(10.0, 0.0, 20)).unwrap_err();
        assert!(matches!(err, MfError::Diverged { epoch } if epoch >= 1));
    }

    #[test]
    fn json_dump_shape() {
        let mut buf = Vec::new();
        abc_model().write_json(&mut buf).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(v["k"], 1);
        assert_eq!(v["users"]["1"][0], 1.0);
        assert_eq!(v["items"]["2"][0], 2.0);
    }
}
