//! Adversary-side item embeddings and per-user center-difference features.
//!
//! A user's feature is the mean embedding of the items they rated minus the
//! mean embedding of the items the recommender served them. Items without an
//! embedding are skipped; an empty mean is the zero vector.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{InteractionTable, ItemId, UserId};
use crate::mf::{train_mf, FactorModel, MfError, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ItemEmbeddingTable {
    k: usize,
    vectors: BTreeMap<ItemId, Vec<f64>>,
}

impl ItemEmbeddingTable {
    pub fn new(k: usize, vectors: BTreeMap<ItemId, Vec<f64>>) -> Result<Self, MfError> {
        if let Some((it, v)) = vectors.iter().find(|(_, v)| v.len() != k) {
            return Err(MfError::DimensionMismatch {
                what: format!("embedding {it}"),
                expected: k,
                found: v.len(),
            });
        }
        Ok(Self { k, vectors })
    }

    /// Item half of a trained factor model.
    pub fn from_model(model: &FactorModel) -> Self {
        Self {
            k: model.k(),
            vectors: model
                .item_vectors()
                .map(|(it, v)| (it, v.to_vec()))
                .collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, item: ItemId) -> Option<&[f64]> {
        self.vectors.get(&item).map(Vec::as_slice)
    }

    pub fn items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.vectors.keys().copied()
    }

    /// Largest Euclidean norm over all embeddings.
    pub fn max_norm(&self) -> f64 {
        self.vectors
            .values()
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

/// Trains matrix factorization on the adversary's shadow interactions and
/// keeps the item factors.
pub fn build_embeddings(
    shadow: &InteractionTable,
    config: &TrainConfig,
) -> Result<ItemEmbeddingTable, MfError> {
    let model = train_mf(shadow, config)?;
    Ok(ItemEmbeddingTable::from_model(&model))
}

/// Mean embedding of the resolvable items, with how many resolved.
pub fn center_with_coverage(items: &[ItemId], table: &ItemEmbeddingTable) -> (Vec<f64>, usize) {
    let mut sum = vec![0.0; table.k];
    let mut found = 0usize;
    for v in items.iter().filter_map(|&it| table.get(it)) {
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
        found += 1;
    }
    if found > 0 {
        let n = found as f64;
        sum.iter_mut().for_each(|s| *s /= n);
    }
    (sum, found)
}

pub fn center(items: &[ItemId], table: &ItemEmbeddingTable) -> Vec<f64> {
    center_with_coverage(items, table).0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Membership {
    Member,
    Nonmember,
}

impl Membership {
    pub fn is_member(self) -> bool {
        self == Membership::Member
    }

    pub fn flipped(self) -> Self {
        match self {
            Membership::Member => Membership::Nonmember,
            Membership::Nonmember => Membership::Member,
        }
    }
}

impl fmt::Display for Membership {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Membership::Member => "member",
            Membership::Nonmember => "nonmember",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Shadow,
    Target,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::Shadow => "shadow",
            Origin::Target => "target",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserFeature {
    pub user_id: UserId,
    pub vector: Vec<f64>,
    pub label: Membership,
    pub origin: Origin,
    /// Set when either side of the difference had no resolvable item.
    pub degenerate: bool,
}

/// `center(interactions) − center(recommendations)`.
pub fn extract_feature(
    user_id: UserId,
    interactions: &[ItemId],
    recommendations: &[ItemId],
    table: &ItemEmbeddingTable,
    label: Membership,
    origin: Origin,
) -> UserFeature {
    let (a, na) = center_with_coverage(interactions, table);
    let (b, nb) = center_with_coverage(recommendations, table);
    let degenerate = na == 0 || nb == 0;
    if degenerate {
        log::warn!(
            "{origin} user {user_id}: degenerate feature ({na} interacted and {nb} recommended items have embeddings)"
        );
    }
    UserFeature {
        user_id,
        vector: a.iter().zip(&b).map(|(x, y)| x - y).collect(),
        label,
        origin,
        degenerate,
    }
}

/// Per-dimension z-scoring fitted on one sample set and reused verbatim on
/// any other.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub const STD_FLOOR: f64 = 1e-8;

    /// Population mean and standard deviation per column; `rows` must be
    /// non-empty and rectangular.
    pub fn fit<'a, I>(rows: I) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        let dim = rows.first().map_or(0, |r| r.len());
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in &rows {
            for (m, x) in mean.iter_mut().zip(*r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in &rows {
            for ((v, x), m) in var.iter_mut().zip(*r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| (v / n).sqrt().max(Self::STD_FLOOR))
            .collect();
        Self { mean, std }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }
}

/// CSV dump `user_id,origin,label,f_1..f_k`.
pub fn write_features_csv<W: Write>(writer: W, features: &[UserFeature]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let k = features.first().map_or(0, |f| f.vector.len());
    let mut header = vec!["user_id".to_string(), "origin".into(), "label".into()];
    header.extend((1..=k).map(|i| format!("f_{i}")));
    w.write_record(&header)?;
    for f in features {
        let mut row = vec![
            f.user_id.to_string(),
            f.origin.to_string(),
            f.label.to_string(),
        ];
        row.extend(f.vector.iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
