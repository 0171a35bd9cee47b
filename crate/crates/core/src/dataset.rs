//! MovieLens-format ratings ingestion and the shadow/target user partition.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::{rng_from_seed, shuffle};

pub const MIN_RATING: f64 = 0.5;
pub const MAX_RATING: f64 = 5.0;

const HEADER: [&str; 4] = ["userId", "movieId", "rating", "timestamp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u32);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot open {path}: {source}")]
    Open {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: u64, reason: String },
    #[error("line {line}: rating {rating} outside [0.5, 5.0]")]
    RatingOutOfRange { line: u64, rating: f64 },
    #[error("rating {0} outside [0.5, 5.0]")]
    InvalidRating(f64),
    #[error("ratings file contains zero records")]
    Empty,
    #[error("{name} must lie strictly inside (0, 1), got {value}")]
    FractionOutOfRange { name: &'static str, value: f64 },
    #[error("need at least 4 users to populate every partition, got {0}")]
    TooFewUsers(usize),
    #[error("split leaves the {0} set empty")]
    EmptyPartition(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub rating: f64,
    pub timestamp: i64,
}

/// Ratings grouped per user, with at most one record per (user, item) pair.
///
/// Each user's records are kept sorted by item id. Equality compares the
/// records only, not how many duplicates were dropped while building.
#[derive(Debug, Clone, Default)]
pub struct InteractionTable {
    by_user: BTreeMap<UserId, Vec<RatingRecord>>,
    item_counts: BTreeMap<ItemId, usize>,
    num_records: usize,
    duplicates_collapsed: usize,
}

impl PartialEq for InteractionTable {
    fn eq(&self, other: &Self) -> bool {
        self.by_user == other.by_user
    }
}

impl InteractionTable {
    /// Builds a table, collapsing duplicate (user, item) pairs to the record
    /// with the latest timestamp (the later one wins a timestamp tie).
    pub fn from_records<I>(records: I) -> Result<Self, DatasetError>
    where
        I: IntoIterator<Item = RatingRecord>,
    {
        let mut latest: BTreeMap<(UserId, ItemId), RatingRecord> = BTreeMap::new();
        let mut duplicates_collapsed = 0;
        for rec in records {
            if !(MIN_RATING..=MAX_RATING).contains(&rec.rating) {
                return Err(DatasetError::InvalidRating(rec.rating));
            }
            match latest.entry((rec.user_id, rec.item_id)) {
                std::collections::btree_map::Entry::Vacant(v) => {
                    v.insert(rec);
                }
                std::collections::btree_map::Entry::Occupied(mut o) => {
                    duplicates_collapsed += 1;
                    if rec.timestamp >= o.get().timestamp {
                        o.insert(rec);
                    }
                }
            }
        }
        let mut table = Self::from_unique(latest.into_values());
        table.duplicates_collapsed = duplicates_collapsed;
        Ok(table)
    }

    // Records must be unique per (user, item) and arrive sorted by (user, item).
    fn from_unique<I: IntoIterator<Item = RatingRecord>>(records: I) -> Self {
        let mut by_user: BTreeMap<UserId, Vec<RatingRecord>> = BTreeMap::new();
        let mut item_counts: BTreeMap<ItemId, usize> = BTreeMap::new();
        let mut num_records = 0;
        for rec in records {
            *item_counts.entry(rec.item_id).or_default() += 1;
            by_user.entry(rec.user_id).or_default().push(rec);
            num_records += 1;
        }
        Self {
            by_user,
            item_counts,
            num_records,
            duplicates_collapsed: 0,
        }
    }

    pub fn num_users(&self) -> usize {
        self.by_user.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_counts.len()
    }

    pub fn num_records(&self) -> usize {
        self.num_records
    }

    pub fn is_empty(&self) -> bool {
        self.num_records == 0
    }

    /// Number of duplicate (user, item) rows dropped while building.
    pub fn duplicates_collapsed(&self) -> usize {
        self.duplicates_collapsed
    }

    pub fn users(&self) -> impl Iterator<Item = UserId> + '_ {
        self.by_user.keys().copied()
    }

    pub fn items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.item_counts.keys().copied()
    }

    pub fn contains_user(&self, user: UserId) -> bool {
        self.by_user.contains_key(&user)
    }

    /// Per-item interaction counts, keyed in ascending item order.
    pub fn item_counts(&self) -> &BTreeMap<ItemId, usize> {
        &self.item_counts
    }

    pub fn user_records(&self, user: UserId) -> &[RatingRecord] {
        self.by_user.get(&user).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Items rated by `user`, ascending.
    pub fn user_items(&self, user: UserId) -> Vec<ItemId> {
        self.user_records(user).iter().map(|r| r.item_id).collect()
    }

    pub fn records(&self) -> impl Iterator<Item = &RatingRecord> + '_ {
        self.by_user.values().flatten()
    }

    /// Sub-table holding only the records of `users`.
    pub fn restrict_to(&self, users: &BTreeSet<UserId>) -> Self {
        Self::from_unique(
            self.by_user
                .iter()
                .filter(|(u, _)| users.contains(u))
                .flat_map(|(_, recs)| recs.iter().copied()),
        )
    }

    /// Writes the table back out in the same CSV layout `load_ratings` reads.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(HEADER)?;
        for rec in self.records() {
            w.write_record([
                rec.user_id.to_string(),
                rec.item_id.to_string(),
                rec.rating.to_string(),
                rec.timestamp.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Loads a `userId,movieId,rating,timestamp` CSV file.
pub fn load_ratings(path: impl AsRef<Path>) -> Result<InteractionTable, DatasetError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DatasetError::Open {
        path: path.to_path_buf(),
        source,
    })?;
    read_ratings(file)
}

pub fn read_ratings<R: Read>(reader: R) -> Result<InteractionTable, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut rows = rdr.records();

    let header = match rows.next() {
        Some(h) => h?,
        None => return Err(DatasetError::Empty),
    };
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != HEADER {
        return Err(DatasetError::Malformed {
            line: 1,
            reason: format!(
                "expected header {}, found {}",
                HEADER.join(","),
                names.join(",")
            ),
        });
    }

    let mut records = Vec::new();
    for row in rows {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        records.push(parse_row(&row, line)?);
    }
    if records.is_empty() {
        return Err(DatasetError::Empty);
    }
    InteractionTable::from_records(records)
}

fn parse_row(row: &csv::StringRecord, line: u64) -> Result<RatingRecord, DatasetError> {
    if row.len() != 4 {
        return Err(DatasetError::Malformed {
            line,
            reason: format!("expected 4 fields, found {}", row.len()),
        });
    }
    let field = |i: usize, name: &str| -> Result<&str, DatasetError> {
        let v = row[i].trim();
        if v.is_empty() {
            Err(DatasetError::Malformed {
                line,
                reason: format!("empty {name}"),
            })
        } else {
            Ok(v)
        }
    };
    let bad = |name: &str, v: &str| DatasetError::Malformed {
        line,
        reason: format!("invalid {name} {v:?}"),
    };

    let user = field(0, "userId")?;
    let item = field(1, "movieId")?;
    let rating = field(2, "rating")?;
    let timestamp = field(3, "timestamp")?;

    let user_id = user.parse::<u32>().map_err(|_| bad("userId", user))?;
    let item_id = item.parse::<u32>().map_err(|_| bad("movieId", item))?;
    let rating_value = rating.parse::<f64>().map_err(|_| bad("rating", rating))?;
    if !(MIN_RATING..=MAX_RATING).contains(&rating_value) {
        return Err(DatasetError::RatingOutOfRange {
            line,
            rating: rating_value,
        });
    }
    let timestamp = timestamp
        .parse::<i64>()
        .map_err(|_| bad("timestamp", timestamp))?;

    Ok(RatingRecord {
        user_id: UserId(user_id),
        item_id: ItemId(item_id),
        rating: rating_value,
        timestamp,
    })
}

/// Disjoint assignment of every user to one of four roles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub shadow_members: BTreeSet<UserId>,
    pub shadow_nonmembers: BTreeSet<UserId>,
    pub target_members: BTreeSet<UserId>,
    pub target_nonmembers: BTreeSet<UserId>,
    pub seed: u64,
}

impl SplitPlan {
    pub fn shadow_users(&self) -> BTreeSet<UserId> {
        self.shadow_members
            .union(&self.shadow_nonmembers)
            .copied()
            .collect()
    }

    pub fn target_users(&self) -> BTreeSet<UserId> {
        self.target_members
            .union(&self.target_nonmembers)
            .copied()
            .collect()
    }
}

/// Seeded partition of the table's users into shadow/target pools, each
/// split into members and non-members.
///
/// Users are taken in ascending id order, Fisher–Yates shuffled with
/// ChaCha8 seeded by `seed`, then cut: the first `floor(U * shadow_fraction)`
/// form the shadow pool, and within each pool the first
/// `floor(P * member_fraction)` are members.
pub fn split_users(
    table: &InteractionTable,
    seed: u64,
    shadow_fraction: f64,
    member_fraction: f64,
) -> Result<SplitPlan, DatasetError> {
    check_fraction("shadow_fraction", shadow_fraction)?;
    check_fraction("member_fraction", member_fraction)?;
    let mut users: Vec<UserId> = table.users().collect();
    if users.len() < 4 {
        return Err(DatasetError::TooFewUsers(users.len()));
    }
    shuffle(&mut users, &mut rng_from_seed(seed));

    let n_shadow = (users.len() as f64 * shadow_fraction).floor() as usize;
    let (shadow, target) = users.split_at(n_shadow);
    let cut = |pool: &[UserId]| {
        let n_members = (pool.len() as f64 * member_fraction).floor() as usize;
        let (m, n) = pool.split_at(n_members);
        (
            m.iter().copied().collect::<BTreeSet<_>>(),
            n.iter().copied().collect::<BTreeSet<_>>(),
        )
    };
    let (shadow_members, shadow_nonmembers) = cut(shadow);
    let (target_members, target_nonmembers) = cut(target);

    for (name, set) in [
        ("shadow member", &shadow_members),
        ("shadow non-member", &shadow_nonmembers),
        ("target member", &target_members),
        ("target non-member", &target_nonmembers),
    ] {
        if set.is_empty() {
            return Err(DatasetError::EmptyPartition(name));
        }
    }

    Ok(SplitPlan {
        shadow_members,
        shadow_nonmembers,
        target_members,
        target_nonmembers,
        seed,
    })
}

fn check_fraction(name: &'static str, value: f64) -> Result<(), DatasetError> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(DatasetError::FractionOutOfRange { name, value })
    }
}
