//! End-to-end shadow-model attack and hyperparameter sweeps.
//!
//! One experiment runs this dataflow:
//!
//! 1. load ratings and split users into shadow/target pools of members and
//!    non-members;
//! 2. train the shadow recommender on shadow members only; members get its
//!    personalized top-N, non-members get the popularity top-N over the
//!    shadow-member ratings;
//! 3. train item embeddings on every shadow rating and turn each shadow user
//!    into a labelled center-difference feature;
//! 4. train the attack classifier on those features;
//! 5. repeat step 2 on the target pool with an independently trained target
//!    recommender, featurize through the same embeddings and standardizer,
//!    score, and compute ROC/AUC.
//!
//! Each stochastic stage draws from its own seed, derived from the master
//! seed and the stage name (see [`crate::seeding::derive_seed`]). Any seed
//! set inside the nested training configs is replaced by the derived one.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{
    predict_membership, train_attack, AttackError, AttackTrainConfig, MlpModel,
};
use crate::dataset::{
    load_ratings, split_users, DatasetError, InteractionTable, ItemId, SplitPlan, UserId,
};
use crate::features::{
    build_embeddings, extract_feature, write_features_csv, ItemEmbeddingTable, Membership, Origin,
    UserFeature,
};
use crate::metrics::{auc, roc_points, MetricsError, RocCurve, ScoredSample};
use crate::mf::{popular_top_n, train_mf, MfError, TrainConfig};
use crate::seeding::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Load,
    Split,
    ShadowRecommender,
    Embedding,
    ShadowFeatures,
    AttackTraining,
    TargetRecommender,
    TargetFeatures,
    Scoring,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Load => "load",
            Stage::Split => "split",
            Stage::ShadowRecommender => "shadow-recommender",
            Stage::Embedding => "embedding",
            Stage::ShadowFeatures => "shadow-features",
            Stage::AttackTraining => "attack-training",
            Stage::TargetRecommender => "target-recommender",
            Stage::TargetFeatures => "target-features",
            Stage::Scoring => "scoring",
            Stage::Output => "output",
        })
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Mf(#[from] MfError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: StageError,
    },
    #[error("unknown sweep parameter {0:?} (expected one of k, recommender_lr, attack_lr, N)")]
    UnknownParam(String),
    #[error("sweep {param}={value} seed {seed}: {source}")]
    SweepPoint {
        param: SweepParam,
        value: f64,
        seed: u64,
        #[source]
        source: Box<PipelineError>,
    },
}

impl PipelineError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Stage { stage, .. } => Some(*stage),
            PipelineError::SweepPoint { source, .. } => source.stage(),
            PipelineError::UnknownParam(_) => Some(Stage::Config),
        }
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: Into<StageError>> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::Stage {
            stage,
            source: e.into(),
        })
    }
}

fn invalid(msg: impl Into<String>) -> PipelineError {
    PipelineError::Stage {
        stage: Stage::Config,
        source: StageError::Invalid(msg.into()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data_path: PathBuf,
    pub seed: u64,
    pub shadow_fraction: f64,
    pub member_fraction: f64,
    pub recommender: TrainConfig,
    /// Adversary's embedding model; `None` copies `recommender`.
    pub embedding: Option<TrainConfig>,
    pub rec_list_length: usize,
    pub attack: AttackTrainConfig,
    pub output_dir: PathBuf,
    /// Also write `features.csv` and `attack_model.json`.
    pub dump_artifacts: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_path: PathBuf::new(),
            seed: 1,
            shadow_fraction: 0.5,
            member_fraction: 0.5,
            recommender: TrainConfig::default(),
            embedding: None,
            rec_list_length: 100,
            attack: AttackTrainConfig::default(),
            output_dir: PathBuf::from("out"),
            dump_artifacts: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(s).at(Stage::Config)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).at(Stage::Config)?;
        Self::from_json_str(&text)
    }

    pub fn embedding_config(&self) -> TrainConfig {
        self.embedding
            .clone()
            .unwrap_or_else(|| self.recommender.clone())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.recommender.validate().at(Stage::Config)?;
        self.embedding_config().validate().at(Stage::Config)?;
        self.attack.validate().at(Stage::Config)?;
        if self.rec_list_length < 1 {
            return Err(invalid("rec_list_length must be at least 1"));
        }
        for (name, v) in [
            ("shadow_fraction", self.shadow_fraction),
            ("member_fraction", self.member_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(invalid(format!(
                    "{name} must lie strictly inside (0, 1), got {v}"
                )));
            }
        }
        Ok(())
    }

    fn stage_recommender(&self, stage: &str) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, stage),
            ..self.recommender.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub shadow_member: usize,
    pub shadow_nonmember: usize,
    pub target_member: usize,
    pub target_nonmember: usize,
}

impl SampleCounts {
    fn tally(features: &[UserFeature]) -> Self {
        let mut c = Self::default();
        for f in features {
            let slot = match (f.origin, f.label) {
                (Origin::Shadow, Membership::Member) => &mut c.shadow_member,
                (Origin::Shadow, Membership::Nonmember) => &mut c.shadow_nonmember,
                (Origin::Target, Membership::Member) => &mut c.target_member,
                (Origin::Target, Membership::Nonmember) => &mut c.target_nonmember,
            };
            *slot += 1;
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub users: usize,
    pub items: usize,
    pub records: usize,
    pub duplicates_collapsed: usize,
}

impl DatasetSummary {
    fn of(table: &InteractionTable) -> Self {
        Self {
            users: table.num_users(),
            items: table.num_items(),
            records: table.num_records(),
            duplicates_collapsed: table.duplicates_collapsed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub auc: f64,
    pub counts: SampleCounts,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub degenerate_features: usize,
    pub dataset: DatasetSummary,
    pub embedding_items: usize,
    /// Kept out of `report.json` so identical runs produce identical bytes.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

/// User ids seen by each training or scoring stage of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentTrace {
    pub plan: Option<SplitPlan>,
    pub shadow_recommender_users: BTreeSet<UserId>,
    pub embedding_users: BTreeSet<UserId>,
    pub attack_training_users: BTreeSet<UserId>,
    pub target_recommender_users: BTreeSet<UserId>,
    pub scored_users: BTreeSet<UserId>,
    /// Recommendation list served to each user.
    pub served_lists: BTreeMap<UserId, Vec<ItemId>>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub roc: RocCurve,
    pub features: Vec<UserFeature>,
    pub scores: Vec<(UserId, ScoredSample)>,
    pub attack_model: MlpModel,
    pub trace: ExperimentTrace,
}

struct ServedUser {
    user: UserId,
    interactions: Vec<ItemId>,
    recommendations: Vec<ItemId>,
    label: Membership,
}

/// Trains a recommender on `members` and serves every pool user a list:
/// personalized top-N for members, popularity top-N for everyone else.
fn serve_pool(
    table: &InteractionTable,
    members: &BTreeSet<UserId>,
    nonmembers: &BTreeSet<UserId>,
    config: &TrainConfig,
    n: usize,
    trained_on: &mut BTreeSet<UserId>,
) -> Result<Vec<ServedUser>, MfError> {
    let member_table = table.restrict_to(members);
    trained_on.extend(member_table.users());
    let model = train_mf(&member_table, config)?;

    let mut served = Vec::with_capacity(members.len() + nonmembers.len());
    for &user in members {
        let interactions = table.user_items(user);
        let seen: BTreeSet<ItemId> = interactions.iter().copied().collect();
        let recommendations = model.recommend_top_n(user, &seen, n)?;
        served.push(ServedUser {
            user,
            interactions,
            recommendations,
            label: Membership::Member,
        });
    }
    for &user in nonmembers {
        let interactions = table.user_items(user);
        let seen: BTreeSet<ItemId> = interactions.iter().copied().collect();
        served.push(ServedUser {
            user,
            recommendations: popular_top_n(&member_table, &seen, n),
            interactions,
            label: Membership::Nonmember,
        });
    }
    Ok(served)
}

fn featurize(
    served: &[ServedUser],
    embeddings: &ItemEmbeddingTable,
    origin: Origin,
) -> Vec<UserFeature> {
    served
        .iter()
        .map(|s| {
            extract_feature(
                s.user,
                &s.interactions,
                &s.recommendations,
                embeddings,
                s.label,
                origin,
            )
        })
        .collect()
}

/// Runs one experiment on an already loaded table without touching disk.
pub fn execute(
    config: &ExperimentConfig,
    table: &InteractionTable,
) -> Result<ExperimentOutcome, PipelineError> {
    let started = Instant::now();
    config.validate()?;
    let mut trace = ExperimentTrace::default();

    let plan = split_users(
        table,
        derive_seed(config.seed, "split"),
        config.shadow_fraction,
        config.member_fraction,
    )
    .at(Stage::Split)?;
    log::debug!(
        "split: shadow {}+{}, target {}+{}",
        plan.shadow_members.len(),
        plan.shadow_nonmembers.len(),
        plan.target_members.len(),
        plan.target_nonmembers.len()
    );

    // Shadow side: everything the adversary controls.
    let shadow_served = serve_pool(
        table,
        &plan.shadow_members,
        &plan.shadow_nonmembers,
        &config.stage_recommender("shadow-recommender"),
        config.rec_list_length,
        &mut trace.shadow_recommender_users,
    )
    .at(Stage::ShadowRecommender)?;

    let shadow_table = table.restrict_to(&plan.shadow_users());
    trace.embedding_users.extend(shadow_table.users());
    let embedding_config = TrainConfig {
        seed: derive_seed(config.seed, "embedding"),
        ..config.embedding_config()
    };
    let embeddings = build_embeddings(&shadow_table, &embedding_config).at(Stage::Embedding)?;

    let shadow_features = featurize(&shadow_served, &embeddings, Origin::Shadow);
    trace
        .attack_training_users
        .extend(shadow_features.iter().map(|f| f.user_id));
    let attack_config = AttackTrainConfig {
        seed: derive_seed(config.seed, "attack"),
        ..config.attack.clone()
    };
    let attack_model = train_attack(&shadow_features, &attack_config).at(Stage::AttackTraining)?;

    // Target side: black-box lists only, featurized with the shadow embeddings.
    let target_served = serve_pool(
        table,
        &plan.target_members,
        &plan.target_nonmembers,
        &config.stage_recommender("target-recommender"),
        config.rec_list_length,
        &mut trace.target_recommender_users,
    )
    .at(Stage::TargetRecommender)?;
    let target_features = featurize(&target_served, &embeddings, Origin::Target);

    let mut scores = Vec::with_capacity(target_features.len());
    for f in &target_features {
        let p = predict_membership(&attack_model, &f.vector).at(Stage::Scoring)?;
        scores.push((f.user_id, ScoredSample::new(p, f.label)));
    }
    trace.scored_users.extend(scores.iter().map(|(u, _)| *u));
    let samples: Vec<ScoredSample> = scores.iter().map(|(_, s)| *s).collect();
    let auc_value = auc(&samples).at(Stage::Scoring)?;
    let roc = roc_points(&samples).at(Stage::Scoring)?;

    trace.served_lists = shadow_served
        .iter()
        .chain(&target_served)
        .map(|s| (s.user, s.recommendations.clone()))
        .collect();

    let mut features = shadow_features;
    features.extend(target_features);
    let report = ExperimentReport {
        auc: auc_value,
        counts: SampleCounts::tally(&features),
        config: config.clone(),
        seed: config.seed,
        degenerate_features: features.iter().filter(|f| f.degenerate).count(),
        dataset: DatasetSummary::of(table),
        embedding_items: embeddings.len(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    trace.plan = Some(plan);
    log::info!(
        "seed {}: auc {:.4} ({} target samples, {:.2}s)",
        config.seed,
        report.auc,
        samples.len(),
        report.wall_clock_seconds
    );

    Ok(ExperimentOutcome {
        report,
        roc,
        features,
        scores,
        attack_model,
        trace,
    })
}

/// Writes `report.json` and `roc.csv` (plus the optional dumps) into `dir`.
pub fn write_outcome(outcome: &ExperimentOutcome, dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).at(Stage::Output)?;
    let mut report = serde_json::to_string_pretty(&outcome.report).at(Stage::Output)?;
    report.push('\n');
    fs::write(dir.join("report.json"), report).at(Stage::Output)?;
    let mut roc = BufWriter::new(File::create(dir.join("roc.csv")).at(Stage::Output)?);
    outcome.roc.write_csv(&mut roc).at(Stage::Output)?;
    roc.flush().at(Stage::Output)?;

    if outcome.report.config.dump_artifacts {
        let file = File::create(dir.join("features.csv")).at(Stage::Output)?;
        write_features_csv(BufWriter::new(file), &outcome.features).at(Stage::Output)?;
        let file = File::create(dir.join("attack_model.json")).at(Stage::Output)?;
        outcome
            .attack_model
            .write_json(BufWriter::new(file))
            .at(Stage::Output)?;
    }
    Ok(())
}

/// Loads the data, runs the experiment and writes its artifacts to
/// `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, PipelineError> {
    let started = Instant::now();
    config.validate()?;
    let table = load_ratings(&config.data_path).at(Stage::Load)?;
    let mut outcome = execute(config, &table)?;
    outcome.report.wall_clock_seconds = started.elapsed().as_secs_f64();
    write_outcome(&outcome, &config.output_dir)?;
    Ok(outcome.report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    /// Latent dimension, applied to recommender and embedding together.
    #[serde(rename = "k")]
    K,
    #[serde(rename = "recommender_lr")]
    RecommenderLr,
    #[serde(rename = "attack_lr")]
    AttackLr,
    /// Recommendation list length.
    #[serde(rename = "N")]
    ListLength,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::K => "k",
            SweepParam::RecommenderLr => "recommender_lr",
            SweepParam::AttackLr => "attack_lr",
            SweepParam::ListLength => "N",
        }
    }

    fn is_integral(self) -> bool {
        matches!(self, SweepParam::K | SweepParam::ListLength)
    }

    /// Copy of `base` with this parameter set to `value`.
    pub fn apply(
        self,
        base: &ExperimentConfig,
        value: f64,
    ) -> Result<ExperimentConfig, PipelineError> {
        if !value.is_finite() || value <= 0.0 {
            return Err(invalid(format!("{self} must be positive, got {value}")));
        }
        if self.is_integral() && value.fract() != 0.0 {
            return Err(invalid(format!("{self} must be an integer, got {value}")));
        }
        let mut cfg = base.clone();
        match self {
            SweepParam::K => {
                let k = value as usize;
                let mut emb = cfg.embedding_config();
                emb.k = k;
                cfg.recommender.k = k;
                cfg.embedding = cfg.embedding.map(|_| emb);
            }
            SweepParam::RecommenderLr => cfg.recommender.learning_rate = value,
            SweepParam::AttackLr => cfg.attack.learning_rate = value,
            SweepParam::ListLength => cfg.rec_list_length = value as usize,
        }
        Ok(cfg)
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParam {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "k" => Ok(SweepParam::K),
            "recommender_lr" => Ok(SweepParam::RecommenderLr),
            "attack_lr" => Ok(SweepParam::AttackLr),
            "N" => Ok(SweepParam::ListLength),
            other => Err(PipelineError::UnknownParam(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub param: SweepParam,
    /// Ordered by (value, seed).
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Median AUC per swept value, ascending by value.
    pub fn medians(&self) -> Vec<(f64, f64)> {
        let mut grouped: Vec<(f64, Vec<f64>)> = Vec::new();
        for r in &self.rows {
            match grouped.last_mut() {
                Some((v, aucs)) if *v == r.value => aucs.push(r.auc),
                _ => grouped.push((r.value, vec![r.auc])),
            }
        }
        grouped
            .into_iter()
            .map(|(v, aucs)| (v, median(aucs)))
            .collect()
    }

    pub fn median_at(&self, value: f64) -> Option<f64> {
        self.medians()
            .into_iter()
            .find(|(v, _)| *v == value)
            .map(|(_, m)| m)
    }

    /// `param,value,seed,auc`, one row per run.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "param,value,seed,auc")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", self.param, r.value, r.seed, r.auc)?;
        }
        Ok(())
    }

    /// `param,value,median_auc`, one row per swept value.
    pub fn write_medians_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "param,value,median_auc")?;
        for (v, m) in self.medians() {
            writeln!(w, "{},{},{}", self.param, v, m)?;
        }
        Ok(())
    }
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_unstable_by(f64::total_cmp);
    let n = xs.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => xs[n / 2],
        _ => (xs[n / 2 - 1] + xs[n / 2]) / 2.0,
    }
}

/// Runs every (value, seed) pair on an already loaded table. Points run in
/// parallel; the result is ordered by (value, seed).
pub fn sweep_table(
    base: &ExperimentConfig,
    table: &InteractionTable,
    param: SweepParam,
    values: &[f64],
    seeds: &[u64],
) -> Result<SweepTable, PipelineError> {
    if values.is_empty() || seeds.is_empty() {
        return Err(invalid("sweep needs at least one value and one seed"));
    }
    let mut points = Vec::with_capacity(values.len() * seeds.len());
    for &value in values {
        let cfg = param.apply(base, value)?;
        cfg.validate()?;
        for &seed in seeds {
            points.push((
                value,
                seed,
                ExperimentConfig {
                    seed,
                    ..cfg.clone()
                },
            ));
        }
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let rows = points
        .into_par_iter()
        .map(|(value, seed, cfg)| {
            execute(&cfg, table)
                .map(|o| SweepRow {
                    value,
                    seed,
                    auc: o.report.auc,
                })
                .map_err(|e| PipelineError::SweepPoint {
                    param,
                    value,
                    seed,
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SweepTable { param, rows })
}

/// Loads `base.data_path`, sweeps `param` and writes `sweep.csv` plus
/// `sweep_medians.csv` into `base.output_dir`.
pub fn run_sweep(
    base: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    seeds: &[u64],
) -> Result<SweepTable, PipelineError> {
    base.validate()?;
    let table = load_ratings(&base.data_path).at(Stage::Load)?;
    let sweep = sweep_table(base, &table, param, values, seeds)?;
    let dir = &base.output_dir;
    fs::create_dir_all(dir).at(Stage::Output)?;
    let mut f = BufWriter::new(File::create(dir.join("sweep.csv")).at(Stage::Output)?);
    sweep.write_csv(&mut f).at(Stage::Output)?;
    f.flush().at(Stage::Output)?;
    let mut f = BufWriter::new(File::create(dir.join("sweep_medians.csv")).at(Stage::Output)?);
    sweep.write_medians_csv(&mut f).at(Stage::Output)?;
    f.flush().at(Stage::Output)?;
    Ok(sweep)
}
