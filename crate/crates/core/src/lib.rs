//! User-level membership inference against latent factor recommenders.
//!
//! The adversary trains a shadow recommender on users it owns, learns which
//! users were in that recommender's training set from the recommendation
//! lists it serves, and transfers the resulting classifier to a black-box
//! target recommender.
//!
//! Modules, bottom-up:
//!
//! - [`dataset`]: MovieLens-format ratings and the shadow/target user split
//! - [`mf`]: SGD matrix factorization, top-N and popularity lists
//! - [`features`]: item embeddings and center-difference user features
//! - [`classifier`]: the two-hidden-layer attack perceptron
//! - [`metrics`]: ROC curve and AUC
//! - [`pipeline`]: experiment and sweep orchestration

pub mod classifier;
pub mod dataset;
pub mod features;
pub mod metrics;
pub mod mf;
pub mod pipeline;
pub mod seeding;

pub use classifier::{predict_membership, train_attack, AttackTrainConfig, MlpModel};
pub use dataset::{
    load_ratings, split_users, InteractionTable, ItemId, RatingRecord, SplitPlan, UserId,
};
pub use features::{
    build_embeddings, center, extract_feature, ItemEmbeddingTable, Membership, Origin, UserFeature,
};
pub use metrics::{auc, roc_points, RocCurve, ScoredSample};
pub use mf::{popular_top_n, train_mf, FactorModel, TrainConfig};
pub use pipeline::{run_experiment, run_sweep, ExperimentConfig, ExperimentReport, SweepParam};
