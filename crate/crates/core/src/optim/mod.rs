//! Training losses, Stiefel SGD and the closed-form oracles it should agree with.

pub mod loss;
pub mod oracle;
pub mod recovery;
pub mod sgd;

pub use crate::linalg::subspace_distance;
pub use loss::{loss_closed_single, loss_mc, score_matching_loss, Denoiser, McEstimate, Trained};
pub use oracle::{ksubspaces_oracle, pca_oracle, pca_oracle_adversarial, KSubspacesFit};
pub use recovery::{match_and_score, RecoveryReport, SUCCESS_THRESHOLD};
pub use sgd::{sgd_train, sgd_train_observed, NoiseSharing, TraceRow, TrainConfig, TrainOutcome};
