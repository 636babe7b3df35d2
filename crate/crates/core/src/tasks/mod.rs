//! Data generation and task math for max-value regression and amortised
//! mixture-of-Gaussians clustering.

pub mod ari;
pub mod dataset;
pub mod max_regression;
pub mod mog;

pub use ari::{ari, ClusterLabels};
pub use dataset::{read_dataset, write_dataset, write_dataset_csv, DATASET_VERSION};
pub use max_regression::{gen_max_regression, MaxRegressionBatch};
pub use mog::{
    assign_clusters, em_step, gen_synthetic_mog, mog_head, mog_loglik, mog_loglik_tape, EmStep, LogLik, MogDataset,
    MogGenConfig, MogHead, MogParams, SIGMA_FLOOR,
};
