//! Reference training configurations.
//!
//! Max regression runs at full published scale. Clustering ships a reduced
//! desk-scale variant (model width 64, two encoder blocks, 10k steps) next to
//! the published 128-wide, 50k-step recipe and its large-set variant.

use crate::model::{DecoderConfig, EncoderBlock, EncoderConfig, ModelConfig, Pooling};
use crate::tasks::mog::MogGenConfig;
use crate::train::{LrSchedule, Task, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaxRegArch {
    SabPma,
    RffMax,
    RffMean,
    RffSum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClusterArch {
    /// Two ISAB(16) blocks, PMA with one seed per component, one SAB.
    SetTransformer,
    /// Row-wise FC encoder, mean pooling, FC decoder.
    RffPooling,
}

pub const NAMES: &[&str] = &[
    "maxreg-sab-pma",
    "maxreg-rff-max",
    "maxreg-rff-mean",
    "maxreg-rff-sum",
    "cluster-st-reduced",
    "cluster-rff-reduced",
    "cluster-st-paper",
    "cluster-rff-paper",
    "cluster-st-large",
    "cluster-rff-large",
];

pub fn by_name(name: &str) -> Option<TrainConfig> {
    use ClusterArch::*;
    use MaxRegArch::*;
    Some(match name {
        "maxreg-sab-pma" => max_regression(SabPma),
        "maxreg-rff-max" => max_regression(RffMax),
        "maxreg-rff-mean" => max_regression(RffMean),
        "maxreg-rff-sum" => max_regression(RffSum),
        "cluster-st-reduced" => clustering_reduced(SetTransformer),
        "cluster-rff-reduced" => clustering_reduced(RffPooling),
        "cluster-st-paper" => clustering_paper(SetTransformer),
        "cluster-rff-paper" => clustering_paper(RffPooling),
        "cluster-st-large" => clustering_large(SetTransformer),
        "cluster-rff-large" => clustering_large(RffPooling),
        _ => return None,
    })
}

/// Batch 128, Adam at a constant 1e-3, 20k batches, width 64.
pub fn max_regression(arch: MaxRegArch) -> TrainConfig {
    use EncoderBlock::*;
    let (blocks, pooling, hidden) = match arch {
        MaxRegArch::SabPma => (vec![Sab, Sab], Pooling::Pma(1), vec![]),
        MaxRegArch::RffMax => (vec![Fc, Fc, Fc, Linear], Pooling::Max, vec![64]),
        MaxRegArch::RffMean => (vec![Fc, Fc, Fc, Linear], Pooling::Mean, vec![64]),
        MaxRegArch::RffSum => (vec![Fc, Fc, Fc, Linear], Pooling::Sum, vec![64]),
    };
    TrainConfig {
        task: Task::MaxRegression,
        model: ModelConfig {
            encoder: EncoderConfig {
                input_dim: 1,
                dim: 64,
                heads: 4,
                blocks,
            },
            decoder: DecoderConfig {
                pooling,
                post_sabs: 0,
                pma_rff: false,
                hidden,
                output_dim: 1,
                output_rows: 1,
            },
        },
        schedule: LrSchedule::constant(1e-3),
        batch_size: 128,
        steps: 20_000,
        seed: 0,
        eval_every: 1000,
        eval_datasets: 1000,
        grad_clip: None,
        workers: 1,
        mog: MogGenConfig::default(),
    }
}

fn clustering(arch: ClusterArch, dim: usize, rff_blocks: usize, m: usize, mog: MogGenConfig) -> ModelConfig {
    let k = mog.k;
    let head = 1 + 2 * mog.dim;
    let (blocks, decoder) = match arch {
        ClusterArch::SetTransformer => (
            vec![EncoderBlock::Isab(m); 2],
            DecoderConfig {
                pooling: Pooling::Pma(k),
                post_sabs: 1,
                pma_rff: false,
                hidden: vec![],
                output_dim: head,
                output_rows: k,
            },
        ),
        ClusterArch::RffPooling => (
            vec![EncoderBlock::Fc; rff_blocks],
            DecoderConfig {
                pooling: Pooling::Mean,
                post_sabs: 0,
                pma_rff: false,
                hidden: vec![dim; 3],
                output_dim: k * head,
                output_rows: k,
            },
        ),
    };
    ModelConfig {
        encoder: EncoderConfig {
            input_dim: mog.dim,
            dim,
            heads: 4,
            blocks,
        },
        decoder,
    }
}

fn clustering_run(model: ModelConfig, mog: MogGenConfig, steps: usize, decay: usize) -> TrainConfig {
    TrainConfig {
        task: Task::Clustering,
        model,
        schedule: LrSchedule {
            lr: 1e-3,
            decay_step: Some(decay),
            decay_factor: 0.1,
        },
        batch_size: 10,
        steps,
        seed: 0,
        eval_every: 500,
        eval_datasets: 100,
        grad_clip: None,
        workers: 1,
        mog,
    }
}

/// Width 64, two encoder blocks, 10k steps with the decay at 70% of training.
pub fn clustering_reduced(arch: ClusterArch) -> TrainConfig {
    let mog = MogGenConfig::default();
    clustering_run(clustering(arch, 64, 2, 16, mog.clone()), mog, 10_000, 7_000)
}

/// Width 128, four FC blocks for the baseline, 50k steps decayed at 35k.
pub fn clustering_paper(arch: ClusterArch) -> TrainConfig {
    let mog = MogGenConfig::default();
    clustering_run(clustering(arch, 128, 4, 16, mog.clone()), mog, 50_000, 35_000)
}

/// Six components, 1000 to 5000 points, 32 inducing points.
pub fn clustering_large(arch: ClusterArch) -> TrainConfig {
    let mog = MogGenConfig::large_scale();
    clustering_run(clustering(arch, 128, 4, 32, mog.clone()), mog, 50_000, 35_000)
}
