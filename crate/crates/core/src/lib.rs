//! Contrastive representation learning with synthetic hard negatives,
//! similarity-weighted negative sampling and debiasing.
//!
//! The crate is organised bottom-up: [`matrix`] and [`autodiff`] provide the
//! numerics, [`model`] the MLP encoder and projection head, [`negatives`] and
//! [`loss`] the objective, [`data`], [`train`] and [`eval`] the pipeline.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod matrix;
pub mod model;
pub mod negatives;
pub mod rng;
pub mod train;

pub use autodiff::{backward, grad_check, NodeId, Param, ParamSet, Tape};
pub use data::{
    gen_blobs, gen_rings, load_cifar10_binary, prepare, two_views, write_cifar10_binary, AugmentConfig, DataSource,
    LabeledDataset, PreparedData, Standardizer, ViewKey,
};
pub use error::{Error, Result};
pub use eval::{
    evaluate_encoder, export_embeddings, extract_features, linear_probe, pca2d, topk_accuracy, write_report,
    LinearClassifier, Pca2, ProbeConfig, ProbeScore, ReportRow,
};
pub use loss::{info_nce, sscl_loss, sscl_loss_on_tape, LossEval, LossMode, LossNodes};
pub use matrix::{l2_normalize_rows, similarity_matrix, top_k_desc, Matrix};
pub use model::checkpoint::Checkpoint;
pub use model::{EncoderConfig, ModelParams};
pub use negatives::{build_negative_sets, debiased_negative_term, LossParams, NegativeSet, StepKey, WeightMode};
pub use rng::{derive_seed, Purpose};
pub use train::{lr_at, pretrain, EpochMetrics, MetricsCsv, Pretrained, Sgd, TrainConfig, TrainObserver};
