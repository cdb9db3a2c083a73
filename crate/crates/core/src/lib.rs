//! Affinity contrastive learning for skeleton sequences.
//!
//! Misclassification counts gathered during training define which classes
//! are confusable. Classes that are confused with each other, or that share
//! many confusion neighbors, form a motion family. Each sample is pulled
//! toward its class prototype and pushed away from the prototypes of its
//! family ([`losses::inter_affinity_loss`]). A margin-based intra-class term
//! ([`losses::intra_marginal_loss`]) separates hard positives from in-batch
//! negatives. Both sit on top of cross-entropy over a small graph encoder
//! ([`backbone`]).

pub mod affinity;
pub mod backbone;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod numerics;
pub mod prototypes;
pub mod trainer;

pub use affinity::{AffinityMatrix, AffinityModel, ConfusionStats, MotionFamilies};
pub use backbone::{EncodeOutput, EncoderParams, SkeletonGraph};
pub use data::{GenConfig, SkeletonDataset};
pub use error::{AclError, ErrorKind, Result};
pub use losses::{ContrastConfig, LossBreakdown};
pub use numerics::{DenseTensor, GradEvaluation, ParamSet};
pub use prototypes::PrototypeBank;
pub use trainer::{Checkpoint, EpochMetrics, EvalReport, TrainConfig, TrainOutcome};
