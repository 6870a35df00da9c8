#![allow(
    clippy::should_implement_trait,
    clippy::needless_range_loop,
    clippy::neg_cmp_op_on_partial_ord
)]

pub mod evaluation;
pub mod features;
pub mod gradsuite;
pub mod objectives;
pub mod parts;
pub mod tensor;
pub mod training;

pub use evaluation::{
    clustering_acc, evaluate, Accuracy, EvalReport, PartQuality, SimilarityReport,
};
pub use features::{Dataset, FeatureRecord, GcdSplit, GroundTruthParts, SynthSpec};
pub use objectives::{LossBreakdown, ObjectiveConfig, ObjectiveError};
pub use parts::{PartAssignment, QueryBank};
pub use tensor::{Graph, Tensor, TensorError, Var};
pub use training::{Ablation, ModelState, TrainConfig, TrainError};
