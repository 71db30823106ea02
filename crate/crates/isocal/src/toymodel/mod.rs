//! Desk-scale contextual sequence model, synthetic data, and training loop.

pub mod data;
pub mod model;
pub mod train;

pub use data::{gen_markov_data, Batch, Dataset, TransitionKind};
pub use model::{nll_loss, ItemForward, ToyConfig, ToyGrads, ToyModel};
pub use train::{
    batch_loss, contextual_matrix, evaluate, mean_pairwise_cosine, train, train_step, Calibration,
    EpochRecord, EvalMetrics, FlowJointConfig, StepMetrics, TrainingRun, EVAL_FRACTION,
};
