//! Training stack: experiment configuration, Adam, the frozen perceptual
//! feature network, composite loss assembly, the two-phase adversarial
//! training step, bit-exact checkpointing, and the epoch-level fit loop with
//! validation, early stopping, and resume support.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod fit;
pub mod loss;
pub mod opt;
pub mod perceptual;
pub mod step;

pub use checkpoint::{
    disc_state, load_checkpoint, model_state, restore_disc, restore_model, save_checkpoint,
    AdamState, Checkpoint, TensorData, CHECKPOINT_VERSION,
};
pub use config::ExperimentConfig;
pub use eval::{bnua_discrepancy, evaluate_slices, predict_mean, predictive_std, SliceEval};
pub use fit::{
    fit, resume, EpochLog, FitOutcome, BEST_CHECKPOINT, CONFIG_SNAPSHOT, LAST_CHECKPOINT,
    TRAIN_LOG_HEADER, TRAIN_LOG_NAME,
};
pub use loss::{total_loss_on_tape, LossRecord, LossTerms};
pub use opt::Adam;
pub use perceptual::{perceptual_loss_on_tape, PerceptualNet};
pub use step::{train_step, Batch, StepConfig, StepOutput};
