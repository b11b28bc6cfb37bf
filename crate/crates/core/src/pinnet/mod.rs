//! The PIN network: shared conv trunk, regression and classification heads,
//! the joint loss, training-sample synthesis and the training loop.

mod checkpoint;
mod loss;
mod network;
mod sample;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, ModelMode};
pub use loss::{gt_label, loss, loss_and_seeds, LossTerms, PROB_FLOOR};
pub use network::{outputs_of, ForwardPass, Network, NetworkConfig, NetworkOutput, ParamBlock};
pub use sample::{make_sample_multi, make_sample_multi_at, make_sample_single, sample_b, stack_batch, TrainingSample};
pub use train::{train, TrainConfig, TrainSetup, TrainSummary};

use crate::dataset::DatasetError;
use crate::kv::KvError;
use crate::micrograd::MicrogradError;
use crate::patches::PatchError;
use crate::shapemodel::ShapeModelError;

#[derive(Debug, thiserror::Error)]
pub enum PinNetError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Micrograd(#[from] MicrogradError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    ShapeModel(#[from] ShapeModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("non-finite loss at iteration {iteration}; last good checkpoint: {last_good}")]
    NonFiniteLoss { iteration: usize, last_good: String },
}
