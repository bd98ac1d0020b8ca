//! Minimal differentiable-network substrate: a reverse-mode tape, dense and
//! LSTM layers, losses, optimizers, early stopping, gradient checking and
//! checkpoints. Everything runs in `f64`.

pub mod checkpoint;
pub mod fit;
pub mod gradcheck;
pub mod layers;
pub mod mixture;
pub mod optim;
pub mod tape;

pub use checkpoint::{sha256_hex, Checkpoint, TensorRecord};
pub use fit::{fit, mean_loss, EarlyStopping, EpochRecord, FitHistory, TrainSchedule, Trainable};
pub use gradcheck::{check_gradients, compare_gradients, relative_error, sample_probes, DEFAULT_STEP};
pub use layers::{Dense, LstmCell, Mlp};
pub use mixture::{mdn_nll, MixtureParams};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use tape::{log_sum_exp, sigmoid, Activation, NodeId, ParamId, ParamStore, ParamTensor, Tape};
