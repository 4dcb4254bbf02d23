//! Training and evaluation harness: run configuration, the combined
//! objective, SGD with a cosine schedule, checkpointing, BLEU/ROUGE
//! scoring, and beam-search generation glue.

pub mod checkpoint;
pub mod config;
pub mod diag;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod sgd;
pub mod train;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, ParamEntry, CHECKPOINT_VERSION,
};
pub use config::Config;
pub use diag::{check_gradients, CheckScope};
pub use loss::{bce_mean, compute_loss, cosine_lr, LossParts};
pub use metrics::{corpus_bleu, evaluate, rouge_l_f, EvalMetrics, BLEU_SMOOTH_EPS, ROUGE_BETA};
pub use model::{forward_loss, generate, init_model, prepare, Generated, PreparedExample};
pub use sgd::{scale_grads, Sgd, CLIP_NORM};
pub use train::{eval_nll, train, EpochLog, TrainOutcome};
