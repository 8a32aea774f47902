//! Training, evaluation and checkpointing of the assembled model.

mod checkpoint;
mod config;
mod eval;
mod model;
mod train;

pub use checkpoint::{check_dims, Checkpoint, OptimizerBlob, ParamBlob, MAGIC, VERSION};
pub use config::{LmDims, PathsConfig, PromptConfig, RunConfig, TrainConfig};
pub use eval::{
    category_of, evaluate, first_box, fusion_ablation, strip_localization, AblationReport, AblationRow, EvalItem, EvalOptions,
    EvalReport, EvalTask, IOU_THRESHOLDS,
};
pub use model::{Model, PrepareReport, SceneContext, FROZEN_PREFIXES, TRAINABLE_PREFIXES};
pub use train::{
    dataset_loss, localize_iou, scene_contexts, teacher_forced_accuracy, train, FrozenSnapshot, LocalizeReport,
    TrainReport, TrainState,
};
