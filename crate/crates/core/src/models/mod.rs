mod blocks;
mod config;
mod model;
mod train;
mod verify;

pub use blocks::{Block, ConvNextBlock, Mlp, ResMlpBlock, VitBlock};
pub use config::{
    published_configs, size_names, Family, ModelConfig, Variant, IMAGENET_IMAGE_SIZE, IMAGENET_NUM_CLASSES,
    XT_NUM_CLASSES,
};
pub use model::{build_model, Head, HeadNorm, Model, Stem, IN_CHANNELS};
pub use train::{
    accuracy, demo_config, train_demo, train_model, MirrorTask, TrainDemoOptions, TrainingReport, DEMO_IMAGE_SIZE,
};
pub use verify::{
    invariance_gap, layer_gradient_suite, layer_suite, logit_invariance, model_gradient_check, model_suite, SUITE_GRID,
    SUITE_WIDTH,
};
