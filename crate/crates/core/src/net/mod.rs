//! Denoising network: sub-networks, the regularization layer, cascades and
//! training.

pub mod block;
pub mod config;
pub mod layer;
pub mod networks;
pub mod train;

pub use block::{
    block_forward, cascade_forward, classic_grid_search, denoise, load_model, loss_mse,
    model_checkpoint, plan_for, save_model,
};
pub use config::{
    CascadeConfig, ExemplarMode, NetConfig, SigmaSpec, TrainConfig, CLASSIC_BLUR_SIGMA,
};
pub use layer::{glr_layer, LayerSettings, LayerStats};
pub use networks::{
    cnn_f_forward, cnn_mu_forward, cnn_prefilter_forward, init_params, EXEMPLAR_RECEPTIVE_FIELD,
};
pub use train::{load_manifest, train, train_from, EpochRecord, TrainOutcome};
