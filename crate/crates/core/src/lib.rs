//! Two-stage crowd counting: an attention map generator (AMG) that classifies
//! crowd vs background and exposes its fused class maps as an attention map,
//! and a density map estimator (DME) built from multi-scale deformable
//! convolutions. Includes the small autodiff engine both networks run on, a
//! deterministic synthetic corpus, and the density-map metric suite.

pub mod amg;
pub mod autograd;
pub mod checkpoint;
pub mod deform;
pub mod density;
pub mod dme;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use amg::{binarize_attention, train_amg, AmgNetwork, AttentionBundle};
pub use autograd::{Gradients, Tape, Var};
pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use deform::{bilinear_sample, DeformConvLayer};
pub use density::{count_from_density, gt_density, DensityMap};
pub use dme::{
    apply_attention, density_loss, dme_forward, inject_attention_features, train_dme, DmeNetwork,
    PipelineVariant, VariantKind,
};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, run_suite, GradCheckReport, SuiteOptions};
pub use metrics::{game, mae, mse, prepare_record, psnr, ssim, EvalRecord, MetricsReport};
pub use ops::resize::bilinear_resize;
pub use ops::Conv2dParams;
pub use pipeline::{evaluate, predict, threshold_sweep, Evaluation, Prediction, VariantRow};
pub use params::{adam_step, NetworkParams, Precision, TrainConfig};
pub use rng::SplitMix64;
pub use synth::{CorpusConfig, Label, SceneSample};
pub use tensor::{Real, Tensor};
