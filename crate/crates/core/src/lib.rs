#![allow(clippy::needless_range_loop)]

//! Deformable 3D image registration at desk scale: a reverse-mode autodiff
//! tensor engine, deformation-field algebra with scaling-and-squaring
//! velocity integration, a dual-encoder registration network with progressive
//! coarse-to-fine field decomposition, training objectives, evaluation
//! metrics, container formats and a deterministic training loop.

pub mod error;
pub mod field;
pub mod io;
pub mod loss;
pub mod mat3;
pub mod metrics;
pub mod net;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{DregError, Result};
pub use field::{
    apply_affine, compose, identity_grid, integrate_velocity, jacobian_map, smoothness_report,
    upsample_field, warp, AffineParams, DisplacementField, Interp, SmoothnessReport, VelocityField,
};
pub use io::{
    load_checkpoint, normalize_minmax, read_volume, save_checkpoint, write_volume, AdamMoments,
    Checkpoint, Volume,
};
pub use loss::{
    affine_loss, dice_loss, nlcc_loss, pearson, smoothness_loss, total_loss, LossParts, LossWeights,
};
pub use metrics::{
    assd, dice_score, evaluate, hausdorff, hausdorff_symmetric, modality_average,
    mutual_information, MetricReport,
};
pub use net::{EncoderBranch, EncoderPyramid, ForwardPass, Model, NetConfig, RegistrationResult};
pub use synth::{synth_bspline_field, synth_pair, BsplineOrder, SynthConfig, SyntheticPair};
pub use tensor::{grad_check, ParamSet, Tensor};
pub use train::{adam_step, lr_at, train, StepRecord, TrainConfig, TrainOutcome, TrainSample};
