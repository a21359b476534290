//! Vessel segmentation toolkit: Hessian-based tubular-structure filtering, a
//! bipolar tensor-field descriptor, and a small two-encoder segmentation
//! pipeline trained on synthetic phantoms.
//!
//! Everything is deterministic: randomness flows only through the explicit
//! [`rng::Pcg32`] state, and parallel code paths produce bitwise-identical
//! results at any thread count.

pub mod btf;
pub mod error;
pub mod frangi;
pub mod image;
pub mod io;
pub mod losses;
pub mod net;
pub mod pipeline;
pub mod rng;
pub mod scalespace;

pub use btf::{
    alpha_magnitudes, build_btf, render_btf, BtfParams, CdfTable, RenderMode, RgbRaster,
};
pub use error::{Error, Result};
pub use frangi::{multiscale_vesselness, vesselness_at_scale, FrangiParams, VesselnessResult};
pub use image::{snap_unit, Image, Mask, MultiChannelField};
pub use losses::{
    dice_score, seg_loss, sim_loss, ssim, struct_loss, SegLossParams, SimLossParams, SsimParams,
    StructLossParams,
};
pub use net::{
    adam_step, net_from_bytes, net_to_bytes, AdamState, Conv3x3, ConvNet, ForwardCache, Layer,
    LrSchedule,
};
pub use pipeline::{
    compute_btfs, evaluate, gamma_fuse, generate_phantoms, infer, load_bundle, read_config,
    run_stage1, run_stage2, run_stage3, train_stage1, train_stage2, train_stage3, write_config,
    write_eval_csv, write_loss_csv, DiceSummary, DomainDescriptor, EvalReport, EvalRow,
    FusionParams, LatentPair, ModelBundle, PhantomSample, Stage1Output, Stage2Output, Stage3Output,
    TrainConfig,
};
pub use rng::Pcg32;
pub use scalespace::{
    eig2x2, frobenius_norm_sq, hessian_at_scale, DerivativeKernels, EigenPair, HessianField,
    ScaleGrid,
};
