//! Self-adaptive attention scaling on a deterministic toy flow-matching
//! transformer.
//!
//! The crate provides, in dependency order:
//!
//! - [`layout`]: the joint `[image, text, noise]` token sequence, its
//!   visibility policy, and the cross-attention slice.
//! - [`backbone`]: a seeded (or exactly scripted) multi-layer transformer
//!   denoiser with flow-matching sampling, per-(step, layer, head) attention
//!   capture, and a per-step controller hook.
//! - [`saas`]: the scaling pipeline — vital-layer map averaging, Gaussian
//!   smoothing, mask extraction, activation-ratio factors, and the
//!   apply-and-renormalize intervention — plus the fixed-factor baseline and
//!   automatic thresholding.
//! - [`perturb`]: step-wise and layer-wise blank-input perturbation
//!   protocols with cosine trajectory similarity.
//! - [`trace_io`] and [`pgm`]: the on-disk trace and map formats.

pub mod backbone;
pub mod error;
pub mod layout;
pub mod mat;
pub mod perturb;
pub mod pgm;
pub mod rng;
pub mod saas;
pub mod spatial;
pub mod trace_io;

pub use backbone::{
    forward, guided_velocity, init_backbone, rig_backbone, rig_backbone_with, sample,
    AttentionRecord, AttentionTrace, BackboneConfig, BackboneWeights, CaptureMode,
    ConditionSchedule, ConditionStates, ForwardContext, ForwardHooks, LatentState, LogitScript,
    SampleOptions, SamplerConfig, SamplingController,
};
pub use error::{Error, Result};
pub use layout::{
    build_attention_policy, build_layout, reshape_to_spatial, slice_cross_attention,
    AttentionPolicy, CrossAttentionSlice, LayoutSpec, Span, TokenLayout,
};
pub use mat::Mat;
pub use perturb::{
    baseline_latent, latent_similarity, make_blank_input, perturb_layers, perturb_steps,
    sweep_layers, sweep_steps, Direction, SimilarityPoint, SimilarityReport,
};
pub use saas::{
    aggregate_image_map, aggregate_instruction_map, apply_plan, average_vital_cross_attention,
    build_plan, compute_scaling_factor, extract_mask, fixed_scale_baseline, gaussian_kernel,
    gaussian_smooth, minmax_normalize, otsu_from_histogram, otsu_threshold, renormalize_attention,
    AppliedPlan, ConditionTokenMaps, FixedScaleController, NormalizedMap, OtsuResult,
    OutsideMaskMode, PlanEntry, PlanLogEntry, SaasConfig, SaasController, SaasPlan, ScaleFactor,
    ThresholdMode, XiSchedule, DEFAULT_ALPHA_CAP, OTSU_DEFAULT_BINS, TAU_EDITING,
    TAU_VISUAL_CONDITIONAL,
};
pub use spatial::{InstructionMask, MapSubject, SpatialActivationMap};
