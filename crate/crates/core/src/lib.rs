//! Training-free speaker-aware alignment of cross-modal attention.
//!
//! Visual tokens of a multi-speaker video and the speaker-labelled tokens of
//! its transcript are concatenated into one sequence. This crate measures how
//! strongly each transcript token attends to its speaker's on-screen region
//! ([`alignment`]), picks the heads whose cross-modal attention is strong
//! enough to intervene on, and adds an adaptive bias toward the speaker's
//! region inside those heads ([`attention`]).
//!
//! [`synth`] produces seeded toy scenes and weights, and [`oracle`] holds
//! brute-force references used by tests and the `verify` command.

pub mod alignment;
pub mod attention;
pub mod error;
pub mod numerics;
pub mod oracle;
pub mod scene;
pub mod synth;

pub use alignment::{
    aggregate_report, attn_max, attn_mean, classify_heads, head_activity_score, score_tokens, AlignmentReport,
    AlignmentScore, HeadId, HeadSample, HeadSelection, HeadSelector, LayerRange, RegionMode, ThresholdSelector,
};
pub use attention::{
    analyze_head_scores, baseline_attention, biased_attention, compute_bias_plan, cross_modal_block, forward_pass,
    forward_visit, head_activity, head_scores, rebias_rows, BiasConfig, BiasPlan, BiasReference, ForwardInputs,
    ForwardOutput, HeadTrace, HeadWeights, LayerStack,
};
pub use error::{Error, Result};
pub use numerics::{matmul, row_softmax, scaled_scores, Mask, Matrix};
pub use scene::{
    assign_speaker_labels, build_region_index, map_timestamp_to_frame, rasterize_box, PatchGrid, Scene, SceneFile,
    SpeakerBox, SpeakerId, SpeakerRegionIndex, TokenSequence, UtteranceToken,
};
