//! Core library: autodiff tensors, Conformer building blocks, CTC loss and
//! decoding, key-frame attention masking and frame dropping, the two-encoder
//! model, and the synthetic dataset.

pub mod ctc;
pub mod data;
pub mod gradcheck;
pub mod keyframe;
pub mod model;
pub mod nn;
pub mod tensor;

pub use ctc::{
    argmax_frame_labels, ctc_greedy_decode, ctc_loss, edit_distance, CtcLoss, CtcPosterior,
    EditStats, LabelSeq, BLANK_ID,
};
pub use data::{
    batch, generate_synthetic, load_dataset, save_dataset, split, Batch, Dataset, DatasetError,
    SyntheticTaskSpec, Utterance,
};
pub use keyframe::{
    build_kfsa_mask, build_kfsa_mask_or_form, check_ctc_feasible, drop_ratio_stats,
    extract_key_frames, select_kfds_frames, AttentionMask, DropRatioStats, Feasibility,
    FrameSelection, KeyFrameSet, KfsaMode,
};
pub use model::{
    evaluate, evaluate_parallel, joint_loss, load_checkpoint, save_checkpoint, Adam,
    CheckpointError, EpochMetrics, EvalMetrics, ForwardOutput, ManifestEntry, Model, ModelConfig,
    ModelMode, RunMode, TrainError, Trainer, METRICS_CSV_HEADER,
};
pub use nn::{
    attention_mult_count, conformer_block, conv_module, feed_forward, multi_head_attention,
    positional_encoding, reset_attention_mult_count, scaled_dot_attention, subsample_frontend,
    AttentionParams, ConformerBlockParams, ConvModuleParams, FeedForwardParams, FrontendParams,
};
pub use tensor::{concat_cols, randn, Tensor, MASK_NEG};
