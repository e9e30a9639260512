//! Noisy-data management: the train-then-filter cascade, the
//! mask-then-classify gate that grows the fine-tuning set, ground-truth
//! evaluation and whole-pipeline orchestration.

pub mod config;
pub mod eval;
pub mod filter;
pub mod finetune;
pub mod pipeline;
pub mod report;

pub use config::{FinetuneMode, PipelineConfig};
pub use filter::{filter_cascade, filter_stage, CascadeOutcome, FilterRule};
pub use finetune::{
    attention_pseudo_label, attention_pseudo_masks, build_finetune_set, compute_mask, finetune_gate,
    FinetuneExample, GateOutcome, PseudoLabelParams,
};
pub use pipeline::{run_pipeline, PipelineOutcome};
pub use report::{CurationReport, Decision, Purity, StageReport};
