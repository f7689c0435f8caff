pub mod backend;
pub mod manifest;
pub mod protocol;
pub mod studies;

pub use backend::{Backend, EncoderSpec};
pub use protocol::{
    run_protocol, run_synthetic, run_with_pretrained, Arm, CaptionClientKind, Pipeline, ProtocolConfig, ProtocolReport, Repro, SyntheticRun,
};
pub use studies::{ablation_variants, run_study, template_sweep_variants, StudyReport, Variant, STUDY_SEEDS};
