//! Desk-scale experiment drivers: pretraining, sweeps, transcripts and
//! report emission.

pub mod plan;
pub mod pretrain;
pub mod report;
pub mod sweep;
pub mod transcript;

pub use plan::ExperimentPlan;
pub use pretrain::{pretrain, PretrainConfig, PretrainOutcome};
pub use report::emit_report;
pub use sweep::{run_lr_sweep, run_size_sweep, RunSummary};
pub use transcript::{run_transcript_capture, Transcript, TranscriptRow};
