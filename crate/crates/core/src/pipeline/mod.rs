//! Stage orchestration over a pluggable chat backend.

pub mod backend;
pub mod http;
pub mod orchestrator;

pub use backend::{
    BackendError, ChatBackend, FnBackend, ReplayBackend, ReplayRecord, ReplaySpec, ScriptedBackend, Stage,
};
pub use http::{BackendConfig, HttpChatBackend};
pub use orchestrator::{
    assemble_candidates, run_batch, run_pipeline, DecisionView, PipelineConfig, PipelineError, PipelineErrorKind,
    PipelineMode, PipelineOutput, PipelineResult, StageOutcome, StageRunner, StageTranscript,
};
