//! Composition-driven aesthetic image cropping.
//!
//! The crate covers the deterministic side of a three-stage
//! analysis / proposal / decision cropping pipeline: box geometry and crop
//! metrics, rule-driven crop proposals, annotation overlays, the staged
//! vision-language-model loop behind a pluggable chat backend, training
//! corpus builders, preference objectives and dataset evaluation.

pub mod chat;
pub mod composition;
pub mod dataset;
pub mod eval;
mod font;
pub mod geometry;
pub mod objectives;
pub mod overlay;
pub mod parse;
pub mod pipeline;
pub mod prompts;

pub use composition::{
    CandidateId, CandidateSet, CompositionElement, CompositionError, CropCandidate, ElementCategory,
    LabeledCandidate, ProposalConfig, Provenance, RuleKind,
};
pub use geometry::{GeometryError, ImageDims, PixelBox};
pub use overlay::{GuideExtent, OverlayError, OverlayStyle, RasterImage};
