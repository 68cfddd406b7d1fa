//! Pairwise preference study over crop outputs of competing methods.

pub mod http;
pub mod model;
pub mod service;
pub mod store;

pub use http::{router, serve, ServeOptions};
pub use model::{
    aggregate_results, create_study, distinct_votes, export_votes_to_dpo, CropOutput, MethodPair, PairResult, Side,
    StudyError, StudyImage, StudyItem, StudyResult, StudySpec, Vote,
};
pub use service::{ItemView, NextItem, Progress, SessionInfo, Study, VoteAck};
pub use store::{Appended, JsonlLog};
