//! The analysis, proposal and decision loop over a chat backend.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::backend::{BackendError, ChatBackend, Stage};
use crate::chat::{sha256_hex, ChatMessage, ContentPart, MessageRecord, Role};
use crate::composition::{
    dedupe, pad_with_perturbations, rule_seeds, CandidateId, CandidateSet, CompositionElement,
    CompositionError, CropCandidate, ProposalConfig, Provenance, MAX_CANDIDATES,
};
use crate::geometry::{ImageDims, PixelBox};
use crate::overlay::{render_decision_sheet, render_enhancement, OverlayError, OverlayStyle, RasterImage};
use crate::parse::{format_elements, parse_analysis, parse_decision, parse_proposal};
use crate::prompts::{candidate_listing, PromptRegistry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineMode {
    /// VLM proposals merged with rule-engine crops and padded to the target count.
    #[default]
    Hybrid,
    VlmOnly,
    /// One prompt, one box, no decision stage.
    Baseline,
}

impl PipelineMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PipelineMode::Hybrid => "hybrid",
            PipelineMode::VlmOnly => "vlm-only",
            PipelineMode::Baseline => "baseline",
        }
    }
}

impl fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PipelineMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hybrid" => Ok(PipelineMode::Hybrid),
            "vlm-only" => Ok(PipelineMode::VlmOnly),
            "baseline" => Ok(PipelineMode::Baseline),
            other => Err(format!("unknown mode {other:?}, expected hybrid, vlm-only or baseline")),
        }
    }
}

/// What the decision request shows for each candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionView {
    #[default]
    Thumbnails,
    /// Only the coordinate listing; for backends without multi-image support.
    TextOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: PipelineMode,
    /// Correction retries per stage after the first attempt.
    pub max_retries: u32,
    pub proposal: ProposalConfig,
    pub style: OverlayStyle,
    pub decision_view: DecisionView,
    /// Also attach the plain image to the proposal request.
    pub proposal_includes_original: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: PipelineMode::Hybrid,
            max_retries: 2,
            proposal: ProposalConfig::default(),
            style: OverlayStyle::default(),
            decision_view: DecisionView::Thumbnails,
            proposal_includes_original: false,
        }
    }
}

/// Parsed value or parse error of one attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOutcome {
    Parsed(Value),
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTranscript {
    pub stage: Stage,
    /// 1-based attempt number within the stage.
    pub attempt: u32,
    pub request: Vec<MessageRecord>,
    /// `None` when the backend failed before replying.
    pub response: Option<String>,
    pub outcome: StageOutcome,
}

#[derive(Debug, Error)]
pub enum PipelineErrorKind {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("analysis: {0}")]
    Analysis(#[from] crate::parse::AnalysisParseError),
    #[error("proposal: {0}")]
    Proposal(#[from] crate::parse::ProposalParseError),
    #[error("image: {0}")]
    Image(#[from] OverlayError),
    #[error("candidates: {0}")]
    Composition(#[from] CompositionError),
}

/// A stage failed for good. Carries every transcript recorded up to the
/// failure.
#[derive(Debug, Error)]
#[error("{stage} stage failed: {kind}")]
pub struct PipelineError {
    pub stage: Stage,
    pub kind: PipelineErrorKind,
    pub transcripts: Vec<StageTranscript>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub image_sha256: String,
    pub dims: ImageDims,
    pub mode: PipelineMode,
    pub elements: Vec<CompositionElement>,
    /// Hash of the overlay PNG sent to the proposal stage.
    pub enhanced_sha256: Option<String>,
    pub candidates: CandidateSet,
    pub final_id: CandidateId,
    #[serde(rename = "final_box")]
    pub final_crop: PixelBox,
    /// True when the decision fell back to candidate `A`.
    pub fallback: bool,
    pub transcripts: Vec<StageTranscript>,
    pub warnings: Vec<String>,
}

/// A result with the images it refers to.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub result: PipelineResult,
    pub enhanced: Option<RasterImage>,
    pub thumbnails: Vec<(CandidateId, RasterImage)>,
}

type StageResult<T> = Result<T, (Stage, PipelineErrorKind)>;

/// Per-image state shared by the stages: backend handle, retry budget and
/// the append-only transcript.
pub struct StageRunner<'a> {
    backend: &'a dyn ChatBackend,
    prompts: &'a PromptRegistry,
    max_retries: u32,
    pub transcripts: Vec<StageTranscript>,
    pub warnings: Vec<String>,
}

/// Analysis request: the image followed by the analysis prompt.
pub fn analysis_message(image_png: &[u8], prompts: &PromptRegistry) -> ChatMessage {
    ChatMessage::new(
        Role::User,
        vec![
            ContentPart::Image(image_png.to_vec()),
            ContentPart::Text(prompts.analysis.clone()),
        ],
    )
    .expect("nonempty")
}

impl<'a> StageRunner<'a> {
    pub fn new(backend: &'a dyn ChatBackend, prompts: &'a PromptRegistry, max_retries: u32) -> Self {
        Self {
            backend,
            prompts,
            max_retries,
            transcripts: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// Send `messages`, parse, and on a parse failure append the reply and a
    /// correction turn before asking again. The inner `Err` is the last parse
    /// error once the retry budget is spent.
    fn exchange<T, E: fmt::Display>(
        &mut self,
        stage: Stage,
        mut messages: Vec<ChatMessage>,
        retry_prompt: &str,
        parse: impl Fn(&str) -> Result<T, E>,
        describe: impl Fn(&T) -> Value,
    ) -> Result<Result<T, E>, BackendError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            let request: Vec<MessageRecord> = messages.iter().map(MessageRecord::from).collect();
            let reply = match self.backend.complete(stage, &messages) {
                Ok(r) => r,
                Err(e) => {
                    self.transcripts.push(StageTranscript {
                        stage,
                        attempt,
                        request,
                        response: None,
                        outcome: StageOutcome::Error(e.to_string()),
                    });
                    return Err(e);
                }
            };
            let parsed = parse(&reply);
            self.transcripts.push(StageTranscript {
                stage,
                attempt,
                request,
                response: Some(reply.clone()),
                outcome: match &parsed {
                    Ok(v) => StageOutcome::Parsed(describe(v)),
                    Err(e) => StageOutcome::Error(e.to_string()),
                },
            });
            if parsed.is_ok() || attempt > self.max_retries {
                return Ok(parsed);
            }
            messages.push(ChatMessage::text(Role::Assistant, reply));
            messages.push(ChatMessage::text(Role::User, retry_prompt));
        }
    }

    pub fn run_analysis(&mut self, image_png: &[u8], dims: ImageDims) -> StageResult<Vec<CompositionElement>> {
        let stage = Stage::Analysis;
        let messages = vec![analysis_message(image_png, self.prompts)];
        let retry = self.prompts.analysis_retry.clone();
        let parsed = self
            .exchange(
                stage,
                messages,
                &retry,
                |t| parse_analysis(t, dims),
                |els| serde_json::to_value(els).expect("elements serialize"),
            )
            .map_err(|e| (stage, e.into()))?;
        parsed.map_err(|e| (stage, e.into()))
    }

    /// Proposal request. The conversation carries the analysis turn and its
    /// canonical answer so the boxes are conditioned on the elements.
    pub fn run_proposal(
        &mut self,
        image_png: &[u8],
        enhanced_png: &[u8],
        elements_text: &str,
        dims: ImageDims,
        include_original: bool,
    ) -> StageResult<Vec<PixelBox>> {
        let stage = Stage::Proposal;
        let mut parts = vec![ContentPart::Image(enhanced_png.to_vec())];
        if include_original {
            parts.push(ContentPart::Image(image_png.to_vec()));
        }
        parts.push(ContentPart::Text(self.prompts.proposal.clone()));
        let messages = vec![
            analysis_message(image_png, self.prompts),
            ChatMessage::text(Role::Assistant, elements_text),
            ChatMessage::new(Role::User, parts).expect("nonempty"),
        ];
        let retry = self.prompts.proposal_retry.clone();
        let parsed = self
            .exchange(
                stage,
                messages,
                &retry,
                |t| parse_proposal(t, dims),
                |boxes| serde_json::to_value(boxes).expect("boxes serialize"),
            )
            .map_err(|e| (stage, e.into()))?;
        parsed.map_err(|e| (stage, e.into()))
    }

    /// Single-shot crop. Any extra boxes in the reply are ignored.
    pub fn run_baseline(&mut self, image_png: &[u8], dims: ImageDims) -> StageResult<PixelBox> {
        let stage = Stage::Baseline;
        let messages = vec![ChatMessage::new(
            Role::User,
            vec![
                ContentPart::Image(image_png.to_vec()),
                ContentPart::Text(self.prompts.baseline.clone()),
            ],
        )
        .expect("nonempty")];
        let retry = self.prompts.proposal_retry.clone();
        let parsed = self
            .exchange(
                stage,
                messages,
                &retry,
                |t| parse_proposal(t, dims),
                |boxes| serde_json::to_value(boxes).expect("boxes serialize"),
            )
            .map_err(|e| (stage, e.into()))?;
        let boxes = parsed.map_err(|e| (stage, e.into()))?;
        if boxes.len() > 1 {
            self.warnings
                .push(format!("baseline reply held {} boxes, kept the first", boxes.len()));
        }
        Ok(boxes[0])
    }

    /// Decision request. Never fails on a bad reply: after the retries it
    /// falls back to candidate `A` and records a warning. Returns the chosen
    /// ID and whether the fallback was taken.
    pub fn run_decision(
        &mut self,
        candidates: &CandidateSet,
        thumbnails: &[(CandidateId, RasterImage)],
    ) -> StageResult<(CandidateId, bool)> {
        let stage = Stage::Decision;
        assert!(!candidates.is_empty(), "decision needs at least one candidate");
        let mut parts = vec![
            ContentPart::Text(self.prompts.decision.clone()),
            ContentPart::Text(candidate_listing(candidates)),
        ];
        for (id, thumb) in thumbnails {
            parts.push(ContentPart::Text(format!("Candidate {id}:")));
            parts.push(ContentPart::Image(thumb.to_png()));
        }
        let messages = vec![ChatMessage::new(Role::User, parts).expect("nonempty")];
        let ids = candidates.ids();
        let retry = self.prompts.decision_retry.clone();
        let parsed = self
            .exchange(
                stage,
                messages,
                &retry,
                |t| parse_decision(t, &ids),
                |id| Value::String(id.to_string()),
            )
            .map_err(|e| (stage, e.into()))?;
        match parsed {
            Ok(id) => Ok((id, false)),
            Err(e) => {
                let first = ids[0];
                let msg = format!(
                    "decision unusable after {} attempts ({e}); fell back to candidate {first}",
                    self.max_retries + 1
                );
                log::warn!("{msg}");
                self.warnings.push(msg);
                Ok((first, true))
            }
        }
    }
}

/// Merge VLM boxes with rule crops according to the mode.
pub fn assemble_candidates(
    mode: PipelineMode,
    vlm_boxes: &[PixelBox],
    elements: &[CompositionElement],
    dims: ImageDims,
    cfg: &ProposalConfig,
    warnings: &mut Vec<String>,
) -> Result<CandidateSet, CompositionError> {
    let vlm: Vec<CropCandidate> = vlm_boxes.iter().map(|&b| CropCandidate::new(b, Provenance::Vlm)).collect();
    match mode {
        PipelineMode::Hybrid => {
            let mut seeds = vlm;
            seeds.extend(rule_seeds(elements, dims, cfg)?);
            CandidateSet::from_candidates(pad_with_perturbations(seeds, dims, cfg))
        }
        PipelineMode::VlmOnly => {
            let mut kept = dedupe(vlm, cfg.dedupe_iou);
            if kept.len() > MAX_CANDIDATES {
                warnings.push(format!("kept the first {MAX_CANDIDATES} of {} proposed boxes", kept.len()));
                kept.truncate(MAX_CANDIDATES);
            }
            CandidateSet::from_candidates(kept)
        }
        PipelineMode::Baseline => CandidateSet::from_candidates(vlm.into_iter().take(1).collect()),
    }
}

/// Crop one image end to end.
///
/// With a replay backend the result depends only on the image bytes, the
/// configuration (including the proposal seed) and the prompts.
pub fn run_pipeline(
    image_png: &[u8],
    backend: &dyn ChatBackend,
    cfg: &PipelineConfig,
    prompts: &PromptRegistry,
) -> Result<PipelineOutput, PipelineError> {
    let mut runner = StageRunner::new(backend, prompts, cfg.max_retries);
    match run_stages(image_png, &mut runner, cfg) {
        Ok(out) => Ok(out),
        Err((stage, kind)) => Err(PipelineError {
            stage,
            kind,
            transcripts: runner.transcripts,
        }),
    }
}

fn run_stages(image_png: &[u8], runner: &mut StageRunner<'_>, cfg: &PipelineConfig) -> StageResult<PipelineOutput> {
    let first_stage = if cfg.mode == PipelineMode::Baseline {
        Stage::Baseline
    } else {
        Stage::Analysis
    };
    let image = RasterImage::from_png(image_png).map_err(|e| (first_stage, e.into()))?;
    cfg.proposal.validate().map_err(|e| (first_stage, e.into()))?;
    cfg.style.validate().map_err(|e| (first_stage, e.into()))?;
    let dims = image.dims();

    let mut elements = Vec::new();
    let mut enhanced = None;
    let vlm_boxes = if cfg.mode == PipelineMode::Baseline {
        vec![runner.run_baseline(image_png, dims)?]
    } else {
        elements = runner.run_analysis(image_png, dims)?;
        let overlay = render_enhancement(&image, &elements, &cfg.style).map_err(|e| (Stage::Proposal, e.into()))?;
        let overlay_png = overlay.to_png();
        enhanced = Some(overlay);
        if elements.is_empty() && cfg.mode == PipelineMode::Hybrid {
            runner
                .warnings
                .push("analysis found no elements; proposal skipped, candidates come from the full frame".into());
            Vec::new()
        } else {
            let text = format_elements(&elements);
            runner.run_proposal(image_png, &overlay_png, &text, dims, cfg.proposal_includes_original)?
        }
    };

    let candidates = assemble_candidates(cfg.mode, &vlm_boxes, &elements, dims, &cfg.proposal, &mut runner.warnings)
        .map_err(|e| (Stage::Decision, e.into()))?;

    let (final_id, fallback, thumbnails) = if cfg.mode == PipelineMode::Baseline {
        (candidates.ids()[0], false, Vec::new())
    } else {
        let thumbs = render_decision_sheet(&image, &candidates, &cfg.style).map_err(|e| (Stage::Decision, e.into()))?;
        let shown: &[(CandidateId, RasterImage)] = match cfg.decision_view {
            DecisionView::Thumbnails => &thumbs,
            DecisionView::TextOnly => &[],
        };
        let (id, fb) = runner.run_decision(&candidates, shown)?;
        (id, fb, thumbs)
    };
    let final_crop = candidates.get(final_id).expect("decision returns an assigned id").bbox;

    let result = PipelineResult {
        image_sha256: sha256_hex(image_png),
        dims,
        mode: cfg.mode,
        elements,
        enhanced_sha256: enhanced.as_ref().map(|e: &RasterImage| sha256_hex(&e.to_png())),
        candidates,
        final_id,
        final_crop,
        fallback,
        transcripts: std::mem::take(&mut runner.transcripts),
        warnings: std::mem::take(&mut runner.warnings),
    };
    Ok(PipelineOutput {
        result,
        enhanced,
        thumbnails,
    })
}

/// Run many images with at most `workers` in flight. Results come back in
/// input order.
pub fn run_batch<I: AsRef<[u8]> + Sync>(
    images: &[I],
    backend: &dyn ChatBackend,
    cfg: &PipelineConfig,
    prompts: &PromptRegistry,
    workers: usize,
) -> Vec<Result<PipelineOutput, PipelineError>> {
    let workers = workers.clamp(1, images.len().max(1));
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<PipelineOutput, PipelineError>>> = (0..images.len()).map(|_| None).collect();
    let done: Vec<Vec<(usize, Result<PipelineOutput, PipelineError>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= images.len() {
                            break local;
                        }
                        local.push((i, run_pipeline(images[i].as_ref(), backend, cfg, prompts)));
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("pipeline worker panicked")).collect()
    });
    for (i, r) in done.into_iter().flatten() {
        slots[i] = Some(r);
    }
    slots.into_iter().map(|r| r.expect("every index is claimed once")).collect()
}
