//! Training corpus builders: composition-reasoning dialogues, decision-stage
//! SFT samples and DPO preference pairs, plus JSONL persistence.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::Role;
use crate::composition::{
    generate_candidates, CandidateId, CandidateSet, CompositionElement, CompositionError, CropCandidate,
    LabeledCandidate, ProposalConfig, Provenance,
};
use crate::geometry::{ImageDims, PixelBox};
use crate::parse::format_elements;
use crate::prompts::{candidate_listing, format_box_list, PromptRegistry};

/// Candidates per decision sample.
pub const DECISION_CANDIDATES: usize = 8;

/// Placeholder marking where an image enters a message.
pub const IMAGE_TOKEN: &str = "<image>";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("annotation has no composition elements")]
    EmptyElements,
    #[error("{found} scored crops, at least {needed} required")]
    InsufficientCrops { found: usize, needed: usize },
    #[error("every crop has the same MOS, so no preference can be formed")]
    NoPreferenceSignal,
    #[error("MOS {0} outside [1, 5]")]
    MosOutOfRange(f64),
    #[error("invalid strata: poor threshold {poor} must be below good threshold {good}")]
    InvalidStrata { good: f64, poor: f64 },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error(transparent)]
    Composition(#[from] CompositionError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// CADB-style record: an image with expert composition annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawAnnotated")]
pub struct AnnotatedImage {
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub elements: Vec<CompositionElement>,
}

#[derive(Deserialize)]
struct RawAnnotated {
    image: String,
    width: u32,
    height: u32,
    elements: Vec<CompositionElement>,
}

impl TryFrom<RawAnnotated> for AnnotatedImage {
    type Error = String;

    fn try_from(r: RawAnnotated) -> Result<Self, Self::Error> {
        let dims = ImageDims::new(r.width, r.height).map_err(|e| e.to_string())?;
        for e in &r.elements {
            e.check_within(dims).map_err(|err| format!("{} element: {err}", e.category))?;
        }
        Ok(Self {
            image: r.image,
            width: r.width,
            height: r.height,
            elements: r.elements,
        })
    }
}

impl AnnotatedImage {
    pub fn dims(&self) -> ImageDims {
        ImageDims::new(self.width, self.height).expect("validated on construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScored")]
pub struct ScoredCrop {
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub mos: f64,
}

#[derive(Deserialize)]
struct RawScored {
    #[serde(rename = "box")]
    bbox: PixelBox,
    mos: f64,
}

impl TryFrom<RawScored> for ScoredCrop {
    type Error = DatasetError;

    fn try_from(r: RawScored) -> Result<Self, Self::Error> {
        ScoredCrop::new(r.bbox, r.mos)
    }
}

impl ScoredCrop {
    pub fn new(bbox: PixelBox, mos: f64) -> Result<Self, DatasetError> {
        if !(1.0..=5.0).contains(&mos) {
            return Err(DatasetError::MosOutOfRange(mos));
        }
        Ok(Self { bbox, mos })
    }
}

/// Higher MOS first; equal MOS falls back to lexicographic box order.
pub fn rank_cmp(a: &ScoredCrop, b: &ScoredCrop) -> Ordering {
    b.mos.total_cmp(&a.mos).then_with(|| a.bbox.lex_cmp(&b.bbox))
}

/// GAICD-style record: an image with densely scored crops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScoredImage")]
pub struct ScoredImage {
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub crops: Vec<ScoredCrop>,
}

#[derive(Deserialize)]
struct RawScoredImage {
    image: String,
    width: u32,
    height: u32,
    crops: Vec<ScoredCrop>,
}

impl TryFrom<RawScoredImage> for ScoredImage {
    type Error = String;

    fn try_from(r: RawScoredImage) -> Result<Self, Self::Error> {
        let dims = ImageDims::new(r.width, r.height).map_err(|e| e.to_string())?;
        for c in &r.crops {
            dims.check_within(&c.bbox).map_err(|e| e.to_string())?;
        }
        Ok(Self {
            image: r.image,
            width: r.width,
            height: r.height,
            crops: r.crops,
        })
    }
}

impl ScoredImage {
    pub fn dims(&self) -> ImageDims {
        ImageDims::new(self.width, self.height).expect("validated on construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MosStrata {
    pub good_threshold: f64,
    pub poor_threshold: f64,
}

impl Default for MosStrata {
    fn default() -> Self {
        Self {
            good_threshold: 3.5,
            poor_threshold: 2.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    Good,
    Average,
    Poor,
}

impl MosStrata {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.poor_threshold < self.good_threshold {
            Ok(())
        } else {
            Err(DatasetError::InvalidStrata {
                good: self.good_threshold,
                poor: self.poor_threshold,
            })
        }
    }

    /// Good above the good threshold, poor below the poor threshold, average
    /// in between (both ends inclusive).
    pub fn classify(&self, mos: f64) -> Stratum {
        if mos > self.good_threshold {
            Stratum::Good
        } else if mos < self.poor_threshold {
            Stratum::Poor
        } else {
            Stratum::Average
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueMessage {
    pub role: Role,
    pub content: String,
}

impl DialogueMessage {
    fn user(content: String) -> Self {
        Self {
            role: Role::User,
            content,
        }
    }
}

/// One supervised dialogue: prompt-side messages and the target reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueSample {
    pub image: String,
    /// Composition-overlay image shown at the proposal stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enhanced_image: Option<String>,
    pub messages: Vec<DialogueMessage>,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<CandidateSet>,
    /// MOS per candidate, in ID order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_mos: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    Mos,
    HumanVote,
}

/// A chosen and a rejected decision reply over one shared candidate list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub image: String,
    pub prompt: String,
    pub candidates: CandidateSet,
    pub chosen: String,
    pub rejected: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mos_chosen: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mos_rejected: Option<f64>,
    pub source: PairSource,
}

impl PreferencePair {
    /// Both replies name distinct candidates of the shared list and, when
    /// scores are present, the chosen one scores strictly higher.
    pub fn validate(&self) -> Result<(), String> {
        let ids = self.candidates.ids();
        let lookup = |reply: &str| {
            let mut cs = reply.chars();
            match (cs.next().and_then(CandidateId::from_char), cs.next()) {
                (Some(id), None) if ids.contains(&id) => Ok(id),
                _ => Err(format!("reply {reply:?} is not a candidate ID")),
            }
        };
        let w = lookup(&self.chosen)?;
        let l = lookup(&self.rejected)?;
        if w == l {
            return Err("chosen and rejected name the same candidate".into());
        }
        match (self.mos_chosen, self.mos_rejected, self.source) {
            (Some(a), Some(b), _) if a > b => Ok(()),
            (Some(a), Some(b), _) => Err(format!("mos_chosen {a} is not above mos_rejected {b}")),
            (None, None, PairSource::HumanVote) => Ok(()),
            _ => Err("MOS fields must both be present for MOS-derived pairs".into()),
        }
    }
}

/// Analysis and proposal dialogues for one annotated image.
///
/// The proposal target is the rule-engine candidate list under `cfg`.
pub fn build_crp_samples(
    annotated: &AnnotatedImage,
    cfg: &ProposalConfig,
    prompts: &PromptRegistry,
) -> Result<(DialogueSample, DialogueSample), DatasetError> {
    if annotated.elements.is_empty() {
        return Err(DatasetError::EmptyElements);
    }
    let analysis_msg = DialogueMessage::user(format!("{IMAGE_TOKEN}\n{}", prompts.analysis));
    let elements_json = format_elements(&annotated.elements);
    let analysis = DialogueSample {
        image: annotated.image.clone(),
        enhanced_image: None,
        messages: vec![analysis_msg.clone()],
        target: elements_json.clone(),
        candidates: None,
        candidate_mos: None,
    };
    let set = generate_candidates(&annotated.elements, annotated.dims(), cfg)?;
    let proposal = DialogueSample {
        image: annotated.image.clone(),
        enhanced_image: Some(enhanced_name(&annotated.image)),
        messages: vec![
            analysis_msg,
            DialogueMessage {
                role: Role::Assistant,
                content: elements_json,
            },
            DialogueMessage::user(format!("{IMAGE_TOKEN}\n{}", prompts.proposal)),
        ],
        target: format_box_list(&set.boxes()),
        candidates: Some(set),
        candidate_mos: None,
    };
    Ok((analysis, proposal))
}

/// File name convention for a rendered composition overlay.
pub fn enhanced_name(image: &str) -> String {
    match image.rfind('.') {
        Some(dot) if !image[dot..].contains('/') => format!("{}.enhanced.png", &image[..dot]),
        _ => format!("{image}.enhanced.png"),
    }
}

/// Slots per stratum by largest remainder over availability counts.
/// Remainder ties go to the better stratum.
pub fn proportional_allocation(counts: [usize; 3], slots: usize) -> [usize; 3] {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return [0; 3];
    }
    let mut alloc = [0usize; 3];
    let mut rems = [(0usize, 0usize); 3];
    for i in 0..3 {
        let q = slots * counts[i];
        alloc[i] = q / total;
        rems[i] = (q % total, i);
    }
    let leftover = slots - alloc.iter().sum::<usize>();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rems.iter().take(leftover) {
        alloc[i] += 1;
    }
    alloc
}

fn stratum_index(s: Stratum) -> usize {
    match s {
        Stratum::Good => 0,
        Stratum::Average => 1,
        Stratum::Poor => 2,
    }
}

/// Pick `slots` crop indices spread over the strata in proportion to
/// availability, always keeping `forced`. Returned in shuffled order.
fn stratified_sample(
    crops: &[ScoredCrop],
    strata: &MosStrata,
    slots: usize,
    forced: &[usize],
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut members: [Vec<usize>; 3] = Default::default();
    for (i, c) in crops.iter().enumerate() {
        members[stratum_index(strata.classify(c.mos))].push(i);
    }
    let counts = [members[0].len(), members[1].len(), members[2].len()];
    let mut alloc = proportional_allocation(counts, slots);
    let total: usize = counts.iter().sum();
    let mut need = [0usize; 3];
    for &f in forced {
        need[stratum_index(strata.classify(crops[f].mos))] += 1;
    }
    // A forced crop's stratum may have been rounded down to fewer slots than
    // it needs. Take slots from strata with the most allocation above quota.
    for r in 0..3 {
        while alloc[r] < need[r] {
            let donor = (0..3)
                .filter(|&d| d != r && alloc[d] > need[d])
                .max_by(|&a, &b| {
                    let sa = (alloc[a] * total) as i64 - (slots * counts[a]) as i64;
                    let sb = (alloc[b] * total) as i64 - (slots * counts[b]) as i64;
                    sa.cmp(&sb).then(b.cmp(&a))
                })
                .expect("forced crops never exceed the slot count");
            alloc[donor] -= 1;
            alloc[r] += 1;
        }
    }
    let mut picked = Vec::with_capacity(slots);
    for s in 0..3 {
        let mut pool: Vec<usize> = members[s].iter().copied().filter(|i| !forced.contains(i)).collect();
        pool.shuffle(rng);
        picked.extend(forced.iter().copied().filter(|&f| members[s].contains(&f)));
        let room = alloc[s] - picked.iter().filter(|&&i| members[s].contains(&i)).count();
        picked.extend(pool.into_iter().take(room));
    }
    picked.shuffle(rng);
    picked
}

fn best_index(crops: &[ScoredCrop]) -> usize {
    (0..crops.len())
        .min_by(|&a, &b| rank_cmp(&crops[a], &crops[b]))
        .expect("nonempty crop list")
}

fn labeled_set(crops: &[ScoredCrop], order: &[usize]) -> CandidateSet {
    CandidateSet::from_candidates(
        order
            .iter()
            .map(|&i| CropCandidate::new(crops[i].bbox, Provenance::Annotated))
            .collect(),
    )
    .expect("at most eight candidates")
}

/// Decision prompt with the candidate listing, as used for inference.
pub fn decision_prompt(prompts: &PromptRegistry, set: &CandidateSet) -> String {
    format!("{IMAGE_TOKEN}\n{}\n{}", prompts.decision, candidate_listing(set))
}

/// One decision-stage dialogue: eight stratified candidates and the letter
/// of the highest-MOS one as target.
pub fn build_sft_decision(
    image: &ScoredImage,
    strata: &MosStrata,
    seed: u64,
    prompts: &PromptRegistry,
) -> Result<DialogueSample, DatasetError> {
    strata.validate()?;
    let crops = &image.crops;
    if crops.len() < DECISION_CANDIDATES {
        return Err(DatasetError::InsufficientCrops {
            found: crops.len(),
            needed: DECISION_CANDIDATES,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let best = best_index(crops);
    let order = stratified_sample(crops, strata, DECISION_CANDIDATES, &[best], &mut rng);
    let set = labeled_set(crops, &order);
    let target_pos = order.iter().position(|&i| i == best).expect("best is forced in");
    Ok(DialogueSample {
        image: image.image.clone(),
        enhanced_image: None,
        messages: vec![DialogueMessage::user(decision_prompt(prompts, &set))],
        target: CandidateId::from_index(target_pos).expect("within eight").to_string(),
        candidate_mos: Some(order.iter().map(|&i| crops[i].mos).collect()),
        candidates: Some(set),
    })
}

/// Width of the suboptimal band below the maximum MOS.
pub const SUBOPTIMAL_BAND: f64 = 0.5;

/// `k` chosen/rejected pairs over one shared candidate list.
///
/// The chosen reply is the top candidate. At least `ceil(k/4)` rejected
/// replies come from the suboptimal band when it is non-empty, and rejected
/// candidates are cycled when `k` exceeds the pool.
pub fn build_dpo_pairs(
    image: &ScoredImage,
    strata: &MosStrata,
    k: usize,
    seed: u64,
    prompts: &PromptRegistry,
) -> Result<Vec<PreferencePair>, DatasetError> {
    strata.validate()?;
    let crops = &image.crops;
    let best = if crops.is_empty() {
        return Err(DatasetError::NoPreferenceSignal);
    } else {
        best_index(crops)
    };
    let top = crops[best].mos;
    if crops.iter().all(|c| c.mos == top) {
        return Err(DatasetError::NoPreferenceSignal);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Best strictly-lower crop, forced in when it falls in the band.
    let runner_up = (0..crops.len())
        .filter(|&i| crops[i].mos < top)
        .min_by(|&a, &b| rank_cmp(&crops[a], &crops[b]))
        .expect("some crop scores lower");
    let mut forced = vec![best];
    if crops[runner_up].mos >= top - SUBOPTIMAL_BAND {
        forced.push(runner_up);
    }
    let slots = crops.len().min(DECISION_CANDIDATES);
    let order = stratified_sample(crops, strata, slots, &forced, &mut rng);
    let set = labeled_set(crops, &order);
    let prompt = decision_prompt(prompts, &set);
    let id_of = |pos: usize| CandidateId::from_index(pos).expect("within eight").to_string();
    let chosen_pos = order.iter().position(|&i| i == best).expect("best is forced in");

    let (mut band, mut rest): (Vec<usize>, Vec<usize>) = (0..order.len())
        .filter(|&p| crops[order[p]].mos < top)
        .partition(|&p| crops[order[p]].mos >= top - SUBOPTIMAL_BAND);
    band.shuffle(&mut rng);
    rest.shuffle(&mut rng);
    let n_band = match (band.is_empty(), rest.is_empty()) {
        (true, _) => 0,
        (false, true) => k,
        (false, false) => k.div_ceil(4),
    };
    let mut rejected: Vec<usize> = band.iter().cycle().take(n_band).copied().collect();
    rejected.extend(rest.iter().cycle().take(k - n_band));
    rejected.shuffle(&mut rng);

    Ok(rejected
        .into_iter()
        .map(|pos| PreferencePair {
            image: image.image.clone(),
            prompt: prompt.clone(),
            candidates: set.clone(),
            chosen: id_of(chosen_pos),
            rejected: id_of(pos),
            mos_chosen: Some(top),
            mos_rejected: Some(crops[order[pos]].mos),
            source: PairSource::Mos,
        })
        .collect())
}

/// Candidates of a decision sample, keyed back to their scores.
pub fn sample_candidates(sample: &DialogueSample) -> Vec<(LabeledCandidate, f64)> {
    match (&sample.candidates, &sample.candidate_mos) {
        (Some(set), Some(mos)) => set.iter().copied().zip(mos.iter().copied()).collect(),
        _ => Vec::new(),
    }
}

// ---------------------------------------------------------------------------
// JSONL

pub fn write_jsonl_to<T: Serialize>(mut w: impl Write, records: &[T]) -> Result<(), DatasetError> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DatasetError> {
    write_jsonl_to(BufWriter::new(File::create(path)?), records)
}

/// Parse one record per non-blank line; errors carry 1-based line numbers.
pub fn read_jsonl_from<T: DeserializeOwned>(r: impl BufRead) -> Result<Vec<T>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DatasetError::Schema {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    read_jsonl_from(BufReader::new(File::open(path)?))
}
