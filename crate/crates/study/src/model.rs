//! Study items, votes and their aggregation.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use crop_core::composition::{CandidateId, CandidateSet, CropCandidate, Provenance};
use crop_core::dataset::{decision_prompt, PairSource, PreferencePair};
use crop_core::geometry::PixelBox;
use crop_core::prompts::PromptRegistry;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("image {image} has no output for method {method}")]
    MissingMethodOutput { image: String, method: String },
    #[error("pair compares {0} with itself")]
    SelfPair(String),
    #[error("duplicate image id {0}")]
    DuplicateImage(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("image {image} has no crop box for method {method}")]
    MissingCropBox { image: String, method: String },
    #[error("{path}: {message}")]
    Log { path: PathBuf, message: String },
    #[error("study spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn as_str(&self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

/// Two methods compared head to head. Rates are reported in this order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MethodPair {
    pub a: String,
    pub b: String,
}

impl MethodPair {
    pub fn new(a: impl Into<String>, b: impl Into<String>) -> Self {
        Self { a: a.into(), b: b.into() }
    }
}

/// One method's crop of an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropOutput {
    /// PNG of the cropped image.
    pub png: PathBuf,
    /// Crop box in source-image pixels; needed only for preference export.
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<PixelBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyImage {
    pub image_id: String,
    /// Keyed by method label.
    pub outputs: BTreeMap<String, CropOutput>,
}

/// Study definition file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySpec {
    #[serde(default)]
    pub seed: u64,
    pub pairs: Vec<MethodPair>,
    pub images: Vec<StudyImage>,
}

impl StudySpec {
    /// Read a study definition file. Relative PNG paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, StudyError> {
        let text = std::fs::read_to_string(path)?;
        let mut spec: StudySpec = serde_json::from_str(&text).map_err(|e| StudyError::Spec(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for img in &mut spec.images {
            for out in img.outputs.values_mut() {
                if out.png.is_relative() {
                    out.png = base.join(&out.png);
                }
            }
        }
        Ok(spec)
    }

    pub fn items(&self) -> Result<Vec<StudyItem>, StudyError> {
        create_study(&self.images, &self.pairs, self.seed)
    }
}

/// A pairwise comparison. Method labels and file paths stay on the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyItem {
    pub item_id: String,
    pub image_id: String,
    pub pair: MethodPair,
    pub left_method: String,
    pub right_method: String,
    pub left_png: PathBuf,
    pub right_png: PathBuf,
}

impl StudyItem {
    pub fn method_on(&self, side: Side) -> &str {
        match side {
            Side::Left => &self.left_method,
            Side::Right => &self.right_method,
        }
    }

    pub fn png_on(&self, side: Side) -> &Path {
        match side {
            Side::Left => &self.left_png,
            Side::Right => &self.right_png,
        }
    }
}

fn opaque_id(seed: u64, image: &str, pair: &MethodPair) -> String {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for part in [image, &pair.a, &pair.b] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    let digest = h.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// One item per (image, pair), in image-major order.
///
/// Within each pair exactly half of the items (rounded by a coin flip when
/// odd) show method `a` on the left, shuffled by `seed`.
pub fn create_study(images: &[StudyImage], pairs: &[MethodPair], seed: u64) -> Result<Vec<StudyItem>, StudyError> {
    let mut seen = HashSet::new();
    for img in images {
        if !seen.insert(&img.image_id) {
            return Err(StudyError::DuplicateImage(img.image_id.clone()));
        }
        for p in pairs {
            if p.a == p.b {
                return Err(StudyError::SelfPair(p.a.clone()));
            }
            for m in [&p.a, &p.b] {
                if !img.outputs.contains_key(m) {
                    return Err(StudyError::MissingMethodOutput {
                        image: img.image_id.clone(),
                        method: m.clone(),
                    });
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = images.len();
    let mut a_left: Vec<Vec<bool>> = Vec::with_capacity(pairs.len());
    for _ in pairs {
        let mut flags: Vec<bool> = (0..n).map(|i| i < n / 2).collect();
        if n % 2 == 1 {
            flags[n - 1] = rand::Rng::random_bool(&mut rng, 0.5);
        }
        flags.shuffle(&mut rng);
        a_left.push(flags);
    }
    let mut items = Vec::with_capacity(n * pairs.len());
    for (i, img) in images.iter().enumerate() {
        for (pi, p) in pairs.iter().enumerate() {
            let (l, r) = if a_left[pi][i] { (&p.a, &p.b) } else { (&p.b, &p.a) };
            items.push(StudyItem {
                item_id: opaque_id(seed, &img.image_id, p),
                image_id: img.image_id.clone(),
                pair: p.clone(),
                left_method: l.clone(),
                right_method: r.clone(),
                left_png: img.outputs[l].png.clone(),
                right_png: img.outputs[r].png.clone(),
            });
        }
    }
    Ok(items)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    /// UTC seconds.
    pub ts: u64,
    pub session: String,
    pub item_id: String,
    pub choice: Side,
}

/// Votes with a repeated (session, item) key removed, first one kept.
pub fn distinct_votes(votes: &[Vote]) -> Vec<&Vote> {
    let mut seen = HashSet::new();
    votes
        .iter()
        .filter(|v| seen.insert((v.session.as_str(), v.item_id.as_str())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub method_a: String,
    pub method_b: String,
    pub votes_a: u64,
    pub votes_b: u64,
    pub total: u64,
    /// Percentages; both zero when the pair has no votes.
    pub preference_rate_a: f64,
    pub preference_rate_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub pairs: Vec<PairResult>,
    pub total_votes: u64,
}

/// Per-pair preference rates, pairs in order of first appearance in `items`.
/// Votes for unknown items are ignored.
pub fn aggregate_results(votes: &[Vote], items: &[StudyItem]) -> StudyResult {
    let mut order: Vec<MethodPair> = Vec::new();
    for it in items {
        if !order.contains(&it.pair) {
            order.push(it.pair.clone());
        }
    }
    let by_id: BTreeMap<&str, &StudyItem> = items.iter().map(|i| (i.item_id.as_str(), i)).collect();
    let mut counts = vec![(0u64, 0u64); order.len()];
    let mut total = 0;
    for v in distinct_votes(votes) {
        let Some(item) = by_id.get(v.item_id.as_str()) else {
            continue;
        };
        let k = order.iter().position(|p| *p == item.pair).expect("collected above");
        if item.method_on(v.choice) == item.pair.a {
            counts[k].0 += 1;
        } else {
            counts[k].1 += 1;
        }
        total += 1;
    }
    let pairs = order
        .into_iter()
        .zip(counts)
        .map(|(p, (a, b))| {
            let t = a + b;
            let rate = |x: u64| if t == 0 { 0.0 } else { 100.0 * x as f64 / t as f64 };
            PairResult {
                method_a: p.a,
                method_b: p.b,
                votes_a: a,
                votes_b: b,
                total: t,
                preference_rate_a: rate(a),
                preference_rate_b: rate(b),
            }
        })
        .collect();
    StudyResult {
        pairs,
        total_votes: total,
    }
}

/// One preference pair per distinct vote: candidate `A` is the left crop,
/// `B` the right one, and the preferred side is the chosen reply.
pub fn export_votes_to_dpo(
    votes: &[Vote],
    items: &[StudyItem],
    images: &[StudyImage],
    prompts: &PromptRegistry,
) -> Result<Vec<PreferencePair>, StudyError> {
    let by_id: BTreeMap<&str, &StudyItem> = items.iter().map(|i| (i.item_id.as_str(), i)).collect();
    let by_image: BTreeMap<&str, &StudyImage> = images.iter().map(|i| (i.image_id.as_str(), i)).collect();
    let crop_box = |image: &str, method: &str| {
        by_image
            .get(image)
            .and_then(|img| img.outputs.get(method))
            .and_then(|o| o.bbox)
            .ok_or_else(|| StudyError::MissingCropBox {
                image: image.to_string(),
                method: method.to_string(),
            })
    };
    let mut out = Vec::new();
    for v in distinct_votes(votes) {
        let item = by_id
            .get(v.item_id.as_str())
            .ok_or_else(|| StudyError::UnknownItem(v.item_id.clone()))?;
        let left = crop_box(&item.image_id, &item.left_method)?;
        let right = crop_box(&item.image_id, &item.right_method)?;
        let set = CandidateSet::from_candidates(vec![
            CropCandidate::new(left, Provenance::Annotated),
            CropCandidate::new(right, Provenance::Annotated),
        ])
        .expect("two candidates");
        let (a, b) = (CandidateId::from_index(0).unwrap(), CandidateId::from_index(1).unwrap());
        let (chosen, rejected) = match v.choice {
            Side::Left => (a, b),
            Side::Right => (b, a),
        };
        out.push(PreferencePair {
            image: item.image_id.clone(),
            prompt: decision_prompt(prompts, &set),
            candidates: set,
            chosen: chosen.to_string(),
            rejected: rejected.to_string(),
            mos_chosen: None,
            mos_rejected: None,
            source: PairSource::HumanVote,
        });
    }
    Ok(out)
}
