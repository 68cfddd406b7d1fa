//! Rule-grounded crop proposals from compositional elements.
//!
//! Placement elements (thirds, golden ratio, center) pin the subject to an
//! anchor fraction of the crop; layout elements must be wholly contained by
//! the crop. Rule crops are padded to a fixed count with seeded jitter and
//! labeled with letter IDs for the decision stage.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::geometry::{iou, GeometryError, ImageDims, PixelBox};

/// Letter IDs run `A..=Z`.
pub const MAX_CANDIDATES: usize = 26;

const THIRDS: [(f64, f64); 4] = [
    (1.0 / 3.0, 1.0 / 3.0),
    (2.0 / 3.0, 1.0 / 3.0),
    (1.0 / 3.0, 2.0 / 3.0),
    (2.0 / 3.0, 2.0 / 3.0),
];
const GOLDEN: [(f64, f64); 4] = [(0.382, 0.382), (0.618, 0.382), (0.382, 0.618), (0.618, 0.618)];
const CENTER: [(f64, f64); 1] = [(0.5, 0.5)];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CompositionError {
    #[error("no feasible crop for {0} element")]
    NoFeasibleCrop(ElementCategory),
    #[error("{category} is a {actual:?} element, expected {expected:?}")]
    WrongRuleKind {
        category: ElementCategory,
        expected: RuleKind,
        actual: RuleKind,
    },
    #[error("element has no boxes")]
    EmptyElement,
    #[error("invalid proposal config: {0}")]
    InvalidConfig(String),
    #[error("{0} candidates exceed the letter-ID limit of {MAX_CANDIDATES}")]
    TooManyCandidates(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementCategory {
    RuleOfThirds,
    Center,
    GoldenRatio,
    Horizontal,
    Symmetric,
    Diagonal,
    Curved,
    Vertical,
    Triangle,
    VanishingPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RuleKind {
    Placement,
    Layout,
}

impl ElementCategory {
    pub const ALL: [ElementCategory; 10] = [
        ElementCategory::RuleOfThirds,
        ElementCategory::Center,
        ElementCategory::GoldenRatio,
        ElementCategory::Horizontal,
        ElementCategory::Symmetric,
        ElementCategory::Diagonal,
        ElementCategory::Curved,
        ElementCategory::Vertical,
        ElementCategory::Triangle,
        ElementCategory::VanishingPoint,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ElementCategory::RuleOfThirds => "rule_of_thirds",
            ElementCategory::Center => "center",
            ElementCategory::GoldenRatio => "golden_ratio",
            ElementCategory::Horizontal => "horizontal",
            ElementCategory::Symmetric => "symmetric",
            ElementCategory::Diagonal => "diagonal",
            ElementCategory::Curved => "curved",
            ElementCategory::Vertical => "vertical",
            ElementCategory::Triangle => "triangle",
            ElementCategory::VanishingPoint => "vanishing_point",
        }
    }

    /// Lenient label lookup for model output: case, spaces and hyphens are
    /// normalized, so "Rule of Thirds" and "vanishing-point" both resolve.
    pub fn from_label(label: &str) -> Option<Self> {
        let norm: String = label
            .trim()
            .chars()
            .map(|c| match c {
                ' ' | '-' => '_',
                c => c.to_ascii_lowercase(),
            })
            .collect();
        Self::ALL.into_iter().find(|c| c.as_str() == norm)
    }

    pub fn rule_kind(&self) -> RuleKind {
        match self {
            ElementCategory::RuleOfThirds | ElementCategory::Center | ElementCategory::GoldenRatio => {
                RuleKind::Placement
            }
            _ => RuleKind::Layout,
        }
    }

    /// Anchor fractions `(fx, fy)` for placement categories; empty for layout.
    pub fn anchors(&self) -> &'static [(f64, f64)] {
        match self {
            ElementCategory::RuleOfThirds => &THIRDS,
            ElementCategory::GoldenRatio => &GOLDEN,
            ElementCategory::Center => &CENTER,
            _ => &[],
        }
    }
}

pub fn rule_kind(category: ElementCategory) -> RuleKind {
    category.rule_kind()
}

impl fmt::Display for ElementCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One annotated compositional element: a category and one or more boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawElement")]
pub struct CompositionElement {
    pub category: ElementCategory,
    boxes: Vec<PixelBox>,
}

#[derive(Deserialize)]
struct RawElement {
    category: ElementCategory,
    boxes: Vec<PixelBox>,
}

impl TryFrom<RawElement> for CompositionElement {
    type Error = CompositionError;

    fn try_from(raw: RawElement) -> Result<Self, Self::Error> {
        CompositionElement::new(raw.category, raw.boxes)
    }
}

impl CompositionElement {
    pub fn new(category: ElementCategory, boxes: Vec<PixelBox>) -> Result<Self, CompositionError> {
        if boxes.is_empty() {
            return Err(CompositionError::EmptyElement);
        }
        Ok(Self { category, boxes })
    }

    pub fn single(category: ElementCategory, b: PixelBox) -> Self {
        Self {
            category,
            boxes: vec![b],
        }
    }

    pub fn boxes(&self) -> &[PixelBox] {
        &self.boxes
    }

    pub fn union(&self) -> PixelBox {
        self.boxes[1..].iter().fold(self.boxes[0], |acc, b| acc.union(b))
    }

    pub fn check_within(&self, dims: ImageDims) -> Result<(), GeometryError> {
        self.boxes.iter().try_for_each(|b| dims.check_within(b))
    }
}

/// Which rule produced a candidate crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Rule(ElementCategory),
    Combined,
    Perturbation,
    /// The frame itself, seeding padding when no rule crop exists.
    FullFrame,
    /// Proposed by the vision-language model.
    Vlm,
    /// Taken from a scored-crop annotation set.
    Annotated,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Rule(c) => c.as_str(),
            Provenance::Combined => "combined",
            Provenance::Perturbation => "perturbation",
            Provenance::FullFrame => "full_frame",
            Provenance::Vlm => "vlm",
            Provenance::Annotated => "annotated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "combined" => Some(Provenance::Combined),
            "perturbation" => Some(Provenance::Perturbation),
            "full_frame" => Some(Provenance::FullFrame),
            "vlm" => Some(Provenance::Vlm),
            "annotated" => Some(Provenance::Annotated),
            other => ElementCategory::ALL
                .into_iter()
                .find(|c| c.as_str() == other)
                .map(Provenance::Rule),
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Provenance {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Provenance {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Provenance::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown provenance {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropCandidate {
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<[f64; 2]>,
}

impl CropCandidate {
    pub fn new(bbox: PixelBox, provenance: Provenance) -> Self {
        Self {
            bbox,
            provenance,
            anchor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    pub target_count: usize,
    /// Inclusive `[min, max]` range of width / height.
    pub aspect_bounds: [f64; 2],
    /// Margin around layout elements, as a fraction of the element's longer side.
    pub layout_margin: f64,
    pub jitter_scale: f64,
    pub jitter_shift: f64,
    pub rng_seed: u64,
    pub dedupe_iou: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            target_count: 8,
            aspect_bounds: [0.5, 2.0],
            layout_margin: 0.05,
            jitter_scale: 0.10,
            jitter_shift: 0.05,
            rng_seed: 0,
            dedupe_iou: 0.95,
        }
    }
}

impl ProposalConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            rng_seed: seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), CompositionError> {
        let bad = |m: &str| Err(CompositionError::InvalidConfig(m.to_string()));
        if self.target_count == 0 || self.target_count > MAX_CANDIDATES {
            return bad("target_count must be in 1..=26");
        }
        let [lo, hi] = self.aspect_bounds;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("aspect_bounds must be positive and ordered");
        }
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.layout_margin) || !unit(self.jitter_scale) || !unit(self.jitter_shift) {
            return bad("layout_margin, jitter_scale and jitter_shift must lie in (0, 1)");
        }
        if !(self.dedupe_iou > 0.0 && self.dedupe_iou <= 1.0) {
            return bad("dedupe_iou must lie in (0, 1]");
        }
        Ok(())
    }

    fn aspect_ok(&self, b: &PixelBox) -> bool {
        let a = b.aspect();
        a >= self.aspect_bounds[0] * (1.0 - 1e-12) && a <= self.aspect_bounds[1] * (1.0 + 1e-12)
    }
}

// ---------------------------------------------------------------------------
// Constraint solver

/// Per-axis constraints: the crop must cover `contain` and stay inside
/// `[0, frame]`; with an anchor `(point, fraction)` the point must sit at
/// that fraction of the crop extent.
#[derive(Debug, Clone, Copy)]
struct Axis {
    frame: f64,
    contain: (f64, f64),
    anchor: Option<(f64, f64)>,
}

const SOLVE_EPS: f64 = 1e-9;

impl Axis {
    fn extent_range(&self) -> Option<(f64, f64)> {
        let (r1, r2) = self.contain;
        let (lo, hi) = match self.anchor {
            None => (r2 - r1, self.frame),
            Some((p, f)) => (
                ((p - r1) / f).max((r2 - p) / (1.0 - f)).max(0.0),
                (p / f).min((self.frame - p) / (1.0 - f)),
            ),
        };
        let tol = SOLVE_EPS * self.frame.max(1.0);
        if hi <= 0.0 || lo > hi + tol {
            None
        } else {
            Some((lo.min(hi), hi))
        }
    }

    fn place(&self, extent: f64) -> (f64, f64) {
        match self.anchor {
            Some((p, f)) => {
                let start = p - f * extent;
                (start, start + extent)
            }
            None => {
                let mid = (self.contain.0 + self.contain.1) / 2.0;
                let start = (mid - extent / 2.0).clamp(0.0, (self.frame - extent).max(0.0));
                (start, start + extent)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Objective {
    MaxArea,
    MinArea,
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-7 {
        r
    } else {
        v
    }
}

fn fit(x: Axis, y: Axis, aspect: [f64; 2], objective: Objective) -> Option<PixelBox> {
    let (wlo, whi) = x.extent_range()?;
    let (hlo, hhi) = y.extent_range()?;
    let [amin, amax] = aspect;
    let tol = SOLVE_EPS * x.frame.max(y.frame).max(1.0);
    let (w, h) = match objective {
        Objective::MaxArea => {
            let (mut w, mut h) = (whi, hhi);
            if w > amax * h {
                w = amax * h;
                if w < wlo - tol {
                    return None;
                }
            } else if w < amin * h {
                h = w / amin;
                if h < hlo - tol {
                    return None;
                }
            }
            (w, h)
        }
        Objective::MinArea => {
            let (mut w, mut h) = (wlo, hlo);
            if w > amax * h {
                h = w / amax;
                if h > hhi + tol {
                    return None;
                }
            } else if w < amin * h {
                w = amin * h;
                if w > whi + tol {
                    return None;
                }
            }
            (w, h)
        }
    };
    if w <= 0.0 || h <= 0.0 {
        return None;
    }
    let (x1, x2) = x.place(w);
    let (y1, y2) = y.place(h);
    // Snap float noise, then restore exact containment and frame bounds.
    let fix = |a: f64, b: f64, axis: &Axis| {
        let a = snap(a).min(axis.contain.0).max(0.0);
        let b = snap(b).max(axis.contain.1).min(axis.frame);
        (a, b)
    };
    let (x1, x2) = fix(x1, x2, &x);
    let (y1, y2) = fix(y1, y2, &y);
    PixelBox::new(x1, y1, x2, y2).ok()
}

fn free_axis(frame: f64, r1: f64, r2: f64) -> Axis {
    Axis {
        frame,
        contain: (r1, r2),
        anchor: None,
    }
}

/// Largest crop within aspect bounds, centered in the frame. Equals the full
/// frame whenever the image aspect is itself in bounds.
pub fn largest_frame_crop(dims: ImageDims, cfg: &ProposalConfig) -> PixelBox {
    let w = f64::from(dims.width());
    let h = f64::from(dims.height());
    fit(
        free_axis(w, w / 2.0, w / 2.0),
        free_axis(h, h / 2.0, h / 2.0),
        cfg.aspect_bounds,
        Objective::MaxArea,
    )
    .unwrap_or_else(|| dims.full_frame())
}

/// Union of the element's boxes grown by `layout_margin` times its longer
/// side on every edge, clipped to the frame.
pub fn expanded_union(element: &CompositionElement, dims: ImageDims, cfg: &ProposalConfig) -> PixelBox {
    let u = element.union();
    let m = cfg.layout_margin * u.width().max(u.height());
    let w = f64::from(dims.width());
    let h = f64::from(dims.height());
    PixelBox::new(
        (u.x1() - m).max(0.0),
        (u.y1() - m).max(0.0),
        (u.x2() + m).min(w),
        (u.y2() + m).min(h),
    )
    .unwrap_or(u)
}

fn expect_kind(element: &CompositionElement, expected: RuleKind) -> Result<(), CompositionError> {
    let actual = element.category.rule_kind();
    if actual != expected {
        return Err(CompositionError::WrongRuleKind {
            category: element.category,
            expected,
            actual,
        });
    }
    Ok(())
}

/// Maximum-area crops that put each subject box center at each anchor of the
/// element's category. Infeasible anchors are skipped.
pub fn propose_placement(
    element: &CompositionElement,
    dims: ImageDims,
    cfg: &ProposalConfig,
) -> Result<Vec<CropCandidate>, CompositionError> {
    expect_kind(element, RuleKind::Placement)?;
    element.check_within(dims)?;
    let w = f64::from(dims.width());
    let h = f64::from(dims.height());
    let mut out = Vec::new();
    for subject in element.boxes() {
        let (cx, cy) = subject.center();
        for &(fx, fy) in element.category.anchors() {
            let x = Axis {
                frame: w,
                contain: (subject.x1(), subject.x2()),
                anchor: Some((cx, fx)),
            };
            let y = Axis {
                frame: h,
                contain: (subject.y1(), subject.y2()),
                anchor: Some((cy, fy)),
            };
            if let Some(b) = fit(x, y, cfg.aspect_bounds, Objective::MaxArea) {
                out.push(CropCandidate {
                    bbox: b,
                    provenance: Provenance::Rule(element.category),
                    anchor: Some([fx, fy]),
                });
            }
        }
    }
    if out.is_empty() {
        return Err(CompositionError::NoFeasibleCrop(element.category));
    }
    Ok(out)
}

/// Crops containing the margin-expanded element union: the tightest and the
/// widest such crop, plus category-specific variants.
pub fn propose_layout(
    element: &CompositionElement,
    dims: ImageDims,
    cfg: &ProposalConfig,
) -> Result<Vec<CropCandidate>, CompositionError> {
    expect_kind(element, RuleKind::Layout)?;
    element.check_within(dims)?;
    let w = f64::from(dims.width());
    let h = f64::from(dims.height());
    let region = expanded_union(element, dims, cfg);
    let u = element.union();
    let (ux, uy) = u.center();
    let base_y = free_axis(h, region.y1(), region.y2());
    let mut x = free_axis(w, region.x1(), region.x2());
    if element.category == ElementCategory::Symmetric {
        x.anchor = Some((ux, 0.5));
    }

    let mut boxes: Vec<(PixelBox, Option<[f64; 2]>)> = Vec::new();
    for objective in [Objective::MinArea, Objective::MaxArea] {
        let Some(mut b) = fit(x, base_y, cfg.aspect_bounds, objective) else {
            continue;
        };
        if element.category == ElementCategory::VanishingPoint {
            if let Some(adjusted) = keep_point_central(b, (ux, uy), x, base_y, cfg, objective) {
                b = adjusted;
            }
        }
        boxes.push((b, None));
    }
    if element.category == ElementCategory::Horizontal {
        for f in [1.0 / 3.0, 2.0 / 3.0] {
            let y = Axis {
                anchor: Some((uy, f)),
                ..base_y
            };
            if let Some(b) = fit(x, y, cfg.aspect_bounds, Objective::MaxArea) {
                boxes.push((b, Some([0.5, f])));
            }
        }
    }

    let mut out: Vec<CropCandidate> = Vec::new();
    for (b, anchor) in boxes {
        if out.iter().any(|c| iou(&c.bbox, &b) > 1.0 - 1e-9) {
            continue;
        }
        out.push(CropCandidate {
            bbox: b,
            provenance: Provenance::Rule(element.category),
            anchor,
        });
    }
    if out.is_empty() {
        return Err(CompositionError::NoFeasibleCrop(element.category));
    }
    Ok(out)
}

/// Re-solve so the vanishing point lies in the middle 80% of the crop.
fn keep_point_central(
    b: PixelBox,
    point: (f64, f64),
    x: Axis,
    y: Axis,
    cfg: &ProposalConfig,
    objective: Objective,
) -> Option<PixelBox> {
    let fx = (point.0 - b.x1()) / b.width();
    let fy = (point.1 - b.y1()) / b.height();
    let inside = |f: f64| (0.1..=0.9).contains(&f);
    if inside(fx) && inside(fy) {
        return None;
    }
    let mut x = x;
    let mut y = y;
    if !inside(fx) {
        x.anchor = Some((point.0, fx.clamp(0.1, 0.9)));
    }
    if !inside(fy) {
        y.anchor = Some((point.1, fy.clamp(0.1, 0.9)));
    }
    fit(x, y, cfg.aspect_bounds, objective)
}

/// One crop honoring both a placement anchor and a layout containment.
///
/// Anchors are tried nearest-first relative to where the subject already
/// sits in the frame; `None` when no anchor admits the containment. The
/// tightest such crop is returned: the largest one would coincide with the
/// placement crop for the same anchor whenever that crop already contains
/// the layout region.
pub fn propose_combined(
    placement: &CompositionElement,
    layout: &CompositionElement,
    dims: ImageDims,
    cfg: &ProposalConfig,
) -> Result<Option<CropCandidate>, CompositionError> {
    expect_kind(placement, RuleKind::Placement)?;
    expect_kind(layout, RuleKind::Layout)?;
    placement.check_within(dims)?;
    layout.check_within(dims)?;
    let w = f64::from(dims.width());
    let h = f64::from(dims.height());
    let subject = placement.boxes()[0];
    let (cx, cy) = subject.center();
    let region = expanded_union(layout, dims, cfg).union(&subject);

    let mut anchors: Vec<(f64, f64)> = placement.category.anchors().to_vec();
    let here = (cx / w, cy / h);
    anchors.sort_by(|a, b| {
        let da = (a.0 - here.0).powi(2) + (a.1 - here.1).powi(2);
        let db = (b.0 - here.0).powi(2) + (b.1 - here.1).powi(2);
        da.total_cmp(&db)
    });
    for (fx, fy) in anchors {
        let x = Axis {
            frame: w,
            contain: (region.x1(), region.x2()),
            anchor: Some((cx, fx)),
        };
        let y = Axis {
            frame: h,
            contain: (region.y1(), region.y2()),
            anchor: Some((cy, fy)),
        };
        if let Some(b) = fit(x, y, cfg.aspect_bounds, Objective::MinArea) {
            return Ok(Some(CropCandidate {
                bbox: b,
                provenance: Provenance::Combined,
                anchor: Some([fx, fy]),
            }));
        }
    }
    Ok(None)
}

/// Every rule crop for the elements, in emission order: placement, layout,
/// then combined (each placement element against each layout element).
pub fn rule_seeds(
    elements: &[CompositionElement],
    dims: ImageDims,
    cfg: &ProposalConfig,
) -> Result<Vec<CropCandidate>, CompositionError> {
    cfg.validate()?;
    for e in elements {
        e.check_within(dims)?;
    }
    let (placement, layout): (Vec<&CompositionElement>, Vec<&CompositionElement>) = elements
        .iter()
        .partition(|e| e.category.rule_kind() == RuleKind::Placement);
    let mut out = Vec::new();
    for e in &placement {
        match propose_placement(e, dims, cfg) {
            Ok(c) => out.extend(c),
            Err(CompositionError::NoFeasibleCrop(_)) => {}
            Err(e) => return Err(e),
        }
    }
    for e in &layout {
        match propose_layout(e, dims, cfg) {
            Ok(c) => out.extend(c),
            Err(CompositionError::NoFeasibleCrop(_)) => {}
            Err(e) => return Err(e),
        }
    }
    for p in &placement {
        for l in &layout {
            if let Some(c) = propose_combined(p, l, dims, cfg)? {
                out.push(c);
            }
        }
    }
    Ok(out)
}

/// Drop later candidates overlapping an earlier one above `threshold`.
pub fn dedupe(candidates: Vec<CropCandidate>, threshold: f64) -> Vec<CropCandidate> {
    let mut kept: Vec<CropCandidate> = Vec::with_capacity(candidates.len());
    for c in candidates {
        if kept.iter().all(|k| iou(&k.bbox, &c.bbox) <= threshold) {
            kept.push(c);
        }
    }
    kept
}

/// Keep `count` candidates, taking round-robin across provenance groups so
/// every rule present keeps at least one crop. Emission order is preserved.
fn select_round_robin(candidates: Vec<CropCandidate>, count: usize) -> Vec<CropCandidate> {
    let mut groups: Vec<(Provenance, Vec<usize>)> = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        match groups.iter_mut().find(|(p, _)| *p == c.provenance) {
            Some((_, idx)) => idx.push(i),
            None => groups.push((c.provenance, vec![i])),
        }
    }
    let mut chosen = Vec::with_capacity(count);
    let mut round = 0;
    while chosen.len() < count {
        for (_, idx) in &groups {
            if let Some(&i) = idx.get(round) {
                if chosen.len() < count {
                    chosen.push(i);
                }
            }
        }
        round += 1;
    }
    chosen.sort_unstable();
    chosen.into_iter().map(|i| candidates[i]).collect()
}

const STRICT_ATTEMPTS: usize = 256;
const CLAMPED_ATTEMPTS: usize = 4096;

/// Dedupe the seeds and fill up to `target_count` with seeded jitter of them.
///
/// Jitter scales each side by `1 ± jitter_scale` and shifts the center by
/// `± jitter_shift` of the source extent. Jittered boxes are resampled until
/// they fit the frame, the aspect bounds and the dedupe threshold; clipping
/// to the frame is only a last resort.
pub fn pad_with_perturbations(
    seeds: Vec<CropCandidate>,
    dims: ImageDims,
    cfg: &ProposalConfig,
) -> Vec<CropCandidate> {
    let target = cfg.target_count;
    let mut kept = dedupe(seeds, cfg.dedupe_iou);
    if kept.len() > target {
        kept = select_round_robin(kept, target);
    }
    if kept.is_empty() {
        kept.push(CropCandidate::new(largest_frame_crop(dims, cfg), Provenance::FullFrame));
    }
    let sources: Vec<PixelBox> = kept.iter().map(|c| c.bbox).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut attempts = 0usize;
    while kept.len() < target {
        attempts += 1;
        let src = sources[rng.random_range(0..sources.len())];
        let sx = 1.0 + rng.random_range(-cfg.jitter_scale..=cfg.jitter_scale);
        let sy = 1.0 + rng.random_range(-cfg.jitter_scale..=cfg.jitter_scale);
        let dx = rng.random_range(-cfg.jitter_shift..=cfg.jitter_shift) * src.width();
        let dy = rng.random_range(-cfg.jitter_shift..=cfg.jitter_shift) * src.height();
        let (cx, cy) = src.center();
        let Ok(mut b) = PixelBox::from_center(cx + dx, cy + dy, src.width() * sx, src.height() * sy) else {
            continue;
        };
        if !dims.contains(&b) {
            if attempts <= STRICT_ATTEMPTS {
                continue;
            }
            match crate::geometry::clamp(&b, dims) {
                Ok(c) => b = c,
                Err(_) => continue,
            }
        }
        let distinct = kept.iter().all(|k| iou(&k.bbox, &b) <= cfg.dedupe_iou);
        if !cfg.aspect_ok(&b) || (!distinct && attempts <= CLAMPED_ATTEMPTS) {
            continue;
        }
        kept.push(CropCandidate::new(b, Provenance::Perturbation));
        attempts = 0;
    }
    kept
}

// ---------------------------------------------------------------------------
// Letter-labeled candidate sets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CandidateId(char);

impl CandidateId {
    pub fn from_index(i: usize) -> Option<Self> {
        (i < MAX_CANDIDATES).then(|| CandidateId((b'A' + i as u8) as char))
    }

    pub fn from_char(c: char) -> Option<Self> {
        c.is_ascii_uppercase().then_some(CandidateId(c))
    }

    pub fn index(&self) -> usize {
        (self.0 as u8 - b'A') as usize
    }

    pub fn as_char(&self) -> char {
        self.0
    }
}

impl fmt::Display for CandidateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Serialize for CandidateId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CandidateId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        let mut chars = s.chars();
        match (chars.next().and_then(CandidateId::from_char), chars.next()) {
            (Some(id), None) => Ok(id),
            _ => Err(serde::de::Error::custom(format!("invalid candidate id {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledCandidate {
    pub id: CandidateId,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<[f64; 2]>,
}

/// Candidates with contiguous letter IDs from `A` in emission order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCandidateSet")]
pub struct CandidateSet {
    candidates: Vec<LabeledCandidate>,
}

#[derive(Deserialize)]
struct RawCandidateSet {
    candidates: Vec<LabeledCandidate>,
}

impl TryFrom<RawCandidateSet> for CandidateSet {
    type Error = String;

    fn try_from(raw: RawCandidateSet) -> Result<Self, Self::Error> {
        for (i, c) in raw.candidates.iter().enumerate() {
            if c.id.index() != i {
                return Err(format!("candidate {i} has id {}, ids must run from A", c.id));
            }
        }
        Ok(Self {
            candidates: raw.candidates,
        })
    }
}

impl CandidateSet {
    pub fn from_candidates(list: Vec<CropCandidate>) -> Result<Self, CompositionError> {
        if list.len() > MAX_CANDIDATES {
            return Err(CompositionError::TooManyCandidates(list.len()));
        }
        let candidates = list
            .into_iter()
            .enumerate()
            .map(|(i, c)| LabeledCandidate {
                id: CandidateId::from_index(i).expect("bounded above"),
                bbox: c.bbox,
                provenance: c.provenance,
                anchor: c.anchor,
            })
            .collect();
        Ok(Self { candidates })
    }

    pub fn from_boxes(boxes: &[PixelBox], provenance: Provenance) -> Result<Self, CompositionError> {
        Self::from_candidates(boxes.iter().map(|&b| CropCandidate::new(b, provenance)).collect())
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LabeledCandidate> {
        self.candidates.iter()
    }

    pub fn as_slice(&self) -> &[LabeledCandidate] {
        &self.candidates
    }

    pub fn get(&self, id: CandidateId) -> Option<&LabeledCandidate> {
        self.candidates.get(id.index())
    }

    pub fn ids(&self) -> Vec<CandidateId> {
        self.candidates.iter().map(|c| c.id).collect()
    }

    pub fn boxes(&self) -> Vec<PixelBox> {
        self.candidates.iter().map(|c| c.bbox).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("candidate sets always serialize")
    }
}

/// Run every rule, pad to `target_count` and assign letter IDs.
pub fn generate_candidates(
    elements: &[CompositionElement],
    dims: ImageDims,
    cfg: &ProposalConfig,
) -> Result<CandidateSet, CompositionError> {
    let seeds = rule_seeds(elements, dims, cfg)?;
    let padded = pad_with_perturbations(seeds, dims, cfg);
    assert_eq!(padded.len(), cfg.target_count, "padding always reaches the target");
    CandidateSet::from_candidates(padded)
}

/// Count candidates per provenance label.
pub fn provenance_histogram(set: &CandidateSet) -> HashMap<&'static str, usize> {
    let mut h = HashMap::new();
    for c in set.iter() {
        *h.entry(c.provenance.as_str()).or_insert(0) += 1;
    }
    h
}
