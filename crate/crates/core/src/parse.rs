//! Grammars for the three stage responses.
//!
//! Models tend to wrap answers in prose or code fences, so each parser scans
//! for the first fragment matching its grammar instead of parsing the whole
//! reply.

use serde_json::Value;
use thiserror::Error;

use crate::composition::{CandidateId, CompositionElement, ElementCategory};
use crate::geometry::{clamp_coords, ImageDims, PixelBox};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisParseError {
    #[error("no JSON value found in the response")]
    NoJson,
    #[error("unexpected JSON shape: {0}")]
    Shape(String),
    #[error("unknown composition category {0:?}")]
    UnknownCategory(String),
    #[error("element {index}: {reason}")]
    InvalidBox { index: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProposalParseError {
    #[error("no bracketed list of boxes found in the response")]
    NoBoxList,
    #[error("box {index} has {found} numbers, expected 4")]
    Arity { index: usize, found: usize },
    #[error("every proposed box was degenerate after clamping to the frame")]
    EmptyProposal,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecisionParseError {
    #[error("no candidate letter found in the response")]
    NoId,
    #[error("response names several candidates: {0:?}")]
    Ambiguous(Vec<CandidateId>),
}

/// Byte range of the first balanced `{...}` or `[...]` fragment that is
/// valid JSON.
pub fn extract_json(text: &str) -> Option<&str> {
    let bytes = text.as_bytes();
    for start in 0..bytes.len() {
        if !matches!(bytes[start], b'{' | b'[') {
            continue;
        }
        if let Some(end) = balanced_end(bytes, start) {
            let frag = &text[start..end];
            if serde_json::from_str::<Value>(frag).is_ok() {
                return Some(frag);
            }
        }
    }
    None
}

/// End offset (exclusive) of the bracket group opened at `start`, honouring
/// JSON string literals.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut stack: Vec<u8> = Vec::new();
    let mut in_str = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_str {
            match (escaped, b) {
                (true, _) => escaped = false,
                (false, b'\\') => escaped = true,
                (false, b'"') => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => stack.push(b'}'),
            b'[' => stack.push(b']'),
            b'}' | b']' => {
                if stack.pop() != Some(b) {
                    return None;
                }
                if stack.is_empty() {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn json_box(v: &Value) -> Result<[f64; 4], String> {
    let arr = v.as_array().ok_or("box is not an array")?;
    if arr.len() != 4 {
        return Err(format!("box has {} numbers, expected 4", arr.len()));
    }
    let mut c = [0.0; 4];
    for (slot, x) in c.iter_mut().zip(arr) {
        *slot = x.as_f64().ok_or("box coordinate is not a number")?;
    }
    Ok(c)
}

/// Parse and validate an analysis reply against the image frame.
///
/// Accepted shapes are `{"elements": [...]}` or a bare array. Each element
/// needs a `category` and either `box` (one box) or `boxes` (a list).
pub fn parse_analysis(text: &str, dims: ImageDims) -> Result<Vec<CompositionElement>, AnalysisParseError> {
    let frag = extract_json(text).ok_or(AnalysisParseError::NoJson)?;
    let value: Value = serde_json::from_str(frag).expect("extract_json only returns valid JSON");
    let items = match &value {
        Value::Array(a) => a,
        Value::Object(o) => o
            .get("elements")
            .and_then(Value::as_array)
            .ok_or_else(|| AnalysisParseError::Shape("object without an \"elements\" array".into()))?,
        _ => unreachable!("fragments start with a bracket"),
    };
    let mut out = Vec::with_capacity(items.len());
    for (index, item) in items.iter().enumerate() {
        let obj = item
            .as_object()
            .ok_or_else(|| AnalysisParseError::Shape(format!("element {index} is not an object")))?;
        let label = obj
            .get("category")
            .and_then(Value::as_str)
            .ok_or_else(|| AnalysisParseError::Shape(format!("element {index} has no category string")))?;
        let category =
            ElementCategory::from_label(label).ok_or_else(|| AnalysisParseError::UnknownCategory(label.to_string()))?;
        let invalid = |reason: String| AnalysisParseError::InvalidBox { index, reason };
        let raw: Vec<[f64; 4]> = match (obj.get("boxes"), obj.get("box").or_else(|| obj.get("bbox"))) {
            (Some(Value::Array(list)), _) => list.iter().map(json_box).collect::<Result<_, _>>().map_err(invalid)?,
            (_, Some(b)) => vec![json_box(b).map_err(invalid)?],
            _ => return Err(invalid("missing box or boxes".into())),
        };
        let mut boxes = Vec::with_capacity(raw.len());
        for c in raw {
            let b = PixelBox::from_array(c).map_err(|e| invalid(e.to_string()))?;
            dims.check_within(&b).map_err(|e| invalid(e.to_string()))?;
            boxes.push(b);
        }
        out.push(CompositionElement::new(category, boxes).map_err(|e| invalid(e.to_string()))?);
    }
    Ok(out)
}

/// Canonical analysis answer: `{"elements":[{"category":..,"boxes":[..]}]}`.
pub fn format_elements(elements: &[CompositionElement]) -> String {
    #[derive(serde::Serialize)]
    struct Wrapper<'a> {
        elements: &'a [CompositionElement],
    }
    serde_json::to_string(&Wrapper { elements }).expect("elements serialize")
}

// ---------------------------------------------------------------------------
// Number-list grammar

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    List(Vec<Node>),
}

struct Scanner<'a> {
    s: &'a [u8],
    pos: usize,
}

impl Scanner<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && (self.s[self.pos].is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.s.get(self.pos).copied()
    }

    fn number(&mut self) -> Option<f64> {
        let start = self.pos;
        if matches!(self.peek(), Some(b'+' | b'-')) {
            self.pos += 1;
        }
        let mut digits = 0;
        while matches!(self.peek(), Some(b'0'..=b'9')) {
            self.pos += 1;
            digits += 1;
        }
        if self.peek() == Some(b'.') {
            self.pos += 1;
            while matches!(self.peek(), Some(b'0'..=b'9')) {
                self.pos += 1;
                digits += 1;
            }
        }
        if digits == 0 {
            self.pos = start;
            return None;
        }
        if matches!(self.peek(), Some(b'e' | b'E')) {
            let save = self.pos;
            self.pos += 1;
            if matches!(self.peek(), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            let exp_start = self.pos;
            while matches!(self.peek(), Some(b'0'..=b'9')) {
                self.pos += 1;
            }
            if self.pos == exp_start {
                self.pos = save;
            }
        }
        std::str::from_utf8(&self.s[start..self.pos]).ok()?.parse().ok()
    }

    /// List opened by `[` or `(`, at most `depth` levels deep.
    fn list(&mut self, depth: usize) -> Option<Node> {
        let close = match self.peek()? {
            b'[' => b']',
            b'(' => b')',
            _ => return None,
        };
        if depth == 0 {
            return None;
        }
        self.pos += 1;
        let mut items = Vec::new();
        loop {
            self.skip_ws();
            if self.peek()? == close {
                self.pos += 1;
                return Some(Node::List(items));
            }
            if !items.is_empty() {
                if self.peek()? != b',' {
                    return None;
                }
                self.pos += 1;
                self.skip_ws();
                // Trailing comma.
                if self.peek()? == close {
                    self.pos += 1;
                    return Some(Node::List(items));
                }
            }
            let item = match self.peek()? {
                b'[' | b'(' => self.list(depth - 1)?,
                _ => Node::Num(self.number()?),
            };
            items.push(item);
        }
    }
}

/// Lists of numbers found in the first bracket group that is either a flat
/// non-empty number list (one box) or a non-empty list of number lists.
fn first_number_lists(text: &str) -> Option<Vec<Vec<f64>>> {
    let bytes = text.as_bytes();
    for start in 0..bytes.len() {
        if bytes[start] != b'[' {
            continue;
        }
        let mut sc = Scanner { s: bytes, pos: start };
        let Some(Node::List(items)) = sc.list(2) else {
            continue;
        };
        if items.is_empty() {
            continue;
        }
        if items.iter().all(|n| matches!(n, Node::Num(_))) {
            return Some(vec![items
                .into_iter()
                .map(|n| match n {
                    Node::Num(v) => v,
                    Node::List(_) => unreachable!(),
                })
                .collect()]);
        }
        let mut lists = Vec::with_capacity(items.len());
        let mut ok = true;
        for n in items {
            match n {
                Node::List(inner) if inner.iter().all(|x| matches!(x, Node::Num(_))) => lists.push(
                    inner
                        .into_iter()
                        .map(|x| match x {
                            Node::Num(v) => v,
                            Node::List(_) => unreachable!(),
                        })
                        .collect(),
                ),
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return Some(lists);
        }
    }
    None
}

/// Raw 4-tuples of the first box list in `text`, without frame handling.
pub fn parse_box_list(text: &str) -> Result<Vec<[f64; 4]>, ProposalParseError> {
    let lists = first_number_lists(text).ok_or(ProposalParseError::NoBoxList)?;
    lists
        .into_iter()
        .enumerate()
        .map(|(index, l)| {
            <[f64; 4]>::try_from(l.as_slice()).map_err(|_| ProposalParseError::Arity { index, found: l.len() })
        })
        .collect()
}

/// Parse a proposal reply, clamp every box to the frame and drop boxes that
/// collapse to zero area.
pub fn parse_proposal(text: &str, dims: ImageDims) -> Result<Vec<PixelBox>, ProposalParseError> {
    let boxes: Vec<PixelBox> = parse_box_list(text)?
        .into_iter()
        .filter_map(|c| clamp_coords(c, dims).ok())
        .collect();
    if boxes.is_empty() {
        return Err(ProposalParseError::EmptyProposal);
    }
    Ok(boxes)
}

/// Letters in `text` that stand alone (no adjacent letters or digits) and
/// belong to `ids`, deduplicated in order of first appearance.
pub fn standalone_ids(text: &str, ids: &[CandidateId]) -> Vec<CandidateId> {
    let chars: Vec<char> = text.chars().collect();
    let mut found: Vec<CandidateId> = Vec::new();
    for (i, &c) in chars.iter().enumerate() {
        if !c.is_ascii_uppercase() {
            continue;
        }
        let before = i.checked_sub(1).map(|j| chars[j]);
        let after = chars.get(i + 1).copied();
        let isolated = |n: Option<char>| n.is_none_or(|n| !n.is_alphanumeric() && n != '_');
        if !(isolated(before) && isolated(after)) {
            continue;
        }
        if let Some(id) = ids.iter().find(|id| id.as_char() == c) {
            if !found.contains(id) {
                found.push(*id);
            }
        }
    }
    found
}

/// The single candidate a decision reply names.
pub fn parse_decision(text: &str, ids: &[CandidateId]) -> Result<CandidateId, DecisionParseError> {
    match standalone_ids(text, ids).as_slice() {
        [] => Err(DecisionParseError::NoId),
        [one] => Ok(*one),
        many => Err(DecisionParseError::Ambiguous(many.to_vec())),
    }
}
