//! Prompt registry: the stage instructions plus fixed correction prompts.
//!
//! The on-disk format is a plain-text file of `[key]` sections. A custom file
//! may define any subset of keys; the rest fall back to the built-in set.

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::composition::CandidateSet;
use crate::geometry::PixelBox;

pub const DEFAULT_PROMPTS: &str = include_str!("../prompts/default.txt");

pub const KEYS: [&str; 7] = [
    "baseline",
    "analysis",
    "proposal",
    "decision",
    "analysis_retry",
    "proposal_retry",
    "decision_retry",
];

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("line {line}: unknown prompt key [{key}]")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: prompt key [{key}] defined twice")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: text outside any [key] section")]
    Orphan { line: usize },
    #[error("prompt [{0}] is empty")]
    Empty(String),
    #[error("missing prompt [{0}]")]
    Missing(String),
    #[error("reading prompts: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptRegistry {
    pub baseline: String,
    pub analysis: String,
    pub proposal: String,
    pub decision: String,
    pub analysis_retry: String,
    pub proposal_retry: String,
    pub decision_retry: String,
}

impl Default for PromptRegistry {
    fn default() -> Self {
        Self::parse(DEFAULT_PROMPTS).expect("built-in prompt file is complete")
    }
}

fn parse_sections(text: &str) -> Result<Vec<(String, String)>, PromptError> {
    let mut out: Vec<(String, String)> = Vec::new();
    let mut current: Option<(String, Vec<&str>)> = None;
    let flush = |cur: Option<(String, Vec<&str>)>, out: &mut Vec<(String, String)>| {
        if let Some((key, lines)) = cur {
            let body = lines.join("\n").trim().to_string();
            if body.is_empty() {
                return Err(PromptError::Empty(key));
            }
            out.push((key, body));
        }
        Ok(())
    };
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let trimmed = line.trim();
        if let Some(key) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            if !KEYS.contains(&key) {
                return Err(PromptError::UnknownKey {
                    line: lineno,
                    key: key.to_string(),
                });
            }
            if out.iter().any(|(k, _)| k == key) || current.as_ref().is_some_and(|(k, _)| k == key) {
                return Err(PromptError::DuplicateKey {
                    line: lineno,
                    key: key.to_string(),
                });
            }
            flush(current.take(), &mut out)?;
            current = Some((key.to_string(), Vec::new()));
        } else if let Some((_, lines)) = current.as_mut() {
            lines.push(line);
        } else if !trimmed.is_empty() && !trimmed.starts_with('#') {
            return Err(PromptError::Orphan { line: lineno });
        }
    }
    flush(current, &mut out)?;
    Ok(out)
}

impl PromptRegistry {
    /// Parse a complete registry; every key must be present.
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let sections = parse_sections(text)?;
        let get = |key: &str| {
            sections
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| PromptError::Missing(key.to_string()))
        };
        Ok(Self {
            baseline: get("baseline")?,
            analysis: get("analysis")?,
            proposal: get("proposal")?,
            decision: get("decision")?,
            analysis_retry: get("analysis_retry")?,
            proposal_retry: get("proposal_retry")?,
            decision_retry: get("decision_retry")?,
        })
    }

    /// Apply the sections found in `text` on top of this registry.
    pub fn with_overrides(mut self, text: &str) -> Result<Self, PromptError> {
        for (key, body) in parse_sections(text)? {
            *self.slot(&key).expect("keys validated while parsing") = body;
        }
        Ok(self)
    }

    pub fn load_overrides(path: &Path) -> Result<Self, PromptError> {
        Self::default().with_overrides(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        Some(match key {
            "baseline" => &self.baseline,
            "analysis" => &self.analysis,
            "proposal" => &self.proposal,
            "decision" => &self.decision,
            "analysis_retry" => &self.analysis_retry,
            "proposal_retry" => &self.proposal_retry,
            "decision_retry" => &self.decision_retry,
            _ => return None,
        })
    }

    fn slot(&mut self, key: &str) -> Option<&mut String> {
        Some(match key {
            "baseline" => &mut self.baseline,
            "analysis" => &mut self.analysis,
            "proposal" => &mut self.proposal,
            "decision" => &mut self.decision,
            "analysis_retry" => &mut self.analysis_retry,
            "proposal_retry" => &mut self.proposal_retry,
            "decision_retry" => &mut self.decision_retry,
            _ => return None,
        })
    }
}

/// `[x1, y1, x2, y2]` using integer literals where the coordinate is integral.
pub fn format_box(b: &PixelBox) -> String {
    let c: Vec<String> = b.to_array().iter().map(|v| format_coord(*v)).collect();
    format!("[{}]", c.join(", "))
}

fn format_coord(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Canonical proposal-stage answer: a bracketed list of boxes.
pub fn format_box_list(boxes: &[PixelBox]) -> String {
    let parts: Vec<String> = boxes.iter().map(format_box).collect();
    format!("[{}]", parts.join(", "))
}

/// Textual candidate listing appended to the decision prompt.
pub fn candidate_listing(set: &CandidateSet) -> String {
    let mut s = String::from("Candidate crops:");
    for c in set.iter() {
        s.push_str(&format!("\n{}: {}", c.id, format_box(&c.bbox)));
    }
    s
}
