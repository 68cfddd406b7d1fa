//! Chat messages exchanged with a vision-language backend.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContentPart {
    Text(String),
    /// PNG-encoded image bytes.
    Image(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatMessage {
    pub role: Role,
    parts: Vec<ContentPart>,
}

impl ChatMessage {
    /// Returns `None` when `parts` is empty.
    pub fn new(role: Role, parts: Vec<ContentPart>) -> Option<Self> {
        (!parts.is_empty()).then_some(Self { role, parts })
    }

    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            parts: vec![ContentPart::Text(text.into())],
        }
    }

    pub fn parts(&self) -> &[ContentPart] {
        &self.parts
    }

    /// Concatenated text parts, images omitted.
    pub fn text_content(&self) -> String {
        let texts: Vec<&str> = self
            .parts
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text(t) => Some(t.as_str()),
                ContentPart::Image(_) => None,
            })
            .collect();
        texts.join("\n")
    }

    pub fn image_count(&self) -> usize {
        self.parts.iter().filter(|p| matches!(p, ContentPart::Image(_))).count()
    }
}

/// Loggable form of a message: images are replaced by their SHA-256.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub role: Role,
    pub content: Vec<PartRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PartRecord {
    Text { text: String },
    Image { sha256: String, bytes: usize },
}

impl From<&ChatMessage> for MessageRecord {
    fn from(m: &ChatMessage) -> Self {
        Self {
            role: m.role,
            content: m
                .parts
                .iter()
                .map(|p| match p {
                    ContentPart::Text(t) => PartRecord::Text { text: t.clone() },
                    ContentPart::Image(bytes) => PartRecord::Image {
                        sha256: sha256_hex(bytes),
                        bytes: bytes.len(),
                    },
                })
                .collect(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest over a stage name and an ordered conversation, including the raw
/// image bytes. Every field is length-prefixed so distinct conversations
/// cannot collide by concatenation.
pub fn request_digest(stage: &str, messages: &[ChatMessage]) -> String {
    let mut h = Sha256::new();
    let mut field = |tag: u8, data: &[u8]| {
        h.update([tag]);
        h.update((data.len() as u64).to_le_bytes());
        h.update(data);
    };
    field(b's', stage.as_bytes());
    for m in messages {
        field(b'r', m.role.as_str().as_bytes());
        for p in &m.parts {
            match p {
                ContentPart::Text(t) => field(b't', t.as_bytes()),
                ContentPart::Image(b) => field(b'i', b),
            }
        }
    }
    hex::encode(h.finalize())
}
