//! Byte-level tokenizer with the instruction-tuned control tokens, and the
//! chat template.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS_ID: u32 = 256;
pub const EOS_ID: u32 = 257;
pub const START_OF_TURN_ID: u32 = 258;
pub const END_OF_TURN_ID: u32 = 259;
pub const VOCAB_SIZE: usize = 260;

pub const START_OF_TURN: &str = "<start_of_turn>";
pub const END_OF_TURN: &str = "<end_of_turn>";
pub const EOS: &str = "<eos>";

/// Control strings recognized in text. `[BOS]` is deliberately absent: the
/// BOS id only ever comes from the `add_bos` flag.
const CONTROL: [(&str, u32); 3] = [
    (START_OF_TURN, START_OF_TURN_ID),
    (END_OF_TURN, END_OF_TURN_ID),
    (EOS, EOS_ID),
];

/// Text to token ids. Every byte maps to its own id; control strings map to
/// their reserved ids.
pub fn tokenize(text: &str, add_bos: bool) -> Vec<u32> {
    let mut ids = Vec::with_capacity(text.len() + 1);
    if add_bos {
        ids.push(BOS_ID);
    }
    let bytes = text.as_bytes();
    let mut i = 0;
    'outer: while i < bytes.len() {
        if bytes[i] == b'<' {
            for (s, id) in CONTROL {
                if bytes[i..].starts_with(s.as_bytes()) {
                    ids.push(id);
                    i += s.len();
                    continue 'outer;
                }
            }
        }
        ids.push(bytes[i] as u32);
        i += 1;
    }
    ids
}

pub fn tokenize_with_bos(text: &str) -> Vec<u32> {
    tokenize(text, true)
}

/// Token ids back to text. BOS is dropped, control ids are spelled out and
/// invalid UTF-8 is replaced.
pub fn detokenize(ids: &[u32]) -> String {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            0..=255 => bytes.push(id as u8),
            BOS_ID => {}
            _ => {
                if let Some((s, _)) = CONTROL.iter().find(|(_, c)| *c == id) {
                    bytes.extend_from_slice(s.as_bytes());
                }
            }
        }
    }
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Model,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Model => "model",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub text: String,
}

impl ChatTurn {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
        }
    }

    pub fn model(text: impl Into<String>) -> Self {
        Self {
            role: Role::Model,
            text: text.into(),
        }
    }
}

/// Render a conversation in the instruction-tuned template.
///
/// Turns must alternate starting with the user. When the last turn is a
/// user turn the model prompt `<start_of_turn>model\n` is appended. BOS is
/// not part of the text; add it with [`tokenize_with_bos`].
pub fn format_chat(turns: &[ChatTurn]) -> Result<String> {
    let mut out = String::new();
    for (i, turn) in turns.iter().enumerate() {
        let expected = if i % 2 == 0 { Role::User } else { Role::Model };
        if turn.role != expected {
            return Err(Error::Format(format!(
                "turn {i} is {}, expected {}",
                turn.role.as_str(),
                expected.as_str()
            )));
        }
        out.push_str(START_OF_TURN);
        out.push_str(turn.role.as_str());
        out.push('\n');
        out.push_str(&turn.text);
        out.push_str(END_OF_TURN);
        out.push('\n');
    }
    if turns.last().is_some_and(|t| t.role == Role::User) {
        out.push_str(START_OF_TURN);
        out.push_str("model\n");
    }
    Ok(out)
}
