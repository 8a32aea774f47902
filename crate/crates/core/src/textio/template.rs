//! Task instruction templates and the human/assistant turn format.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::vocab::{ASSISTANT_TAG, HUMAN_TAG};
use super::{TokenSequence, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    DenseCaption,
    DenseCaptionLocalize,
    Qa,
    QaLocalize,
    SceneDescription,
    PlanFull,
    PlanNext,
}

impl Template {
    pub const ALL: [Template; 7] = [
        Template::DenseCaption,
        Template::DenseCaptionLocalize,
        Template::Qa,
        Template::QaLocalize,
        Template::SceneDescription,
        Template::PlanFull,
        Template::PlanNext,
    ];

    /// Body between the identifiers; `[Name]` marks a placeholder.
    pub fn body(self) -> &'static str {
        match self {
            Template::DenseCaption => "describe this object in the given 3D scene.",
            Template::DenseCaptionLocalize => "given the 3D scene, localize and describe this object.",
            Template::Qa => "given the 3D scene, answer the question: \"[Question]\"",
            Template::QaLocalize => {
                "answer the question: \"[Question]\" with the related object locations in the input 3D scene."
            }
            Template::SceneDescription => "describe this 3D scene",
            Template::PlanFull => "[Goal] what should i do?",
            Template::PlanNext => "[Goal] i have done these things: [Done] what should i do next?",
        }
    }

    pub fn placeholders(self) -> Vec<&'static str> {
        let body = self.body();
        let mut out = Vec::new();
        let mut rest = body;
        while let Some(s) = rest.find('[') {
            let e = rest[s..].find(']').expect("template placeholders are closed") + s;
            out.push(&rest[s + 1..e]);
            rest = &rest[e + 1..];
        }
        out
    }

    pub fn fill(self, fields: &BTreeMap<&str, String>) -> Result<String> {
        let mut text = self.body().to_string();
        for name in self.placeholders() {
            let value = fields
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("template {self:?} needs placeholder [{name}]")))?;
            text = text.replace(&format!("[{name}]"), value);
        }
        Ok(text)
    }
}

/// `### human: <message>`.
pub fn human_turn(message: &str) -> String {
    format!("{HUMAN_TAG} {message}")
}

/// Full single-turn instruction text ending in the assistant identifier.
pub fn instruction_text(template: Template, fields: &BTreeMap<&str, String>) -> Result<String> {
    Ok(format!("{} {ASSISTANT_TAG}", human_turn(&template.fill(fields)?)))
}

/// Multi-turn context: every earlier `(human, assistant)` pair verbatim,
/// then the current human message and a trailing assistant identifier.
pub fn dialogue_text(history: &[(String, String)], current: &str) -> String {
    let mut parts: Vec<String> = history
        .iter()
        .map(|(h, a)| format!("{} {ASSISTANT_TAG} {a}", human_turn(h)))
        .collect();
    parts.push(format!("{} {ASSISTANT_TAG}", human_turn(current)));
    parts.join(" ")
}

/// Tokenized instruction; the loss mask is false everywhere.
pub fn build_instruction(template: Template, fields: &BTreeMap<&str, String>, vocab: &Vocabulary) -> Result<TokenSequence> {
    Ok(TokenSequence::instruction(vocab.encode(&instruction_text(template, fields)?)))
}
