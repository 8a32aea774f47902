//! Word-level vocabulary, the coordinate codec and instruction templates.

mod codec;
mod template;
mod vocab;

pub use codec::{
    dequantize_coord, parse_spatial, quantize_coord, render_spatial, ParsedSpatial, SpatialToken,
};
pub use template::{build_instruction, dialogue_text, human_turn, instruction_text, Template};
pub use vocab::{
    detokenize, normalize, tokenize, TokenId, Vocabulary, ASSISTANT, ASSISTANT_TAG, BOS, EOS, HUMAN,
    HUMAN_TAG, NEWLINE_TOKEN, PAD, UNK,
};

/// Token ids with a per-token loss mask (true on response tokens only).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn instruction(ids: Vec<TokenId>) -> Self {
        let loss_mask = vec![false; ids.len()];
        Self { ids, loss_mask }
    }

    /// Instruction followed by the response and an end token; only the
    /// response and end token are trained on.
    pub fn with_response(instruction: &[TokenId], response: &[TokenId]) -> Self {
        let mut ids = instruction.to_vec();
        ids.extend_from_slice(response);
        ids.push(EOS);
        let mut loss_mask = vec![false; instruction.len()];
        loss_mask.resize(ids.len(), true);
        Self { ids, loss_mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Index just past the last assistant identifier, if any.
    pub fn response_start(&self) -> Option<usize> {
        self.ids.iter().rposition(|&i| i == ASSISTANT).map(|p| p + 1)
    }
}
