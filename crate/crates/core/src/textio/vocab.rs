use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const HUMAN: TokenId = 4;
pub const ASSISTANT: TokenId = 5;

pub const HUMAN_TAG: &str = "### human:";
pub const ASSISTANT_TAG: &str = "### assistant:";
pub const NEWLINE_TOKEN: &str = "<nl>";

/// Reserved entries, in id order, followed by the 256 integer literals.
const RESERVED: [&str; 11] = [
    "<pad>",
    "<bos>",
    "<eos>",
    "<unk>",
    HUMAN_TAG,
    ASSISTANT_TAG,
    "<loc>",
    "</loc>",
    "<obj>",
    "</obj>",
    NEWLINE_TOKEN,
];

const PUNCT: &[char] = &['.', ',', '?', '!', ':', ';', '"', '(', ')'];

/// Multi-character tokens recognised before word splitting.
const ATOMS: [&str; 6] = [HUMAN_TAG, ASSISTANT_TAG, "<loc>", "</loc>", "<obj>", "</obj>"];

/// Splits text into lowercase word-level token strings.
///
/// Identifiers and spatial delimiters are atomic, newlines become `<nl>`,
/// and each punctuation character is its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut Vec<String>| {
        if !word.is_empty() {
            out.push(std::mem::take(word));
        }
    };
    let mut rest = lower.as_str();
    while let Some(c) = rest.chars().next() {
        if let Some(atom) = ATOMS.iter().find(|a| rest.starts_with(**a)) {
            flush(&mut word, &mut out);
            out.push((*atom).to_string());
            rest = &rest[atom.len()..];
            continue;
        }
        if c == '\n' {
            flush(&mut word, &mut out);
            out.push(NEWLINE_TOKEN.to_string());
        } else if c.is_whitespace() {
            flush(&mut word, &mut out);
        } else if PUNCT.contains(&c) {
            flush(&mut word, &mut out);
            out.push(c.to_string());
        } else {
            word.push(c);
        }
        rest = &rest[c.len_utf8()..];
    }
    flush(&mut word, &mut out);
    out
}

/// Joins token strings: single spaces, except none before punctuation,
/// none around newlines, none inside spatial delimiters, and none on the
/// inner side of quotes and parentheses.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = true;
    let mut quote_open = false;
    for t in tokens {
        let t = t.as_ref();
        let (text, glue) = match t {
            NEWLINE_TOKEN => ("\n", true),
            "</loc>" | "</obj>" => (t, true),
            "\"" => {
                quote_open = !quote_open;
                (t, !quote_open)
            }
            "(" => (t, false),
            _ if t.len() == 1 && PUNCT.contains(&t.chars().next().unwrap()) => (t, true),
            _ => (t, false),
        };
        if !glue && !glue_next {
            out.push(' ');
        }
        out.push_str(text);
        glue_next = matches!(t, "<loc>" | "<obj>" | NEWLINE_TOKEN | "(") || (t == "\"" && quote_open);
    }
    out
}

/// `detokenize(tokenize(text))`.
pub fn normalize(text: &str) -> String {
    detokenize(&tokenize(text))
}

/// Bijective token-string ↔ id table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Reserved tokens, the integer literals `0..=255`, then every corpus
    /// word ordered by descending frequency and then lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Self {
        let mut base: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        base.extend((0..=255).map(|i: u32| i.to_string()));
        let known: std::collections::HashSet<&str> = base.iter().map(String::as_str).collect();
        let mut counts: HashMap<String, usize> = HashMap::new();
        for doc in corpus {
            for t in tokenize(doc.as_ref()) {
                if !known.contains(t.as_str()) {
                    *counts.entry(t).or_default() += 1;
                }
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        base.extend(words.into_iter().map(|(w, _)| w));
        Self::from_tokens(base).expect("built vocabulary is bijective")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Invalid(format!("vocabulary entry {i} must be `{r}`")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        for i in 0..=255u32 {
            if !index.contains_key(&i.to_string()) {
                return Err(Error::Invalid(format!("vocabulary lacks integer literal {i}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of the integer literal `n`.
    pub fn int_id(&self, n: u8) -> TokenId {
        self.index[&n.to_string()]
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// Inverse of `encode` on in-vocabulary text; pad/bos/eos are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect();
        detokenize(&toks)
    }

    /// One token per line.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
