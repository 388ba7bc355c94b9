//! Whitespace tokenizer with a corpus-built vocabulary.
//!
//! Token ids are dense. Id 0 is the padding token and id 1 the unknown
//! token; both are always present. Ordering of the remaining tokens is
//! deterministic: frequency descending, ties broken lexicographically.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    case_fold: bool,
}

impl Vocabulary {
    /// Build from a corpus, keeping tokens that occur at least `min_count` times.
    pub fn build(corpus: &[impl AsRef<str>], min_count: usize) -> Result<Self> {
        Self::build_with_case_fold(corpus, min_count, true)
    }

    pub fn build_with_case_fold(
        corpus: &[impl AsRef<str>],
        min_count: usize,
        case_fold: bool,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            let text = text.as_ref();
            let folded;
            let text = if case_fold {
                folded = text.to_lowercase();
                folded.as_str()
            } else {
                text
            };
            for tok in text.split_whitespace() {
                // Reserved surface forms cannot be re-mapped.
                if tok == PAD_TOKEN || tok == UNK_TOKEN {
                    continue;
                }
                *counts.entry(tok.to_string()).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(kept.into_iter().map(|(t, _)| t));
        Ok(Self::from_tokens(tokens, case_fold))
    }

    /// Reconstruct from an id-ordered token list (checkpoint loading).
    pub fn from_tokens(tokens: Vec<String>, case_fold: bool) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            tokens,
            index,
            case_fold,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn case_fold(&self) -> bool {
        self.case_fold
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// One tokenized input text.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// Surface forms after case folding, aligned with `ids`; used for display.
    pub tokens: Vec<String>,
    pub source: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lowercased whitespace tokenization; unknown tokens map to `UNK_ID`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<TokenSequence> {
    let folded;
    let prepared = if vocab.case_fold() {
        folded = text.to_lowercase();
        folded.as_str()
    } else {
        text
    };
    let words: Vec<&str> = prepared.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::EmptyText);
    }
    let ids = words
        .iter()
        .map(|w| vocab.id_of(w).unwrap_or(UNK_ID))
        .collect();
    Ok(TokenSequence {
        ids,
        tokens: words.into_iter().map(str::to_string).collect(),
        source: text.to_string(),
    })
}

/// The reference input: padding tokens of the same length as `seq`.
pub fn reference_for(seq: &TokenSequence) -> TokenSequence {
    TokenSequence {
        ids: vec![PAD_ID; seq.len()],
        tokens: vec![PAD_TOKEN.to_string(); seq.len()],
        source: String::new(),
    }
}
