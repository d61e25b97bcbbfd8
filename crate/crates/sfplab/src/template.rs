//! Prompt templates for embedding extraction.
//!
//! Three single-stage templates wrap an input text and end in a
//! representation token whose final-layer hidden state serves as the
//! sentence embedding. The two-stage prompt concatenates a single-stage
//! prefix with a suffix instruction, yielding two representation tokens
//! (the prefix's last token and the overall last token) in one sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{tokenize, Vocab, UNK_ID};

/// Placeholder substituted by the input text.
pub const TEXT_SLOT: &str = "[Text]";

/// Default suffix for the two-stage prompt. It restates the summarization
/// instruction without a second copy of the input text, so the suffix adds
/// a constant token overhead per sentence.
pub const DEFAULT_SUFFIX: &str = "it can be summarized as";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    /// `... means in one word : "` — extraction at the closing quote.
    Eol,
    /// `... can be summarized as` — extraction at "as".
    Sum,
    /// `... means something` — extraction at "something".
    Sth,
}

impl TemplateKind {
    pub fn template_text(&self) -> &'static str {
        match self {
            TemplateKind::Eol => "This sentence : \" [Text] \" means in one word : \"",
            TemplateKind::Sum => "This sentence : \" [Text] \" can be summarized as",
            TemplateKind::Sth => "This sentence : \" [Text] \" means something",
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TemplateKind::Eol => "eol",
            TemplateKind::Sum => "sum",
            TemplateKind::Sth => "sth",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "eol" => Ok(TemplateKind::Eol),
            "sum" => Ok(TemplateKind::Sum),
            "sth" => Ok(TemplateKind::Sth),
            other => Err(Error::Config(format!(
                "unknown template kind {other:?} (expected eol | sum | sth)"
            ))),
        }
    }

    pub const ALL: [TemplateKind; 3] = [TemplateKind::Eol, TemplateKind::Sum, TemplateKind::Sth];
}

/// Every token used by the built-in templates, the default suffix, and the
/// stage-joining comma. [`crate::tokenizer::build_vocab`] always includes
/// these so template rendering never produces UNK.
pub fn builtin_template_tokens() -> Vec<String> {
    let mut tokens = Vec::new();
    for kind in TemplateKind::ALL {
        tokens.extend(tokenize(&kind.template_text().replace(TEXT_SLOT, " ")));
    }
    tokens.extend(tokenize(DEFAULT_SUFFIX));
    tokens.push(",".to_string());
    tokens.sort();
    tokens.dedup();
    tokens
}

/// A rendered single-stage template.
#[derive(Debug, Clone)]
pub struct Rendered {
    pub ids: Vec<u32>,
    /// Index of the representation token (always the last token).
    pub rep_pos: usize,
}

/// Substitute `text` into the template and encode it. The representation
/// token is the final token of the rendered sequence.
pub fn render_single(vocab: &Vocab, kind: TemplateKind, text: &str) -> Rendered {
    let full = kind.template_text().replace(TEXT_SLOT, text);
    let ids = vocab.encode(&full);
    Rendered {
        rep_pos: ids.len() - 1,
        ids,
    }
}

/// A rendered two-stage prompt with both representation-token positions.
#[derive(Debug, Clone)]
pub struct TwoStagePrompt {
    pub ids: Vec<u32>,
    /// Last token of the prefix stage (== prefix_len - 1).
    pub rep1_pos: usize,
    /// Last token of the whole prompt (== ids.len() - 1).
    pub rep2_pos: usize,
    pub prefix_len: usize,
}

/// Render `prefix` around `text`, then append a comma and the suffix
/// instruction. The input text appears only in the prefix; the suffix must
/// not contain a text slot.
pub fn render_two_stage(
    vocab: &Vocab,
    prefix: TemplateKind,
    suffix_text: &str,
    text: &str,
) -> Result<TwoStagePrompt> {
    if suffix_text.contains(TEXT_SLOT) {
        return Err(Error::Usage(format!(
            "suffix must not contain a {TEXT_SLOT} slot"
        )));
    }
    let single = render_single(vocab, prefix, text);
    let prefix_len = single.ids.len();
    let mut ids = single.ids;
    ids.push(vocab.id_of(",").unwrap_or(UNK_ID));
    for tok in tokenize(suffix_text) {
        ids.push(vocab.id_of(&tok).unwrap_or(UNK_ID));
    }
    Ok(TwoStagePrompt {
        rep1_pos: prefix_len - 1,
        rep2_pos: ids.len() - 1,
        prefix_len,
        ids,
    })
}
