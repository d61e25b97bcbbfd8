//! Word-level tokenizer with a corpus-built vocabulary.
//!
//! Tokens are case-folded, whitespace-delimited words; the punctuation
//! characters `" , : . ?` split off as standalone tokens. Ids 0..=2 are
//! reserved for PAD, UNK and BOS.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::template;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;

const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<bos>"];
const SPLIT_PUNCT: [char; 5] = ['"', ',', ':', '.', '?'];

/// Case-folded word segmentation with punctuation split out.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut tokens = Vec::new();
    for word in lower.split_whitespace() {
        let mut current = String::new();
        for ch in word.chars() {
            if SPLIT_PUNCT.contains(&ch) {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(ch.to_string());
            } else {
                current.push(ch);
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

/// Immutable token/id mapping with dense ids.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids are always present
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Result<&str> {
        self.id_to_token
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| {
                Error::Input(format!("token id {id} out of range (|V| = {})", self.len()))
            })
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// BOS followed by the token ids of `text`; unknown tokens become UNK.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![BOS_ID];
        for tok in tokenize(text) {
            ids.push(self.id_of(&tok).unwrap_or(UNK_ID));
        }
        ids
    }

    /// Inverse of [`encode`](Vocab::encode) up to UNK and case folding.
    /// BOS and PAD ids are dropped from the output.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            let tok = self.token_of(id)?;
            if id == BOS_ID || id == PAD_ID {
                continue;
            }
            words.push(tok);
        }
        Ok(words.join(" "))
    }
}

/// Build a vocabulary from a line-separated corpus.
///
/// Contains every corpus token with frequency >= `min_freq`, plus every
/// token of the built-in templates (so template tokens never map to UNK).
/// Ids are assigned by descending frequency, ties broken lexicographically.
pub fn build_vocab(corpus: &str, min_freq: usize) -> Result<Vocab> {
    let mut freq: HashMap<String, usize> = HashMap::new();
    let mut any = false;
    for line in corpus.lines() {
        for tok in tokenize(line) {
            any = true;
            *freq.entry(tok).or_insert(0) += 1;
        }
    }
    if !any {
        return Err(Error::Input("empty corpus".into()));
    }

    let mut selected: Vec<(String, usize)> = Vec::new();
    let mut seen: HashMap<String, bool> = HashMap::new();
    for (tok, count) in &freq {
        if *count >= min_freq {
            selected.push((tok.clone(), *count));
            seen.insert(tok.clone(), true);
        }
    }
    for tok in template::builtin_template_tokens() {
        if !seen.contains_key(&tok) {
            let count = freq.get(&tok).copied().unwrap_or(0);
            selected.push((tok.clone(), count));
            seen.insert(tok, true);
        }
    }
    selected.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    id_to_token.extend(selected.into_iter().map(|(t, _)| t));
    let token_to_id = id_to_token
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();
    Ok(Vocab {
        token_to_id,
        id_to_token,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::TemplateKind;

    #[test]
    fn tokenize_splits_punctuation_and_folds_case() {
        assert_eq!(
            tokenize("This sentence : \" Hello \" means?"),
            ["this", "sentence", ":", "\"", "hello", "\"", "means", "?"]
        );
    }

    #[test]
    fn min_freq_threshold_applies() {
        let v = build_vocab("a a b", 2).unwrap();
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
    }

    #[test]
    fn build_is_deterministic() {
        let corpus = "the cat sat\nthe dog ran\nthe cat ran";
        let a = build_vocab(corpus, 1).unwrap();
        let b = build_vocab(corpus, 1).unwrap();
        assert_eq!(a.id_to_token, b.id_to_token);
    }

    #[test]
    fn template_corpus_contains_table_words() {
        let corpus = format!(
            "{}\n{}\n{}",
            TemplateKind::Eol.template_text(),
            TemplateKind::Sum.template_text(),
            TemplateKind::Sth.template_text()
        );
        let v = build_vocab(&corpus, 1).unwrap();
        for tok in ["sentence", "means", "summarized", "word"] {
            assert!(v.contains(tok), "missing {tok}");
        }
    }

    #[test]
    fn template_tokens_always_in_vocab() {
        // A corpus that shares nothing with the templates.
        let v = build_vocab("zebra quokka axolotl", 1).unwrap();
        for tok in template::builtin_template_tokens() {
            assert!(v.contains(&tok), "missing template token {tok}");
        }
    }

    #[test]
    fn encode_empty_is_bos_only() {
        let v = build_vocab("a a", 1).unwrap();
        assert_eq!(v.encode(""), vec![BOS_ID]);
    }

    #[test]
    fn encode_known_and_unknown() {
        let v = build_vocab("a a", 1).unwrap();
        let id_a = v.id_of("a").unwrap();
        assert_eq!(v.encode("a a"), vec![BOS_ID, id_a, id_a]);
        assert_eq!(v.encode("zzz"), vec![BOS_ID, UNK_ID]);
    }

    #[test]
    fn decode_drops_bos_and_errors_on_bad_id() {
        let v = build_vocab("a a", 1).unwrap();
        let id_a = v.id_of("a").unwrap();
        assert_eq!(v.decode(&[BOS_ID, id_a]).unwrap(), "a");
        assert_eq!(v.decode(&[BOS_ID]).unwrap(), "");
        let bad = v.len() as u32;
        assert!(matches!(v.decode(&[bad]), Err(Error::Input(_))));
    }

    #[test]
    fn encode_decode_roundtrip_without_unk() {
        let corpus = "the cat sat on the mat\nthe dog ran far";
        let v = build_vocab(corpus, 1).unwrap();
        let ids = v.encode("the cat ran far");
        assert!(!ids.contains(&UNK_ID));
        let text = v.decode(&ids).unwrap();
        assert_eq!(v.encode(&text), ids);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(build_vocab("", 1), Err(Error::Input(_))));
        assert!(matches!(build_vocab("   \n  ", 1), Err(Error::Input(_))));
    }
}
