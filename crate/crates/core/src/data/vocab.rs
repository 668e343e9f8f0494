use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Label, Sentence};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SEP: usize = 2;
pub const CLS: usize = 3;
pub const MASK: usize = 4;

pub const CHAR_PAD: usize = 0;
pub const CHAR_UNK: usize = 1;

const RESERVED_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[SEP]", "[CLS]", "[MASK]"];
const RESERVED_CHARS: [&str; 2] = ["<pad>", "<unk>"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    pub min_count: usize,
    pub lowercase: bool,
    /// Count caption tokens too (caption input modes).
    pub include_captions: bool,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            min_count: 1,
            lowercase: true,
            include_captions: false,
        }
    }
}

/// Token, character and label index maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    token_index: HashMap<String, usize>,
    chars: Vec<String>,
    char_index: HashMap<char, usize>,
    lowercase: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    tokens: BTreeMap<String, usize>,
    chars: BTreeMap<String, usize>,
    labels: BTreeMap<String, usize>,
    reserved: BTreeMap<String, usize>,
    lowercase: bool,
}

impl Vocab {
    /// Tokens with frequency `>= min_count` are indexed after the reserved
    /// entries, most frequent first, ties broken lexicographically.
    pub fn build(train: &[Sentence], config: &VocabConfig) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from no sentences".into()));
        }
        let norm = |t: &str| {
            if config.lowercase {
                t.to_lowercase()
            } else {
                t.to_string()
            }
        };
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut char_counts: BTreeMap<char, usize> = BTreeMap::new();
        for s in train {
            let caption = s.caption.iter().flatten().filter(|_| config.include_captions);
            for t in s.tokens.iter().chain(caption) {
                let t = norm(t);
                for c in t.chars() {
                    *char_counts.entry(c).or_default() += 1;
                }
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= config.min_count.max(1) && !RESERVED_TOKENS.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let tokens: Vec<String> = RESERVED_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        let chars: Vec<String> = RESERVED_CHARS
            .iter()
            .map(|s| s.to_string())
            .chain(char_counts.into_keys().map(String::from))
            .collect();
        Self::from_parts(tokens, chars, config.lowercase)
    }

    fn from_parts(tokens: Vec<String>, chars: Vec<String>, lowercase: bool) -> Result<Self> {
        let token_index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if token_index.len() != tokens.len() {
            return Err(Error::Data("duplicate token in vocabulary".into()));
        }
        let mut char_index = HashMap::new();
        for (i, c) in chars.iter().enumerate().skip(RESERVED_CHARS.len()) {
            let mut it = c.chars();
            match (it.next(), it.next()) {
                (Some(ch), None) => {
                    if char_index.insert(ch, i).is_some() {
                        return Err(Error::Data(format!("duplicate character {c:?}")));
                    }
                }
                _ => return Err(Error::Data(format!("character entry {c:?} is not one char"))),
            }
        }
        Ok(Self {
            tokens,
            token_index,
            chars,
            char_index,
            lowercase,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_chars(&self) -> usize {
        self.chars.len()
    }

    pub fn num_labels(&self) -> usize {
        Label::COUNT
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    fn normalize<'a>(&self, token: &'a str) -> std::borrow::Cow<'a, str> {
        if self.lowercase {
            std::borrow::Cow::Owned(token.to_lowercase())
        } else {
            std::borrow::Cow::Borrowed(token)
        }
    }

    pub fn token_id(&self, token: &str) -> usize {
        self.token_index
            .get(self.normalize(token).as_ref())
            .copied()
            .unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_index.contains_key(self.normalize(token).as_ref())
    }

    /// Character ids for a token, truncated to `max_chars`.
    pub fn char_ids(&self, token: &str, max_chars: usize) -> Vec<usize> {
        self.normalize(token)
            .chars()
            .take(max_chars)
            .map(|c| self.char_index.get(&c).copied().unwrap_or(CHAR_UNK))
            .collect()
    }

    pub fn label_id(&self, label: Label) -> usize {
        label.index()
    }

    pub fn label(&self, id: usize) -> Option<Label> {
        Label::from_index(id)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            tokens: self.tokens.iter().cloned().zip(0..).collect(),
            chars: self.chars.iter().cloned().zip(0..).collect(),
            labels: Label::all().map(|l| (l.to_string(), l.index())).collect(),
            reserved: RESERVED_TOKENS
                .iter()
                .map(|t| t.to_string())
                .zip(0..)
                .chain(RESERVED_CHARS.iter().map(|c| c.to_string()).zip(0..))
                .collect(),
            lowercase: self.lowercase,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        let invert = |m: BTreeMap<String, usize>, what: &str| -> Result<Vec<String>> {
            let mut v = vec![None; m.len()];
            for (k, i) in m {
                match v.get_mut(i) {
                    Some(slot @ None) => *slot = Some(k),
                    _ => return Err(Error::Data(format!("{what} indices are not 0..n"))),
                }
            }
            Ok(v.into_iter().map(Option::unwrap).collect())
        };
        let tokens = invert(file.tokens, "token")?;
        let chars = invert(file.chars, "character")?;
        for (i, r) in RESERVED_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Data(format!("reserved token {r} not at index {i}")));
            }
        }
        for (i, r) in RESERVED_CHARS.iter().enumerate() {
            if chars.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Data(format!("reserved char {r} not at index {i}")));
            }
        }
        for (name, i) in &file.labels {
            if Label::parse(name).map(Label::index) != Some(*i) {
                return Err(Error::Data(format!("label map entry {name}={i} is not canonical")));
            }
        }
        if file.labels.len() != Label::COUNT {
            return Err(Error::Data("label map must cover the nine BIO tags".into()));
        }
        Self::from_parts(tokens, chars, file.lowercase)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sent(tokens: &str) -> Sentence {
        let tokens: Vec<String> = tokens.split_whitespace().map(String::from).collect();
        let labels = vec![Label::O; tokens.len()];
        Sentence::new("t", tokens, labels).unwrap()
    }

    #[test]
    fn min_count_maps_rare_to_unk() {
        let v = Vocab::build(&[sent("a a b")], &VocabConfig { min_count: 2, ..Default::default() })
            .unwrap();
        assert!(v.contains("a"));
        assert_eq!(v.token_id("b"), UNK);
        assert_eq!(v.token_id("a"), 5);
    }

    #[test]
    fn nine_labels() {
        let v = Vocab::build(&[sent("x")], &VocabConfig::default()).unwrap();
        assert_eq!(v.num_labels(), 2 * 4 + 1);
    }

    #[test]
    fn captions_counted_only_when_enabled() {
        let s = sent("x").with_caption(vec!["dog".into()]);
        let off = Vocab::build(&[s.clone()], &VocabConfig::default()).unwrap();
        assert!(!off.contains("dog"));
        let on = Vocab::build(
            &[s],
            &VocabConfig {
                include_captions: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(on.contains("dog"));
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = Vocab::build(&[sent("zeta beta alpha beta")], &VocabConfig::default()).unwrap();
        assert_eq!(v.token(5), Some("beta"));
        assert_eq!(v.token(6), Some("alpha"));
        assert_eq!(v.token(7), Some("zeta"));
    }

    #[test]
    fn lowercasing_is_configurable() {
        let lower = Vocab::build(&[sent("Paris")], &VocabConfig::default()).unwrap();
        assert_eq!(lower.token_id("PARIS"), lower.token_id("paris"));
        let cased = Vocab::build(
            &[sent("Paris")],
            &VocabConfig {
                lowercase: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(cased.token_id("paris"), UNK);
        assert_ne!(cased.token_id("Paris"), UNK);
    }

    #[test]
    fn reserved_indices_survive_json() {
        let v = Vocab::build(&[sent("hello world héllo")], &VocabConfig::default()).unwrap();
        let back = Vocab::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.token(CLS), Some("[CLS]"));
        assert_eq!(back.char_ids("hé?", 16), v.char_ids("hé?", 16));
        assert_eq!(back.char_ids("?", 16), vec![CHAR_UNK]);
    }

    #[test]
    fn empty_training_set_is_rejected() {
        assert!(Vocab::build(&[], &VocabConfig::default()).is_err());
    }
}
