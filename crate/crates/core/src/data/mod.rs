//! Corpora, image-feature sidecars, vocabularies and batches.

mod batch;
mod corpus;
mod features;
pub mod synth;
mod vocab;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use batch::{make_batches, Batch, BatchConfig, InputMode, RowView, SEGMENT_CAPTION, SEGMENT_REGION, SEGMENT_TEXT};
pub use corpus::{parse_corpus, parse_corpus_str, repair_bio, write_corpus, Corpus};
pub use features::{load_features, parse_features_str, write_features, FeatureKind, FeatureTable, ImageFeatures, GLOBAL_REGIONS, MAX_REGIONS};
pub use vocab::{Vocab, VocabConfig, CHAR_PAD, CHAR_UNK, CLS, MASK, PAD, SEP, UNK};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityType {
    #[serde(rename = "PER")]
    Per,
    #[serde(rename = "LOC")]
    Loc,
    #[serde(rename = "ORG")]
    Org,
    #[serde(rename = "MISC")]
    Misc,
}

impl EntityType {
    pub const ALL: [EntityType; 4] = [EntityType::Per, EntityType::Loc, EntityType::Org, EntityType::Misc];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Per => "PER",
            EntityType::Loc => "LOC",
            EntityType::Org => "ORG",
            EntityType::Misc => "MISC",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "PER" => Ok(EntityType::Per),
            "LOC" => Ok(EntityType::Loc),
            "ORG" => Ok(EntityType::Org),
            "MISC" => Ok(EntityType::Misc),
            _ => Err(Error::Data(format!("unknown entity type {s:?}"))),
        }
    }
}

/// A BIO tag. Index order is `O, B-PER, I-PER, B-LOC, I-LOC, B-ORG, I-ORG, B-MISC, I-MISC`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    O,
    B(EntityType),
    I(EntityType),
}

impl Label {
    pub const COUNT: usize = 9;

    pub fn index(self) -> usize {
        match self {
            Label::O => 0,
            Label::B(t) => 1 + 2 * t.index(),
            Label::I(t) => 2 + 2 * t.index(),
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::O),
            1..=8 => {
                let t = EntityType::ALL[(i - 1) / 2];
                Some(if i % 2 == 1 { Label::B(t) } else { Label::I(t) })
            }
            _ => None,
        }
    }

    pub fn all() -> impl Iterator<Item = Label> {
        (0..Self::COUNT).filter_map(Label::from_index)
    }

    pub fn parse(s: &str) -> Option<Label> {
        if s == "O" {
            return Some(Label::O);
        }
        let (prefix, ty) = s.split_once('-')?;
        let ty = ty.parse().ok()?;
        match prefix {
            "B" => Some(Label::B(ty)),
            "I" => Some(Label::I(ty)),
            _ => None,
        }
    }

    pub fn entity_type(self) -> Option<EntityType> {
        match self {
            Label::O => None,
            Label::B(t) | Label::I(t) => Some(t),
        }
    }

    pub fn can_start(self) -> bool {
        !matches!(self, Label::I(_))
    }

    /// Whether `self` may directly follow `prev` under BIO.
    pub fn can_follow(self, prev: Label) -> bool {
        match self {
            Label::I(t) => matches!(prev, Label::B(p) | Label::I(p) if p == t),
            _ => true,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::O => f.write_str("O"),
            Label::B(t) => write!(f, "B-{t}"),
            Label::I(t) => write!(f, "I-{t}"),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Label::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown label {s:?}")))
    }
}

/// One annotated sentence, optionally paired with an image and a caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<String>,
    pub labels: Vec<Label>,
    pub image_id: Option<String>,
    pub caption: Option<Vec<String>>,
}

impl Sentence {
    pub fn new(id: impl Into<String>, tokens: Vec<String>, labels: Vec<Label>) -> Result<Self> {
        let s = Self {
            id: id.into(),
            tokens,
            labels,
            image_id: None,
            caption: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_image(mut self, image_id: impl Into<String>) -> Self {
        self.image_id = Some(image_id.into());
        self
    }

    pub fn with_caption(mut self, caption: Vec<String>) -> Self {
        self.caption = Some(caption);
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.index()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Data(format!("sentence {} is empty", self.id)));
        }
        if self.tokens.len() != self.labels.len() {
            return Err(Error::Data(format!(
                "sentence {}: {} tokens but {} labels",
                self.id,
                self.tokens.len(),
                self.labels.len()
            )));
        }
        if self.tokens.iter().any(String::is_empty) {
            return Err(Error::Data(format!("sentence {} has an empty token", self.id)));
        }
        Ok(())
    }

    pub fn is_valid_bio(&self) -> bool {
        is_valid_bio(&self.labels)
    }
}

pub fn is_valid_bio(labels: &[Label]) -> bool {
    labels.first().map_or(true, |l| l.can_start())
        && labels.windows(2).all(|w| w[1].can_follow(w[0]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_indices_are_a_bijection() {
        let all: Vec<Label> = Label::all().collect();
        assert_eq!(all.len(), 9);
        for (i, l) in all.iter().enumerate() {
            assert_eq!(l.index(), i);
            assert_eq!(Label::parse(&l.to_string()), Some(*l));
        }
        assert_eq!(Label::from_index(9), None);
    }

    #[test]
    fn label_parse_rejects_unknown() {
        assert_eq!(Label::parse("B-DATE"), None);
        assert_eq!(Label::parse("E-PER"), None);
        assert_eq!(Label::parse("o"), None);
    }

    #[test]
    fn bio_follow_rules() {
        let b_per = Label::B(EntityType::Per);
        let i_per = Label::I(EntityType::Per);
        let i_loc = Label::I(EntityType::Loc);
        assert!(i_per.can_follow(b_per));
        assert!(i_per.can_follow(i_per));
        assert!(!i_loc.can_follow(b_per));
        assert!(!i_per.can_follow(Label::O));
        assert!(!i_per.can_start());
        assert!(is_valid_bio(&[b_per, i_per, Label::O]));
        assert!(!is_valid_bio(&[Label::O, i_per]));
    }
}
