//! Seeded generator for a small multimodal NER corpus.
//!
//! Some entity surfaces are ambiguous (`jordan` is a person or a place). In
//! sentences of nine or more tokens the ambiguity is resolved by a cue word
//! right before the entity (`coach jordan`, `visiting jordan`); cue words are
//! numerous, so a text model needs data to learn them. Short sentences carry
//! no cue. The image side carries the type of each sentence's focus entity
//! depending on [`Signal`]:
//!
//! - `caption`: the caption contains one of two keywords for that type;
//! - `region`: one RoI (and one global grid cell) points along a per-type
//!   axis in the first four feature dimensions;
//! - `none`: captions use neutral words only and every feature vector is
//!   zero on the type axes.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_corpus, write_features, EntityType, FeatureKind, FeatureTable, ImageFeatures, Label, Sentence, GLOBAL_REGIONS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signal {
    None,
    Caption,
    Region,
}

impl std::str::FromStr for Signal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Signal::None),
            "caption" => Ok(Signal::Caption),
            "region" => Ok(Signal::Region),
            _ => Err(Error::Config(format!("unknown signal {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub signal: Signal,
    /// Image feature dimension; at least 8.
    pub feature_dim: usize,
    /// Probability that a sentence's focus entity has an ambiguous surface.
    pub ambiguous_rate: f64,
    /// Probability of a short (2-8 token) sentence.
    pub short_rate: f64,
    /// Probability that a test-split filler entity uses a name never seen in training.
    pub unseen_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_train: 300,
            n_dev: 100,
            n_test: 200,
            signal: Signal::Caption,
            feature_dim: 16,
            ambiguous_rate: 0.7,
            short_rate: 0.4,
            unseen_rate: 0.15,
        }
    }
}

/// Generated splits and their feature sidecars.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub train: Vec<Sentence>,
    pub dev: Vec<Sentence>,
    pub test: Vec<Sentence>,
    pub global: Vec<ImageFeatures>,
    pub regional: Vec<ImageFeatures>,
}

impl SynthCorpus {
    pub fn global_table(&self) -> FeatureTable {
        table(&self.global, FeatureKind::Global)
    }

    pub fn regional_table(&self) -> FeatureTable {
        table(&self.regional, FeatureKind::Regional)
    }

    /// Writes `train.txt`, `dev.txt`, `test.txt`, `global.jsonl` and `regional.jsonl`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("train.txt"), write_corpus(&self.train))?;
        std::fs::write(dir.join("dev.txt"), write_corpus(&self.dev))?;
        std::fs::write(dir.join("test.txt"), write_corpus(&self.test))?;
        std::fs::write(dir.join("global.jsonl"), write_features(&self.global)?)?;
        std::fs::write(dir.join("regional.jsonl"), write_features(&self.regional)?)?;
        Ok(())
    }
}

fn table(features: &[ImageFeatures], kind: FeatureKind) -> FeatureTable {
    let mut t = FeatureTable {
        kind: Some(kind),
        ..FeatureTable::default()
    };
    for f in features {
        t.insert(f.clone());
    }
    t
}

pub const AMBIGUOUS: [(&str, &[EntityType]); 8] = [
    ("jordan", &[EntityType::Per, EntityType::Loc]),
    ("georgia", &[EntityType::Per, EntityType::Loc]),
    ("amazon", &[EntityType::Org, EntityType::Loc]),
    ("phoenix", &[EntityType::Loc, EntityType::Org]),
    ("mercury", &[EntityType::Per, EntityType::Misc]),
    ("orion", &[EntityType::Org, EntityType::Misc]),
    ("victoria", &[EntityType::Per, EntityType::Loc]),
    ("delta", &[EntityType::Org, EntityType::Misc]),
];

const NAMES: [&[&str]; 4] = [
    &["alice", "bob", "carla", "dmitri", "elena", "farid", "gwen", "hiro tanaka", "ines", "jamal"],
    &["paris", "lagos", "oslo", "kyoto", "lima", "cairo", "quito", "san diego", "dakar", "hanoi"],
    &["acme", "globex", "initech", "hooli", "vandelay", "soylent", "tyrell", "wayne enterprises", "wonka", "cyberdyne"],
    &["olympics", "oscars", "ramadan", "eurovision", "coachella", "diwali", "grammys", "world cup", "wimbledon", "hanukkah"],
];

const UNSEEN_NAMES: [&[&str]; 4] = [
    &["kofi", "lena"],
    &["nairobi", "tbilisi"],
    &["dunder", "aperture"],
    &["superbowl", "comiccon"],
];

const CUES: [&[&str]; 4] = [
    &["mr", "mrs", "coach", "singer", "actor", "actress", "uncle", "aunt", "dr", "player", "captain", "senator", "rapper", "chef", "professor", "pastor"],
    &["in", "at", "near", "visiting", "downtown", "around", "across", "outside", "inside", "toward", "from", "beyond", "north", "south", "via", "within"],
    &["ceo", "shares", "company", "firm", "brand", "startup", "stock", "merger", "employees", "headquarters", "ipo", "investors", "retailer", "labs", "subsidiary", "boardroom"],
    &["festival", "tournament", "season", "holiday", "ceremony", "championship", "celebration", "premiere", "final", "awards", "event", "parade", "concert", "league", "gala", "contest"],
];

const FILLERS: [&str; 46] = [
    "look", "today", "wow", "so", "much", "love", "this", "great", "again", "omg", "yes", "photo",
    "check", "out", "best", "day", "ever", "nice", "here", "with", "my", "friends", "just", "saw",
    "amazing", "time", "tonight", "lol", "really", "cool", "the", "and", "we", "our", "all",
    "what", "a", "big", "fun", "morning", "night", "happy", "weekend", "finally", "back", "see",
];

pub const CAPTION_KEYWORDS: [[&str; 2]; 4] = [
    ["man", "woman"],
    ["city", "landscape"],
    ["logo", "storefront"],
    ["stage", "trophy"],
];

const CAPTION_NEUTRAL: [&str; 27] = [
    "a", "the", "of", "with", "on", "standing", "sitting", "group", "picture", "close", "up", "blue",
    "red", "large", "small", "table", "sky", "wall", "next", "to", "front", "white", "black", "view",
    "shot", "some", "two",
];

/// Entity type announced by a caption keyword, if `word` is one.
pub fn caption_keyword_type(word: &str) -> Option<EntityType> {
    CAPTION_KEYWORDS
        .iter()
        .position(|kw| kw.contains(&word))
        .map(|i| EntityType::ALL[i])
}

pub fn is_ambiguous_surface(surface: &str) -> bool {
    AMBIGUOUS.iter().any(|(s, _)| *s == surface)
}

/// Feature dimensions reserved for the per-type axes.
pub const TYPE_AXES: usize = 4;

#[derive(Clone, Copy, PartialEq)]
enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

struct Generator<'c> {
    rng: ChaCha8Rng,
    config: &'c SynthConfig,
}

struct Chunk {
    tokens: Vec<String>,
    labels: Vec<Label>,
}

impl Generator<'_> {
    fn pick<'a>(&mut self, xs: &[&'a str]) -> &'a str {
        xs[self.rng.gen_range(0..xs.len())]
    }

    fn entity_chunk(&mut self, surface: &str, ty: EntityType, cue: bool) -> Chunk {
        let mut tokens = Vec::new();
        let mut labels = Vec::new();
        if cue {
            let c = self.pick(CUES[ty.index()]);
            tokens.push(c.to_string());
            labels.push(Label::O);
        }
        for (k, w) in surface.split(' ').enumerate() {
            tokens.push(w.to_string());
            labels.push(if k == 0 { Label::B(ty) } else { Label::I(ty) });
        }
        Chunk { tokens, labels }
    }

    fn plain_entity(&mut self, split: Split) -> (String, EntityType) {
        let ty = EntityType::ALL[self.rng.gen_range(0..4)];
        let unseen = split == Split::Test && self.rng.gen_bool(self.config.unseen_rate);
        let pool = if unseen { UNSEEN_NAMES[ty.index()] } else { NAMES[ty.index()] };
        (self.pick(pool).to_string(), ty)
    }

    fn sentence(&mut self, split: Split, index: usize) -> (Sentence, EntityType) {
        let u: f64 = self.rng.gen();
        let short = u < self.config.short_rate;
        let target: usize = if short {
            self.rng.gen_range(2..=8)
        } else {
            let v: f64 = self.rng.gen();
            if v < 0.34 {
                self.rng.gen_range(9..=16)
            } else if v < 0.5 {
                self.rng.gen_range(17..=24)
            } else {
                self.rng.gen_range(25..=32)
            }
        };

        let (focus_surface, focus_type) = if self.rng.gen_bool(self.config.ambiguous_rate) {
            let (s, types) = AMBIGUOUS[self.rng.gen_range(0..AMBIGUOUS.len())];
            (s.to_string(), types[self.rng.gen_range(0..types.len())])
        } else {
            self.plain_entity(split)
        };
        let mut chunks = vec![self.entity_chunk(&focus_surface, focus_type, !short)];
        if !short {
            let extra = if target >= 25 { 2 } else { 1 };
            for _ in 0..extra {
                let (s, t) = self.plain_entity(split);
                chunks.push(self.entity_chunk(&s, t, true));
            }
        }
        chunks.shuffle(&mut self.rng);

        let used: usize = chunks.iter().map(|c| c.tokens.len()).sum();
        let fillers = target.saturating_sub(used);
        // distribute fillers over the gaps around the chunks
        let mut gaps = vec![0usize; chunks.len() + 1];
        for _ in 0..fillers {
            let g = self.rng.gen_range(0..gaps.len());
            gaps[g] += 1;
        }
        let mut tokens = Vec::new();
        let mut labels = Vec::new();
        for (gi, &count) in gaps.iter().enumerate() {
            for _ in 0..count {
                tokens.push(self.pick(&FILLERS).to_string());
                labels.push(Label::O);
            }
            if let Some(c) = chunks.get(gi) {
                tokens.extend(c.tokens.iter().cloned());
                labels.extend(c.labels.iter().copied());
            }
        }

        let caption = self.caption(focus_type);
        let image_id = format!("{}-{index:05}", split.tag());
        let s = Sentence {
            id: format!("s{index:05}"),
            tokens,
            labels,
            image_id: Some(image_id),
            caption: Some(caption),
        };
        (s, focus_type)
    }

    fn caption(&mut self, focus: EntityType) -> Vec<String> {
        let len = self.rng.gen_range(4..=8);
        let mut words: Vec<String> = (0..len).map(|_| self.pick(&CAPTION_NEUTRAL).to_string()).collect();
        if self.config.signal == Signal::Caption {
            let kw = CAPTION_KEYWORDS[focus.index()][self.rng.gen_range(0..2)];
            let at = self.rng.gen_range(0..len);
            words[at] = kw.to_string();
        }
        words
    }

    fn round(x: f64) -> f64 {
        (x * 1e4).round() / 1e4
    }

    fn noise_vector(&mut self) -> Vec<f64> {
        let d = self.config.feature_dim;
        (0..d)
            .map(|k| {
                if k < TYPE_AXES {
                    0.0
                } else {
                    Self::round(self.rng.gen_range(-1.0..1.0))
                }
            })
            .collect()
    }

    fn typed_vector(&mut self, ty: EntityType) -> Vec<f64> {
        let mut v = self.noise_vector();
        v[ty.index()] = 2.0;
        v
    }

    fn features(&mut self, image_id: &str, focus: EntityType) -> Result<(ImageFeatures, ImageFeatures)> {
        let informative = self.config.signal == Signal::Region;
        let mut grid: Vec<Vec<f64>> = (0..GLOBAL_REGIONS).map(|_| self.noise_vector()).collect();
        if informative {
            let cell = self.rng.gen_range(0..GLOBAL_REGIONS);
            grid[cell] = self.typed_vector(focus);
        }
        let r = self.rng.gen_range(2..=4);
        let mut rois: Vec<Vec<f64>> = (0..r).map(|_| self.noise_vector()).collect();
        if informative {
            let slot = self.rng.gen_range(0..r);
            rois[slot] = self.typed_vector(focus);
        }
        Ok((
            ImageFeatures::new(image_id, FeatureKind::Global, grid)?,
            ImageFeatures::new(image_id, FeatureKind::Regional, rois)?,
        ))
    }
}

/// Deterministic in `config` (including the seed).
pub fn generate_synthetic(config: &SynthConfig) -> Result<SynthCorpus> {
    if config.n_train == 0 || config.n_dev == 0 || config.n_test == 0 {
        return Err(Error::Config("synthetic split sizes must be at least 1".into()));
    }
    if config.feature_dim < 2 * TYPE_AXES {
        return Err(Error::Config(format!(
            "feature_dim must be at least {}",
            2 * TYPE_AXES
        )));
    }
    for (name, p) in [
        ("ambiguous_rate", config.ambiguous_rate),
        ("short_rate", config.short_rate),
        ("unseen_rate", config.unseen_rate),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("{name} must lie in [0, 1]")));
        }
    }
    let mut g = Generator {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        config,
    };
    let mut out = SynthCorpus {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
        global: Vec::new(),
        regional: Vec::new(),
    };
    for (split, n) in [
        (Split::Train, config.n_train),
        (Split::Dev, config.n_dev),
        (Split::Test, config.n_test),
    ] {
        for i in 0..n {
            let (s, focus) = g.sentence(split, i);
            let (gl, rg) = g.features(s.image_id.as_deref().unwrap_or_default(), focus)?;
            out.global.push(gl);
            out.regional.push(rg);
            match split {
                Split::Train => out.train.push(s),
                Split::Dev => out.dev.push(s),
                Split::Test => out.test.push(s),
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_corpus_str, parse_features_str};

    fn small(signal: Signal, seed: u64) -> SynthCorpus {
        generate_synthetic(&SynthConfig {
            seed,
            n_train: 60,
            n_dev: 20,
            n_test: 40,
            signal,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        small(Signal::Region, 7).write_to_dir(a.path()).unwrap();
        small(Signal::Region, 7).write_to_dir(b.path()).unwrap();
        for f in ["train.txt", "dev.txt", "test.txt", "global.jsonl", "regional.jsonl"] {
            let x = std::fs::read(a.path().join(f)).unwrap();
            let y = std::fs::read(b.path().join(f)).unwrap();
            assert_eq!(x, y, "{f}");
        }
        let c = small(Signal::Region, 8);
        assert_ne!(c.train, small(Signal::Region, 7).train);
    }

    #[test]
    fn gold_sequences_need_no_repair() {
        for signal in [Signal::None, Signal::Caption, Signal::Region] {
            let c = small(signal, 3);
            for s in c.train.iter().chain(&c.dev).chain(&c.test) {
                s.validate().unwrap();
                assert!(s.is_valid_bio(), "{s:?}");
            }
            let parsed = parse_corpus_str(&write_corpus(&c.train), Path::new("t")).unwrap();
            assert_eq!(parsed.repairs, 0);
            assert_eq!(parsed.sentences, c.train);
        }
    }

    #[test]
    fn no_signal_means_no_type_information() {
        let c = small(Signal::None, 5);
        for s in c.train.iter().chain(&c.test) {
            for w in s.caption.as_ref().unwrap() {
                assert_eq!(caption_keyword_type(w), None);
            }
        }
        for f in c.global.iter().chain(&c.regional) {
            for r in 0..f.rows() {
                assert!(f.row(r)[..TYPE_AXES].iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn caption_keyword_resolves_every_ambiguous_entity() {
        let c = small(Signal::Caption, 9);
        let mut checked = 0;
        for s in c.train.iter().chain(&c.dev).chain(&c.test) {
            let kw: Vec<EntityType> = s.caption.as_ref().unwrap().iter().filter_map(|w| caption_keyword_type(w)).collect();
            assert_eq!(kw.len(), 1);
            for (t, l) in s.tokens.iter().zip(&s.labels) {
                if let Label::B(ty) = l {
                    if is_ambiguous_surface(t) {
                        assert_eq!(kw[0], *ty);
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 30);
    }

    #[test]
    fn region_signal_marks_one_roi() {
        let c = small(Signal::Region, 2);
        for (s, f) in c.train.iter().zip(&c.regional) {
            assert_eq!(s.image_id.as_deref(), Some(f.image_id.as_str()));
            let marked = (0..f.rows()).filter(|&r| f.row(r)[..TYPE_AXES].iter().any(|&x| x != 0.0)).count();
            assert_eq!(marked, 1);
        }
        let text = write_features(&c.regional).unwrap();
        let t = parse_features_str(&text, FeatureKind::Regional).unwrap();
        assert_eq!(t.len(), c.regional.len());
    }

    #[test]
    fn short_sentences_have_no_cue_words() {
        let c = small(Signal::Caption, 4);
        let cues: Vec<&str> = CUES.iter().flat_map(|c| c.iter().copied()).collect();
        let mut shorts = 0;
        for s in &c.train {
            if s.len() <= 8 {
                shorts += 1;
                assert!(s.tokens.iter().all(|t| !cues.contains(&t.as_str())), "{:?}", s.tokens);
            }
        }
        assert!(shorts > 0);
    }

    #[test]
    fn rejects_empty_splits() {
        let cfg = SynthConfig {
            n_dev: 0,
            ..SynthConfig::default()
        };
        assert!(generate_synthetic(&cfg).is_err());
    }
}
