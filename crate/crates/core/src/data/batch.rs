//! Padded model inputs.
//!
//! Row layouts:
//! - text: `[CLS] w1..wn [SEP]`
//! - text + caption: `[CLS] w1..wn [SEP] c1..cm [SEP]`, caption positions in segment 1
//! - text + regions: `[CLS] w1..wn [SEP] r1..rR`, region slots in segment 2
//!
//! Only word positions carry labels.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{FeatureKind, FeatureTable, ImageFeatures, Sentence, Vocab, CHAR_PAD, CLS, PAD, SEP};
use crate::error::{Error, Result};

pub const SEGMENT_TEXT: u8 = 0;
pub const SEGMENT_CAPTION: u8 = 1;
pub const SEGMENT_REGION: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Text,
    TextCaption,
    TextRegions,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchConfig {
    pub mode: InputMode,
    /// Image features each sentence must resolve, if any.
    pub image_kind: Option<FeatureKind>,
    pub batch_size: usize,
    pub caption_max_len: usize,
    pub max_chars: usize,
    /// Upper bound on positions that receive a position embedding.
    pub max_len: usize,
}

impl BatchConfig {
    pub fn new(mode: InputMode) -> Self {
        Self {
            mode,
            image_kind: match mode {
                InputMode::TextRegions => Some(FeatureKind::Regional),
                _ => None,
            },
            batch_size: 16,
            caption_max_len: 16,
            max_chars: 16,
            max_len: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub sentence_ids: Vec<String>,
    /// `batch × width` token indices, `PAD` beyond each row's length.
    pub tokens: Vec<Vec<usize>>,
    /// `batch × width × max_chars` character indices, `CHAR_PAD`-filled.
    pub chars: Vec<Vec<Vec<usize>>>,
    /// Unpadded character count per position; zero for special, region and pad slots.
    pub char_lens: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    pub segments: Vec<Vec<u8>>,
    /// Gold label index on word positions, `None` (ignored) elsewhere.
    pub labels: Vec<Vec<Option<usize>>>,
    /// Feature row feeding each region slot.
    pub region_rows: Vec<Vec<Option<usize>>>,
    pub images: Vec<Option<Arc<ImageFeatures>>>,
    pub lengths: Vec<usize>,
    pub word_counts: Vec<usize>,
}

/// One unpadded row of a [`Batch`].
#[derive(Debug, Clone, Copy)]
pub struct RowView<'a> {
    pub sentence_id: &'a str,
    pub tokens: &'a [usize],
    pub chars: &'a [Vec<usize>],
    pub char_lens: &'a [usize],
    pub segments: &'a [u8],
    pub labels: &'a [Option<usize>],
    pub region_rows: &'a [Option<usize>],
    pub image: Option<&'a ImageFeatures>,
    pub words: usize,
}

impl<'a> RowView<'a> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Row positions of the sentence's words (`1..=n`).
    pub fn word_positions(&self) -> std::ops::Range<usize> {
        1..1 + self.words
    }

    pub fn gold(&self) -> Vec<usize> {
        self.labels.iter().filter_map(|l| *l).collect()
    }

    pub fn char_ids(&self, pos: usize) -> &'a [usize] {
        &self.chars[pos][..self.char_lens[pos]]
    }

    pub fn region_count(&self) -> usize {
        self.segments.iter().filter(|&&s| s == SEGMENT_REGION).count()
    }
}

impl Batch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn width(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }

    pub fn row(&self, i: usize) -> RowView<'_> {
        let n = self.lengths[i];
        RowView {
            sentence_id: &self.sentence_ids[i],
            tokens: &self.tokens[i][..n],
            chars: &self.chars[i][..n],
            char_lens: &self.char_lens[i][..n],
            segments: &self.segments[i][..n],
            labels: &self.labels[i][..n],
            region_rows: &self.region_rows[i][..n],
            image: self.images[i].as_deref(),
            words: self.word_counts[i],
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = RowView<'_>> {
        (0..self.len()).map(|i| self.row(i))
    }
}

struct Row {
    id: String,
    tokens: Vec<usize>,
    chars: Vec<Vec<usize>>,
    segments: Vec<u8>,
    labels: Vec<Option<usize>>,
    region_rows: Vec<Option<usize>>,
    image: Option<Arc<ImageFeatures>>,
    words: usize,
}

fn encode(
    s: &Sentence,
    image: Option<Arc<ImageFeatures>>,
    vocab: &Vocab,
    config: &BatchConfig,
) -> Result<Row> {
    let mut row = Row {
        id: s.id.clone(),
        tokens: vec![CLS],
        chars: vec![vec![]],
        segments: vec![SEGMENT_TEXT],
        labels: vec![None],
        region_rows: vec![None],
        image: None,
        words: s.len(),
    };
    let push = |row: &mut Row, tok: usize, chars: Vec<usize>, seg: u8, label: Option<usize>| {
        row.tokens.push(tok);
        row.chars.push(chars);
        row.segments.push(seg);
        row.labels.push(label);
        row.region_rows.push(None);
    };
    for (t, l) in s.tokens.iter().zip(&s.labels) {
        push(&mut row, vocab.token_id(t), vocab.char_ids(t, config.max_chars), SEGMENT_TEXT, Some(l.index()));
    }
    push(&mut row, SEP, vec![], SEGMENT_TEXT, None);

    match config.mode {
        InputMode::Text => {}
        InputMode::TextCaption => {
            let caption = s.caption.as_deref().unwrap_or(&[]);
            for t in caption.iter().take(config.caption_max_len) {
                push(&mut row, vocab.token_id(t), vocab.char_ids(t, config.max_chars), SEGMENT_CAPTION, None);
            }
            push(&mut row, SEP, vec![], SEGMENT_CAPTION, None);
        }
        InputMode::TextRegions => {}
    }
    if row.tokens.len() > config.max_len {
        return Err(Error::Data(format!(
            "sentence {} needs {} positions, max_len is {}",
            s.id,
            row.tokens.len(),
            config.max_len
        )));
    }
    if let Some(img) = image {
        if config.mode == InputMode::TextRegions {
            for r in 0..img.rows() {
                row.tokens.push(PAD);
                row.chars.push(vec![]);
                row.segments.push(SEGMENT_REGION);
                row.labels.push(None);
                row.region_rows.push(Some(r));
            }
        }
        row.image = Some(img);
    }
    Ok(row)
}

fn resolve_images(
    sentences: &[Sentence],
    features: Option<&FeatureTable>,
    kind: FeatureKind,
) -> Result<Vec<Arc<ImageFeatures>>> {
    let mut missing = Vec::new();
    let mut found = Vec::with_capacity(sentences.len());
    for s in sentences {
        let hit = s.image_id.as_deref().and_then(|id| features.and_then(|f| f.get(id)));
        match hit {
            Some(f) if f.kind == kind => found.push(f.clone()),
            _ => missing.push(
                s.image_id
                    .clone()
                    .unwrap_or_else(|| format!("<none for sentence {}>", s.id)),
            ),
        }
    }
    if !missing.is_empty() {
        const SHOWN: usize = 10;
        let more = missing.len().saturating_sub(SHOWN);
        let mut list = missing.iter().take(SHOWN).cloned().collect::<Vec<_>>().join(", ");
        if more > 0 {
            list.push_str(&format!(" (+{more} more)"));
        }
        return Err(Error::Data(format!("missing {kind} features for image ids: {list}")));
    }
    Ok(found)
}

/// Encodes and pads `sentences` in order, `config.batch_size` per batch.
pub fn make_batches(
    sentences: &[Sentence],
    features: Option<&FeatureTable>,
    vocab: &Vocab,
    config: &BatchConfig,
) -> Result<Vec<Batch>> {
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if config.mode == InputMode::TextRegions && config.image_kind != Some(FeatureKind::Regional) {
        return Err(Error::Config("region slots need regional features".into()));
    }
    let images = match config.image_kind {
        Some(kind) => resolve_images(sentences, features, kind)?.into_iter().map(Some).collect(),
        None => vec![None; sentences.len()],
    };
    let rows = sentences
        .iter()
        .zip(images)
        .map(|(s, img)| encode(s, img, vocab, config))
        .collect::<Result<Vec<_>>>()?;

    Ok(rows.chunks(config.batch_size).map(pad).collect())
}

fn pad(rows: &[Row]) -> Batch {
    let width = rows.iter().map(|r| r.tokens.len()).max().unwrap_or(0);
    let max_chars = rows
        .iter()
        .flat_map(|r| r.chars.iter().map(Vec::len))
        .max()
        .unwrap_or(0)
        .max(1);
    let mut b = Batch {
        sentence_ids: Vec::new(),
        tokens: Vec::new(),
        chars: Vec::new(),
        char_lens: Vec::new(),
        mask: Vec::new(),
        segments: Vec::new(),
        labels: Vec::new(),
        region_rows: Vec::new(),
        images: Vec::new(),
        lengths: Vec::new(),
        word_counts: Vec::new(),
    };
    for r in rows {
        let n = r.tokens.len();
        let fill = width - n;
        b.sentence_ids.push(r.id.clone());
        b.tokens.push(r.tokens.iter().copied().chain(std::iter::repeat(PAD).take(fill)).collect());
        b.char_lens.push(
            r.chars
                .iter()
                .map(Vec::len)
                .chain(std::iter::repeat(0).take(fill))
                .collect(),
        );
        b.chars.push(
            r.chars
                .iter()
                .cloned()
                .chain(std::iter::repeat(vec![]).take(fill))
                .map(|mut c| {
                    c.resize(max_chars, CHAR_PAD);
                    c
                })
                .collect(),
        );
        b.mask.push((0..width).map(|i| i < n).collect());
        b.segments.push(
            r.segments
                .iter()
                .copied()
                .chain(std::iter::repeat(SEGMENT_TEXT).take(fill))
                .collect(),
        );
        b.labels.push(r.labels.iter().copied().chain(std::iter::repeat(None).take(fill)).collect());
        b.region_rows.push(
            r.region_rows
                .iter()
                .copied()
                .chain(std::iter::repeat(None).take(fill))
                .collect(),
        );
        b.images.push(r.image.clone());
        b.lengths.push(n);
        b.word_counts.push(r.words);
    }
    b
}
