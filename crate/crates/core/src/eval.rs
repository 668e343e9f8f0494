//! Entity-level scoring and the analysis harness: seen/unseen and
//! multi-/single-type breakdowns, sentence-length buckets, nested
//! training-size samples, paired bootstrap and attention dumps.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EntityType, Label, Sentence};
use crate::error::{Error, Result};
use crate::fusion::Diagnostic;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub sentence_id: String,
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub ty: EntityType,
    pub surface: String,
}

impl EntitySpan {
    fn key(&self) -> (&str, usize, usize, EntityType) {
        (&self.sentence_id, self.start, self.end, self.ty)
    }

    fn overlaps(&self, other: &EntitySpan) -> bool {
        self.sentence_id == other.sentence_id && self.start < other.end && other.start < self.end
    }
}

/// Maximal `B-X (I-X)*` runs. An `I-X` that cannot continue the current
/// run opens a new one, as BIO repair would.
pub fn extract_entities(sentence_id: &str, tokens: &[String], labels: &[Label]) -> Vec<EntitySpan> {
    let mut out = Vec::new();
    let mut open: Option<(usize, EntityType)> = None;
    let close = |open: &mut Option<(usize, EntityType)>, end: usize, out: &mut Vec<EntitySpan>| {
        if let Some((start, ty)) = open.take() {
            out.push(EntitySpan {
                sentence_id: sentence_id.to_string(),
                start,
                end,
                ty,
                surface: tokens[start..end].join(" "),
            });
        }
    };
    for (i, &l) in labels.iter().enumerate() {
        match l {
            Label::O => close(&mut open, i, &mut out),
            Label::B(t) => {
                close(&mut open, i, &mut out);
                open = Some((i, t));
            }
            Label::I(t) => {
                if open.map(|(_, ot)| ot) != Some(t) {
                    close(&mut open, i, &mut out);
                    open = Some((i, t));
                }
            }
        }
    }
    close(&mut open, labels.len(), &mut out);
    out
}

pub fn sentence_entities(s: &Sentence) -> Vec<EntitySpan> {
    extract_entities(&s.id, &s.tokens, &s.labels)
}

/// Precision, recall and F1 with their underlying counts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Prf {
    pub fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            correct,
            predicted,
            gold,
        }
    }
}

fn count_correct(gold: &[EntitySpan], pred: &[EntitySpan]) -> usize {
    let mut pool: HashMap<(&str, usize, usize, EntityType), usize> = HashMap::new();
    for g in gold {
        *pool.entry(g.key()).or_default() += 1;
    }
    pred.iter()
        .filter(|p| match pool.get_mut(&p.key()) {
            Some(n) if *n > 0 => {
                *n -= 1;
                true
            }
            _ => false,
        })
        .count()
}

/// Exact match on (sentence, start, end, type).
pub fn entity_prf(gold: &[EntitySpan], pred: &[EntitySpan]) -> Prf {
    Prf::from_counts(count_correct(gold, pred), pred.len(), gold.len())
}

/// Gold training entities as surface → set of types.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EntityInventory {
    pub types: BTreeMap<String, BTreeSet<EntityType>>,
}

impl EntityInventory {
    pub fn from_sentences(train: &[Sentence]) -> Self {
        let mut inv = Self::default();
        for s in train {
            for e in sentence_entities(s) {
                inv.types.entry(e.surface).or_default().insert(e.ty);
            }
        }
        inv
    }

    pub fn is_seen(&self, surface: &str, ty: EntityType) -> bool {
        self.types.get(surface).is_some_and(|t| t.contains(&ty))
    }

    pub fn is_multi_type(&self, surface: &str) -> bool {
        self.types.get(surface).is_some_and(|t| t.len() >= 2)
    }
}

/// Bucket scores; `f1` is `None` for a bucket with no gold and no predicted entities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl Bucket {
    fn new(correct: usize, predicted: usize, gold: usize) -> Self {
        let p = Prf::from_counts(correct, predicted, gold);
        let empty = gold == 0 && predicted == 0;
        Self {
            gold,
            predicted,
            correct,
            precision: (!empty).then_some(p.precision),
            recall: (!empty).then_some(p.recall),
            f1: (!empty).then_some(p.f1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketName {
    Seen,
    Unseen,
    MultiType,
    SingleType,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub seen: Bucket,
    pub unseen: Bucket,
    pub multi_type: Bucket,
    pub single_type: Bucket,
}

impl Breakdown {
    pub fn get(&self, b: BucketName) -> &Bucket {
        match b {
            BucketName::Seen => &self.seen,
            BucketName::Unseen => &self.unseen,
            BucketName::MultiType => &self.multi_type,
            BucketName::SingleType => &self.single_type,
        }
    }
}

/// `(seen?, Some(multi?))` for an entity of `surface` labelled `ty`; the
/// type partition only applies to seen entities.
fn classify(inv: &EntityInventory, surface: &str, ty: EntityType) -> (bool, Option<bool>) {
    let seen = inv.is_seen(surface, ty);
    (seen, seen.then(|| inv.is_multi_type(surface)))
}

/// Gold entities are bucketed by their own (surface, type). A prediction
/// takes the bucket of the first gold span it overlaps, otherwise its own
/// classification.
pub fn breakdown(inv: &EntityInventory, gold: &[EntitySpan], pred: &[EntitySpan]) -> Breakdown {
    #[derive(Default, Clone, Copy)]
    struct C {
        gold: usize,
        pred: usize,
        correct: usize,
    }
    let mut counts: BTreeMap<BucketName, C> = BTreeMap::new();
    let buckets = |(seen, multi): (bool, Option<bool>)| {
        let mut v = vec![if seen { BucketName::Seen } else { BucketName::Unseen }];
        match multi {
            Some(true) => v.push(BucketName::MultiType),
            Some(false) => v.push(BucketName::SingleType),
            None => {}
        }
        v
    };
    let mut by_sentence: HashMap<&str, Vec<&EntitySpan>> = HashMap::new();
    for g in gold {
        by_sentence.entry(&g.sentence_id).or_default().push(g);
        for b in buckets(classify(inv, &g.surface, g.ty)) {
            counts.entry(b).or_default().gold += 1;
        }
    }
    let gold_keys: BTreeSet<_> = gold.iter().map(EntitySpan::key).collect();
    for p in pred {
        let anchor = by_sentence
            .get(p.sentence_id.as_str())
            .and_then(|gs| gs.iter().filter(|g| g.overlaps(p)).min_by_key(|g| g.start))
            .map(|g| classify(inv, &g.surface, g.ty))
            .unwrap_or_else(|| classify(inv, &p.surface, p.ty));
        let correct = gold_keys.contains(&p.key());
        for b in buckets(anchor) {
            let c = counts.entry(b).or_default();
            c.pred += 1;
            c.correct += correct as usize;
        }
    }
    let bucket = |b: BucketName| {
        let c = counts.get(&b).copied().unwrap_or_default();
        Bucket::new(c.correct, c.pred, c.gold)
    };
    Breakdown {
        seen: bucket(BucketName::Seen),
        unseen: bucket(BucketName::Unseen),
        multi_type: bucket(BucketName::MultiType),
        single_type: bucket(BucketName::SingleType),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sentences: usize,
    pub overall: Prf,
    pub per_type: BTreeMap<EntityType, Prf>,
    pub breakdown: Breakdown,
}

impl EvalReport {
    /// Scores `predictions[i]` against `sentences[i]`.
    pub fn compute(sentences: &[Sentence], predictions: &[Vec<Label>], inv: &EntityInventory) -> Result<Self> {
        let (gold, pred) = spans_for(sentences, predictions)?;
        let per_type = EntityType::ALL
            .iter()
            .map(|&t| {
                let g: Vec<EntitySpan> = gold.iter().filter(|e| e.ty == t).cloned().collect();
                let p: Vec<EntitySpan> = pred.iter().filter(|e| e.ty == t).cloned().collect();
                (t, entity_prf(&g, &p))
            })
            .collect();
        Ok(Self {
            sentences: sentences.len(),
            overall: entity_prf(&gold, &pred),
            per_type,
            breakdown: breakdown(inv, &gold, &pred),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned-column summary.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>9} {:>9} {:>9} {:>7} {:>7} {:>7}", "", "precision", "recall", "f1", "gold", "pred", "correct");
        let mut line = |name: &str, p: &Prf| {
            let _ = writeln!(
                out,
                "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>7} {:>7} {:>7}",
                name, p.precision, p.recall, p.f1, p.gold, p.predicted, p.correct
            );
        };
        line("overall", &self.overall);
        for (t, p) in &self.per_type {
            line(t.as_str(), p);
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<12} {:>9} {:>7} {:>7} {:>7}", "bucket", "f1", "gold", "pred", "correct");
        for (name, b) in [
            ("seen", &self.breakdown.seen),
            ("unseen", &self.breakdown.unseen),
            ("multi-type", &self.breakdown.multi_type),
            ("single-type", &self.breakdown.single_type),
        ] {
            let f1 = b.f1.map_or_else(|| "-".to_string(), |f| format!("{f:.4}"));
            let _ = writeln!(out, "{:<12} {:>9} {:>7} {:>7} {:>7}", name, f1, b.gold, b.predicted, b.correct);
        }
        out
    }
}

fn spans_for(sentences: &[Sentence], predictions: &[Vec<Label>]) -> Result<(Vec<EntitySpan>, Vec<EntitySpan>)> {
    if sentences.len() != predictions.len() {
        return Err(Error::contract(format!(
            "{} sentences but {} predictions",
            sentences.len(),
            predictions.len()
        )));
    }
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    for (s, p) in sentences.iter().zip(predictions) {
        if p.len() != s.len() {
            return Err(Error::contract(format!("prediction length mismatch for {}", s.id)));
        }
        gold.extend(sentence_entities(s));
        pred.extend(extract_entities(&s.id, &s.tokens, p));
    }
    Ok((gold, pred))
}

/// Sentence-length bucket edges: bucket `k` holds lengths in
/// `(edges[k-1], edges[k]]`, the last bucket everything above the last edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthEdges(pub Vec<usize>);

impl Default for LengthEdges {
    fn default() -> Self {
        Self(vec![8, 16, 24])
    }
}

impl LengthEdges {
    pub fn bucket(&self, len: usize) -> usize {
        self.0.iter().position(|&e| len <= e).unwrap_or(self.0.len())
    }

    pub fn labels(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.0.len() + 1);
        let mut lo = 1;
        for &e in &self.0 {
            out.push(if lo == 1 { format!("<={e}") } else { format!("{lo}-{e}") });
            lo = e + 1;
        }
        out.push(format!(">={lo}"));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthRow {
    pub model: String,
    pub bucket: String,
    pub sentences: usize,
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
    pub f1: Option<f64>,
}

/// Per-bucket scores for each model's predictions over the same sentences.
pub fn length_buckets(
    sentences: &[Sentence],
    models: &[(String, Vec<Vec<Label>>)],
    edges: &LengthEdges,
) -> Result<Vec<LengthRow>> {
    let labels = edges.labels();
    let mut rows = Vec::new();
    for (name, preds) in models {
        let mut groups: Vec<(Vec<Sentence>, Vec<Vec<Label>>)> = vec![(Vec::new(), Vec::new()); labels.len()];
        if preds.len() != sentences.len() {
            return Err(Error::contract(format!("{name}: prediction count mismatch")));
        }
        for (s, p) in sentences.iter().zip(preds) {
            let b = edges.bucket(s.len());
            groups[b].0.push(s.clone());
            groups[b].1.push(p.clone());
        }
        for ((ss, ps), label) in groups.iter().zip(&labels) {
            let (gold, pred) = spans_for(ss, ps)?;
            let f = entity_prf(&gold, &pred);
            rows.push(LengthRow {
                model: name.clone(),
                bucket: label.clone(),
                sentences: ss.len(),
                gold: f.gold,
                predicted: f.predicted,
                correct: f.correct,
                f1: (!ss.is_empty()).then_some(f.f1),
            });
        }
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

pub fn length_csv(rows: &[LengthRow]) -> String {
    let mut out = String::from("model,bucket,sentences,gold,predicted,correct,f1\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.model, r.bucket, r.sentences, r.gold, r.predicted, r.correct, opt(r.f1)
        );
    }
    out
}

/// Index sets for each fraction, taken as prefixes of one seeded shuffle so
/// that smaller samples are subsets of larger ones.
pub fn nested_samples(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    fractions
        .iter()
        .map(|&f| {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("training fraction {f} outside (0, 1]")));
            }
            let k = (f * n as f64).round() as usize;
            if k == 0 {
                return Err(Error::Config(format!("training fraction {f} of {n} sentences is empty")));
            }
            let mut idx = order[..k].to_vec();
            idx.sort_unstable();
            Ok(idx)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub model: String,
    pub fraction: f64,
    pub seed: u64,
    pub train_sentences: usize,
    pub f1: f64,
}

pub fn size_csv(rows: &[SizeRow]) -> String {
    let mut out = String::from("model,fraction,seed,train_sentences,f1\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{:.6}", r.model, r.fraction, r.seed, r.train_sentences, r.f1);
    }
    out
}

/// Per-sentence entity counts for one system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SentenceCounts {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSentences {
    pub ids: Vec<String>,
    pub counts: Vec<SentenceCounts>,
}

impl ScoredSentences {
    pub fn new(sentences: &[Sentence], predictions: &[Vec<Label>]) -> Result<Self> {
        if sentences.len() != predictions.len() {
            return Err(Error::contract("sentence and prediction counts differ"));
        }
        let mut counts = Vec::with_capacity(sentences.len());
        for (s, p) in sentences.iter().zip(predictions) {
            let (gold, pred) = spans_for(std::slice::from_ref(s), std::slice::from_ref(p))?;
            counts.push(SentenceCounts {
                gold: gold.len(),
                predicted: pred.len(),
                correct: count_correct(&gold, &pred),
            });
        }
        Ok(Self {
            ids: sentences.iter().map(|s| s.id.clone()).collect(),
            counts,
        })
    }

    pub fn f1(&self) -> f64 {
        f1_of(self.counts.iter())
    }
}

fn f1_of<'a>(it: impl Iterator<Item = &'a SentenceCounts>) -> f64 {
    let (mut c, mut p, mut g) = (0, 0, 0);
    for s in it {
        c += s.correct;
        p += s.predicted;
        g += s.gold;
    }
    Prf::from_counts(c, p, g).f1
}

/// Paired bootstrap over sentences on `F1(a) − F1(b)`. Two-sided p-value
/// `(1 + #{|δ* − δ| ≥ |δ|}) / (1 + n)`, where `δ*` ranges over resamples.
pub fn significance(a: &ScoredSentences, b: &ScoredSentences, n_resamples: usize, seed: u64) -> Result<f64> {
    if a.ids != b.ids {
        return Err(Error::contract("significance test over different sentence sets"));
    }
    if a.counts.iter().zip(&b.counts).any(|(x, y)| x.gold != y.gold) {
        return Err(Error::contract("significance test with differing gold entities"));
    }
    if n_resamples < 1000 {
        return Err(Error::contract(format!("{n_resamples} resamples; at least 1000 required")));
    }
    let n = a.ids.len();
    if n == 0 {
        return Err(Error::contract("significance test over no sentences"));
    }
    let delta = a.f1() - b.f1();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = vec![0usize; n];
    let mut extreme = 0usize;
    for _ in 0..n_resamples {
        idx.iter_mut().for_each(|i| *i = rng.gen_range(0..n));
        let da = f1_of(idx.iter().map(|&i| &a.counts[i]));
        let db = f1_of(idx.iter().map(|&i| &b.counts[i]));
        if ((da - db) - delta).abs() >= delta.abs() {
            extreme += 1;
        }
    }
    Ok((extreme + 1) as f64 / (n_resamples + 1) as f64)
}

/// One attention-dump line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub sentence_id: String,
    pub tokens: Vec<String>,
    pub gold: Vec<Label>,
    pub predicted: Vec<Label>,
    pub diagnostics: BTreeMap<String, Diagnostic>,
}

pub fn write_attention_dump(path: impl AsRef<Path>, records: &[AttentionRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_attention_dump(path: impl AsRef<Path>) -> Result<Vec<AttentionRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
