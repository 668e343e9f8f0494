//! Tab-separated CoNLL-style corpus with `# id:` / `# caption:` headers.
//!
//! ```text
//! # id: img1
//! # caption: a man standing on a stage
//! John	B-PER
//! lives	O
//!
//! ```
//!
//! Sentence ids are assigned by block order (`s00000`, `s00001`, ...).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;

use super::{Label, Sentence};
use crate::error::{Error, Result};

/// Parsed sentences plus the number of BIO repairs made while loading.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub repairs: usize,
}

pub fn parse_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_corpus_str(&text, path)
}

struct Block {
    image_id: Option<String>,
    caption: Option<Vec<String>>,
    tokens: Vec<String>,
    labels: Vec<Label>,
}

impl Block {
    fn new() -> Self {
        Self {
            image_id: None,
            caption: None,
            tokens: Vec::new(),
            labels: Vec::new(),
        }
    }

    fn has_content(&self) -> bool {
        self.image_id.is_some() || self.caption.is_some() || !self.tokens.is_empty()
    }
}

pub fn parse_corpus_str(text: &str, path: &Path) -> Result<Corpus> {
    let err = |line: usize, msg: String| Error::Parse {
        path: PathBuf::from(path),
        line,
        msg,
    };
    let mut sentences = Vec::new();
    let mut repairs = 0;
    let mut block = Block::new();
    let mut block_line = 0;

    let mut finish = |block: &mut Block, line: usize, sentences: &mut Vec<Sentence>| -> Result<()> {
        let b = std::mem::replace(block, Block::new());
        if !b.has_content() {
            return Ok(());
        }
        if b.tokens.is_empty() {
            return Err(err(line, "header lines without any tokens".into()));
        }
        let mut labels = b.labels;
        let fixed = repair_bio(&mut labels);
        if fixed > 0 {
            warn!("{}:{line}: repaired {fixed} BIO tag(s)", path.display());
        }
        repairs += fixed;
        sentences.push(Sentence {
            id: format!("s{:05}", sentences.len()),
            tokens: b.tokens,
            labels,
            image_id: b.image_id,
            caption: b.caption,
        });
        Ok(())
    };

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            finish(&mut block, block_line, &mut sentences)?;
            continue;
        }
        if !block.has_content() {
            block_line = lineno;
        }
        if line.starts_with('#') && !line.contains('\t') {
            if !block.tokens.is_empty() {
                return Err(err(lineno, "header line after token lines".into()));
            }
            let body = line[1..].trim_start();
            if let Some(v) = body.strip_prefix("id:") {
                let v = v.trim();
                if v.is_empty() {
                    return Err(err(lineno, "empty image id".into()));
                }
                block.image_id = Some(v.to_string());
            } else if let Some(v) = body.strip_prefix("caption:") {
                block.caption = Some(v.split_whitespace().map(str::to_string).collect());
            } else {
                return Err(err(lineno, format!("unknown header {line:?}")));
            }
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(token), Some(label), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(err(lineno, format!("expected token<TAB>label, got {line:?}")));
        };
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(err(lineno, format!("invalid token {token:?}")));
        }
        let label = Label::parse(label.trim())
            .ok_or_else(|| err(lineno, format!("unknown label {label:?}")))?;
        block.tokens.push(token.to_string());
        block.labels.push(label);
    }
    finish(&mut block, block_line, &mut sentences)?;
    Ok(Corpus { sentences, repairs })
}

/// Rewrites every `I-X` that cannot follow its predecessor as `B-X`.
/// Returns the number of tags changed.
pub fn repair_bio(labels: &mut [Label]) -> usize {
    let mut fixed = 0;
    let mut prev = Label::O;
    for l in labels.iter_mut() {
        if let Label::I(t) = *l {
            if !l.can_follow(prev) {
                *l = Label::B(t);
                fixed += 1;
            }
        }
        prev = *l;
    }
    fixed
}

/// Serialises sentences in the format read by [`parse_corpus`].
pub fn write_corpus(sentences: &[Sentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        if let Some(id) = &s.image_id {
            let _ = writeln!(out, "# id: {id}");
        }
        if let Some(c) = &s.caption {
            let _ = writeln!(out, "# caption: {}", c.join(" "));
        }
        for (t, l) in s.tokens.iter().zip(&s.labels) {
            let _ = writeln!(out, "{t}\t{l}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EntityType;

    fn parse(text: &str) -> Result<Corpus> {
        parse_corpus_str(text, Path::new("mem.txt"))
    }

    #[test]
    fn minimal_block() {
        let c = parse("# id: img1\nJohn\tB-PER\nlives\tO\n").unwrap();
        assert_eq!(c.sentences.len(), 1);
        let s = &c.sentences[0];
        assert_eq!(s.tokens, vec!["John", "lives"]);
        assert_eq!(s.labels, vec![Label::B(EntityType::Per), Label::O]);
        assert_eq!(s.image_id.as_deref(), Some("img1"));
        assert_eq!(s.caption, None);
        assert_eq!(c.repairs, 0);
    }

    #[test]
    fn caption_header_and_multiple_blocks() {
        let text = "# id: a\n# caption: a man on a stage\nx\tO\n\n\ny\tB-LOC\nz\tI-LOC\n\n";
        let c = parse(text).unwrap();
        assert_eq!(c.sentences.len(), 2);
        assert_eq!(
            c.sentences[0].caption.as_deref(),
            Some(&["a", "man", "on", "a", "stage"].map(String::from)[..])
        );
        assert_eq!(c.sentences[1].id, "s00001");
        assert_eq!(c.sentences[1].image_id, None);
    }

    #[test]
    fn orphan_inside_is_repaired() {
        let c = parse("Paris\tI-LOC\nis\tO\n").unwrap();
        assert_eq!(c.sentences[0].labels[0], Label::B(EntityType::Loc));
        assert_eq!(c.repairs, 1);
    }

    #[test]
    fn type_switch_inside_is_repaired() {
        let c = parse("a\tB-PER\nb\tI-LOC\nc\tI-LOC\n").unwrap();
        assert_eq!(
            c.sentences[0].labels,
            vec![
                Label::B(EntityType::Per),
                Label::B(EntityType::Loc),
                Label::I(EntityType::Loc)
            ]
        );
        assert_eq!(c.repairs, 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        match parse("ok\tO\nbroken line\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse("a\tO\tO\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn unknown_label_is_an_error() {
        match parse("\n\nx\tB-DATE\n") {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("B-DATE"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_rules() {
        assert!(matches!(parse("x\tO\n# id: late\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse("# foo: bar\nx\tO\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("# id: lonely\n\n"), Err(Error::Parse { .. })));
        // a hashtag token is data, not a header
        let c = parse("#nyc\tB-LOC\n").unwrap();
        assert_eq!(c.sentences[0].tokens[0], "#nyc");
    }

    #[test]
    fn write_then_parse_round_trips() {
        let text = "# id: i9\n# caption: two dogs\nRex\tB-PER\nbarks\tO\n\nOslo\tB-LOC\n\n";
        let c = parse(text).unwrap();
        assert_eq!(write_corpus(&c.sentences), text);
        assert_eq!(parse(&write_corpus(&c.sentences)).unwrap(), c);
    }
}
