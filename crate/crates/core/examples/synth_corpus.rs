//! Generate the synthetic caption-signal corpus and check that the caption
//! keyword alone resolves every ambiguous entity.
//!
//! cargo run --example synth_corpus -- [out_dir]

use mner::data::synth::{caption_keyword_type, generate_synthetic, is_ambiguous_surface, SynthConfig};
use mner::eval::sentence_entities;

fn main() -> mner::Result<()> {
    let corpus = generate_synthetic(&SynthConfig::default())?;
    println!(
        "{} train / {} dev / {} test sentences, {} global and {} regional feature records",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        corpus.global.len(),
        corpus.regional.len()
    );
    let s = &corpus.train[0];
    println!("example: {:?}\n  labels: {:?}\n  caption: {:?}", s.tokens, s.labels, s.caption);

    let (mut ambiguous, mut resolved) = (0, 0);
    for s in corpus.train.iter().chain(&corpus.test) {
        let keyword = s.caption.iter().flatten().find_map(|w| caption_keyword_type(w));
        for e in sentence_entities(s).iter().filter(|e| is_ambiguous_surface(&e.surface)) {
            ambiguous += 1;
            resolved += (keyword == Some(e.ty)) as usize;
        }
    }
    println!("caption keyword lookup resolves {resolved}/{ambiguous} ambiguous entities");

    if let Some(dir) = std::env::args().nth(1) {
        corpus.write_to_dir(&dir)?;
        println!("wrote {dir}");
    }
    Ok(())
}
