//! Train a co-attention model briefly and write its per-sentence attention
//! maps and gates as JSON Lines.
//!
//! cargo run --release --example attention_dump -- [out.jsonl]

use mner::data::synth::{generate_synthetic, SynthConfig};
use mner::encoder::EncoderConfig;
use mner::eval::read_attention_dump;
use mner::pipeline::{dump_attention, train, Dataset, ExperimentConfig, ModelKind};

fn main() -> mner::Result<()> {
    let data = Dataset::from_synth(&generate_synthetic(&SynthConfig {
        n_train: 100,
        n_dev: 20,
        n_test: 10,
        ..SynthConfig::default()
    })?);
    let mut cfg = ExperimentConfig::for_model(ModelKind::BertCamCrf);
    cfg.encoder = EncoderConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        ..EncoderConfig::default()
    };
    cfg.epochs = 5;
    let ck = train(&cfg, &data)?.checkpoint;

    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("attention.jsonl"));
    let records = dump_attention(&ck, &data.test, data.global.as_ref(), &out)?;
    assert_eq!(read_attention_dump(&out)?, records);

    let r = &records[0];
    let alpha = &r.diagnostics["visual_attention"];
    for (i, token) in r.tokens.iter().enumerate() {
        let row = alpha.row(i);
        let (region, weight) = row.iter().enumerate().fold((0, 0.0), |a, (j, &w)| if w > a.1 { (j, w) } else { a });
        println!("{token:>12}: peak region {region:2} ({weight:.3})");
    }
    println!("{} records -> {}", records.len(), out.display());
    Ok(())
}
