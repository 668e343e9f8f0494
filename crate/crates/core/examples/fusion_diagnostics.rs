//! Run each image-text fusion model once and summarise its attention and
//! gate values.
//!
//! cargo run --example fusion_diagnostics

use mner::data::synth::{generate_synthetic, SynthConfig};
use mner::data::{Vocab, VocabConfig};
use mner::encoder::EncoderConfig;
use mner::fusion::Role;
use mner::pipeline::{Dataset, ExperimentConfig, Model, ModelKind, ModelSpec};

fn main() -> mner::Result<()> {
    let corpus = generate_synthetic(&SynthConfig {
        n_train: 20,
        n_dev: 1,
        n_test: 1,
        feature_dim: 8,
        ..SynthConfig::default()
    })?;
    let data = Dataset::from_synth(&corpus);
    let vocab = Vocab::build(&data.train, &VocabConfig::default())?;
    let sentence = &data.train[..1];
    println!("sentence: {}", sentence[0].tokens.join(" "));

    for kind in [ModelKind::BertCmCrf, ModelKind::BertVamCrf, ModelKind::BertCamCrf, ModelKind::VbertTamCrf] {
        let mut cfg = ExperimentConfig::for_model(kind);
        cfg.encoder = EncoderConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            ..EncoderConfig::default()
        };
        let model = Model::new(ModelSpec::from_config(&cfg, Some(8))?, vocab.clone(), 7)?;
        let features = data.features(kind.feature_kind());
        let input = model.inputs(sentence, features)?.remove(0);
        let p = model.predict(&input)?;
        println!("== {kind}");
        if p.diagnostics.is_empty() {
            println!("  (no attention or gates)");
        }
        for (name, d) in &p.diagnostics {
            let (lo, hi) = d.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let sums: Vec<f64> = (0..d.rows).map(|i| d.row(i).iter().sum()).collect();
            let max_dev = sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
            match d.role {
                Role::Attention => println!("  {name}: {}x{}, row sums within {max_dev:.1e} of 1", d.rows, d.cols),
                Role::AttentionBlock => println!("  {name}: {}x{}, values in [{lo:.3}, {hi:.3}]", d.rows, d.cols),
                Role::Gate => println!("  {name}: {}x{} gates in [{lo:.3}, {hi:.3}]", d.rows, d.cols),
            }
        }
    }
    Ok(())
}
