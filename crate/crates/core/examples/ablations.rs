//! Sentence-length and training-size ablations for the caption model against
//! its text-only baseline.
//!
//! cargo run --release --example ablations

use mner::data::synth::{generate_synthetic, SynthConfig};
use mner::encoder::EncoderConfig;
use mner::eval::{length_csv, size_csv};
use mner::pipeline::{ablate_length, ablate_size, Dataset, ExperimentConfig, ModelKind};

fn main() -> mner::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let data = Dataset::from_synth(&generate_synthetic(&SynthConfig::default())?);
    let mut cfg = ExperimentConfig::for_model(ModelKind::BertCaptionCrf);
    cfg.encoder = EncoderConfig {
        d_model: 32,
        n_layers: 1,
        n_heads: 2,
        d_ff: 64,
        char_dim: 8,
        ..EncoderConfig::default()
    };
    cfg.optimizer.lr = 3e-3;
    cfg.epochs = 40;
    cfg.batch_size = 8;
    cfg.ablation.seeds = vec![1, 2];
    cfg.ablation.fractions = vec![0.1, 0.5, 1.0];

    print!("{}", length_csv(&ablate_length(&cfg, &data)?));
    println!();
    print!("{}", size_csv(&ablate_size(&cfg, &data)?));
    Ok(())
}
