//! Train a text-only baseline and the caption model on the synthetic corpus,
//! compare them on the test split, and round-trip a checkpoint.
//!
//! cargo run --release --example train_evaluate

use mner::data::synth::{generate_synthetic, SynthConfig};
use mner::encoder::EncoderConfig;
use mner::eval::{significance, ScoredSentences};
use mner::pipeline::{evaluate, predict, train, Checkpoint, Dataset, ExperimentConfig, ModelKind};

fn config(model: ModelKind) -> ExperimentConfig {
    let mut c = ExperimentConfig::for_model(model);
    c.encoder = EncoderConfig {
        d_model: 32,
        n_layers: 1,
        n_heads: 2,
        d_ff: 64,
        max_len: 64,
        char_dim: 8,
        char_filters: 16,
        dropout: 0.1,
    };
    c.optimizer.lr = 3e-3;
    c.epochs = 80;
    c.batch_size = 8;
    c.seed = 1;
    c
}

fn main() -> mner::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let data = Dataset::from_synth(&generate_synthetic(&SynthConfig::default())?);

    let mut scored = Vec::new();
    for model in [ModelKind::BertCrf, ModelKind::BertCaptionCrf] {
        let outcome = train(&config(model), &data)?;
        let ck = outcome.checkpoint;
        let report = evaluate(&ck, &data.test, None)?;
        println!("== {model} (best epoch {} of {})", ck.metadata.best_epoch, ck.metadata.epochs_run);
        print!("{}", report.to_text());
        scored.push(ScoredSentences::new(&data.test, &predict(&ck.model, &data.test, None)?)?);

        let path = std::env::temp_dir().join(format!("{model}.ckpt"));
        ck.save(&path)?;
        let back = Checkpoint::load(&path)?;
        assert_eq!(evaluate(&back, &data.test, None)?, report);
        println!("checkpoint round trip ok: {}", path.display());
    }
    let p = significance(&scored[1], &scored[0], 1000, 1)?;
    println!("caption vs text-only: ΔF1 = {:+.4}, p = {p:.4}", scored[1].f1() - scored[0].f1());
    Ok(())
}
