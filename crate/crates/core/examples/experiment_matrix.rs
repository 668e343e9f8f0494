//! Train the full eight-model matrix on one synthetic corpus and print the
//! comparison table, with paired-bootstrap p-values against `bert_crf`.
//!
//! cargo run --release --example experiment_matrix -- [out_dir]

use mner::data::synth::{generate_synthetic, SynthConfig};
use mner::encoder::EncoderConfig;
use mner::pipeline::{run_matrix_on, Dataset, ExperimentConfig, ModelKind};

fn main() -> mner::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let data = Dataset::from_synth(&generate_synthetic(&SynthConfig {
        n_train: 150,
        n_dev: 50,
        n_test: 100,
        ..SynthConfig::default()
    })?);
    let configs: Vec<ExperimentConfig> = ModelKind::ALL
        .iter()
        .map(|&m| {
            let mut c = ExperimentConfig::for_model(m);
            c.encoder = EncoderConfig {
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                d_ff: 32,
                ..EncoderConfig::default()
            };
            c.optimizer.lr = 3e-3;
            c.epochs = 15;
            c.batch_size = 8;
            c
        })
        .collect();
    let out = std::env::args().nth(1);
    let report = run_matrix_on(&configs, &data, out.as_deref().map(std::path::Path::new))?;
    print!("{}", report.to_csv());
    Ok(())
}
