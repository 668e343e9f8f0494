use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use mner::data::synth::{generate_synthetic, Signal, SynthConfig};
use mner::data::{load_features, parse_corpus, FeatureTable, Sentence};
use mner::eval::{length_csv, size_csv};
use mner::pipeline::{ablate_length, ablate_size, dump_attention, evaluate, run_matrix, train, Checkpoint, Dataset, ExperimentConfig};
use mner::{Error, Result};

#[derive(Parser)]
#[command(name = "mner", about = "Multimodal named entity recognition", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationMode {
    Length,
    Size,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its best checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Decode a labelled corpus and print entity-level scores.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Feature sidecar, required by image models.
        #[arg(long)]
        features: Option<PathBuf>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train and compare every config in a directory.
    Matrix {
        #[arg(long)]
        configs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sentence-length or training-size analysis against the text-only baseline.
    Ablate {
        #[arg(long, value_enum)]
        mode: AblationMode,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-sentence attention and gate values as JSON Lines.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus with feature sidecars.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long, value_parser = parse_signal)]
        signal: Signal,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SynthConfig::default().n_train)]
        n_train: usize,
        #[arg(long, default_value_t = SynthConfig::default().n_dev)]
        n_dev: usize,
        #[arg(long, default_value_t = SynthConfig::default().n_test)]
        n_test: usize,
        #[arg(long, default_value_t = SynthConfig::default().feature_dim)]
        feature_dim: usize,
    },
}

fn parse_signal(s: &str) -> std::result::Result<Signal, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn read_split(path: &Path) -> Result<Vec<Sentence>> {
    let corpus = parse_corpus(path)?;
    if corpus.repairs > 0 {
        log::warn!("{}: repaired {} BIO violations", path.display(), corpus.repairs);
    }
    Ok(corpus.sentences)
}

fn features_for(ck: &Checkpoint, path: Option<&Path>) -> Result<Option<FeatureTable>> {
    match (ck.model.kind().feature_kind(), path) {
        (Some(kind), Some(p)) => Ok(Some(load_features(p, kind)?)),
        (Some(kind), None) => Err(Error::Data(format!("{} needs --features with {kind} vectors", ck.model.kind()))),
        (None, Some(_)) => {
            log::warn!("{} ignores image features", ck.model.kind());
            Ok(None)
        }
        (None, None) => Ok(None),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data = Dataset::load(&cfg)?;
            let outcome = train(&cfg, &data)?;
            let name = cfg.name();
            let dir = cfg
                .output_dir
                .clone()
                .unwrap_or_else(|| config.parent().unwrap_or(Path::new(".")).join("runs"));
            std::fs::create_dir_all(&dir)?;
            let ck_path = dir.join(format!("{name}.ckpt"));
            outcome.checkpoint.save(&ck_path)?;
            write(&dir.join(format!("{name}.history.json")), &serde_json::to_string_pretty(&outcome.history)?)?;
            let meta = &outcome.checkpoint.metadata;
            println!(
                "{name}: {} epochs, best dev F1 {:.4} at epoch {}",
                meta.epochs_run,
                meta.dev_f1_history[meta.best_epoch - 1],
                meta.best_epoch
            );
            if !data.test.is_empty() {
                let report = evaluate(&outcome.checkpoint, &data.test, data.features(cfg.model.feature_kind()))?;
                write(&dir.join(format!("{name}.report.json")), &report.to_json()?)?;
                print!("{}", report.to_text());
            }
            println!("checkpoint: {}", ck_path.display());
        }
        Command::Evaluate {
            checkpoint,
            data,
            features,
            json,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let sentences = read_split(&data)?;
            let table = features_for(&ck, features.as_deref())?;
            let report = evaluate(&ck, &sentences, table.as_ref())?;
            print!("{}", report.to_text());
            if let Some(p) = json {
                write(&p, &report.to_json()?)?;
            }
        }
        Command::Matrix { configs, out } => {
            let report = run_matrix(&configs, &out)?;
            print!("{}", report.to_csv());
            info!("wrote {}", out.join("matrix.csv").display());
        }
        Command::Ablate { mode, config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data = Dataset::load(&cfg)?;
            if data.test.is_empty() {
                return Err(Error::Config("ablation needs data.test".into()));
            }
            let csv = match mode {
                AblationMode::Length => length_csv(&ablate_length(&cfg, &data)?),
                AblationMode::Size => size_csv(&ablate_size(&cfg, &data)?),
            };
            write(&out, &csv)?;
            print!("{csv}");
        }
        Command::DumpAttention {
            checkpoint,
            data,
            features,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let sentences = read_split(&data)?;
            let table = features_for(&ck, features.as_deref())?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            let records = dump_attention(&ck, &sentences, table.as_ref(), &out)?;
            println!("{} records -> {}", records.len(), out.display());
        }
        Command::Synth {
            seed,
            signal,
            out,
            n_train,
            n_dev,
            n_test,
            feature_dim,
        } => {
            let corpus = generate_synthetic(&SynthConfig {
                seed,
                signal,
                n_train,
                n_dev,
                n_test,
                feature_dim,
                ..SynthConfig::default()
            })?;
            corpus.write_to_dir(&out)?;
            println!(
                "{} / {} / {} sentences -> {}",
                corpus.train.len(),
                corpus.dev.len(),
                corpus.test.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
