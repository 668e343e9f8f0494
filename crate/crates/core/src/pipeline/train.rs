use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::synth::SynthCorpus;
use crate::data::{load_features, parse_corpus, FeatureKind, FeatureTable, Label, Sentence, Vocab};
use crate::encoder::{Dropout, EncoderInput};
use crate::error::{Error, Result};
use crate::eval::{entity_prf, sentence_entities, extract_entities, EntityInventory, EntitySpan, EvalReport};
use crate::tensor::Graph;

use super::checkpoint::{Checkpoint, TrainingMetadata};
use super::config::ExperimentConfig;
use super::model::{Model, ModelSpec};
use super::optim::Adam;

/// Train, dev and test splits plus whichever feature tables exist.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<Sentence>,
    pub dev: Vec<Sentence>,
    pub test: Vec<Sentence>,
    pub global: Option<FeatureTable>,
    pub regional: Option<FeatureTable>,
}

impl Dataset {
    /// Loads every path named in the config. Train and dev are required.
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        let p = &config.data;
        let need = |path: &Option<std::path::PathBuf>, what: &str| {
            path.clone()
                .ok_or_else(|| Error::Config(format!("data.{what} is not set")))
        };
        let read = |path: &Path| -> Result<Vec<Sentence>> {
            let c = parse_corpus(path)?;
            if c.repairs > 0 {
                log::warn!("{}: repaired {} BIO violations", path.display(), c.repairs);
            }
            Ok(c.sentences)
        };
        let features = |path: &Option<std::path::PathBuf>, kind| -> Result<Option<FeatureTable>> {
            path.as_deref().map(|p| load_features(p, kind)).transpose()
        };
        Ok(Self {
            train: read(&need(&p.train, "train")?)?,
            dev: read(&need(&p.dev, "dev")?)?,
            test: match &p.test {
                Some(t) => read(t)?,
                None => Vec::new(),
            },
            global: features(&p.global_features, FeatureKind::Global)?,
            regional: features(&p.regional_features, FeatureKind::Regional)?,
        })
    }

    pub fn from_synth(corpus: &SynthCorpus) -> Self {
        Self {
            train: corpus.train.clone(),
            dev: corpus.dev.clone(),
            test: corpus.test.clone(),
            global: Some(corpus.global_table()),
            regional: Some(corpus.regional_table()),
        }
    }

    pub fn features(&self, kind: Option<FeatureKind>) -> Option<&FeatureTable> {
        match kind? {
            FeatureKind::Global => self.global.as_ref(),
            FeatureKind::Regional => self.regional.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best dev epoch.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
}

/// Encoder rows and gold label ids for a split.
pub struct Prepared {
    pub inputs: Vec<EncoderInput>,
    pub gold: Vec<Vec<usize>>,
}

pub fn prepare(model: &Model, sentences: &[Sentence], features: Option<&FeatureTable>) -> Result<Prepared> {
    let inputs = model.inputs(sentences, features)?;
    let gold = sentences
        .iter()
        .map(|s| s.labels.iter().map(|&l| model.vocab.label_id(l)).collect())
        .collect();
    Ok(Prepared { inputs, gold })
}

fn f1_of(sentences: &[Sentence], predictions: &[Vec<Label>]) -> f64 {
    let gold: Vec<EntitySpan> = sentences.iter().flat_map(sentence_entities).collect();
    let pred: Vec<EntitySpan> = sentences
        .iter()
        .zip(predictions)
        .flat_map(|(s, p)| extract_entities(&s.id, &s.tokens, p))
        .collect();
    entity_prf(&gold, &pred).f1
}

/// Trains `config.model` on `data.train`, selecting the epoch with the best
/// dev F1. Shuffling and dropout draw from streams derived from `config.seed`.
pub fn train(config: &ExperimentConfig, data: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() || data.dev.is_empty() {
        return Err(Error::Data("train and dev splits must be non-empty".into()));
    }
    let kind = config.model.feature_kind();
    let features = data.features(kind);
    if let (Some(k), None) = (kind, features) {
        return Err(Error::Data(format!("{} needs {k} features; none configured", config.model)));
    }
    let vocab = Vocab::build(&data.train, &config.vocab)?;
    let spec = ModelSpec::from_config(config, features.and_then(FeatureTable::dim))?;
    let mut model = Model::new(spec, vocab, config.seed)?;
    let train_set = prepare(&model, &data.train, features)?;
    let dev_inputs = model.inputs(&data.dev, features)?;

    let mut opt = Adam::new(config.optimizer, &model.store);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(2);

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, crate::tensor::ParamStore)> = None;
    let mut bad_epochs = 0;
    let mut order: Vec<usize> = (0..train_set.inputs.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            for &i in chunk {
                let (loss, grads) = {
                    let mut g = Graph::with_params(&model.store);
                    g.set_nan_guard(false);
                    let mut drop = Dropout::new(config.encoder.dropout, &mut dropout_rng);
                    let loss = model.loss(&mut g, &train_set.inputs[i], &train_set.gold[i], Some(&mut drop))?;
                    let value = g.scalar_value(loss);
                    if !value.is_finite() {
                        return Err(Error::Numerical(format!(
                            "loss {value} at epoch {epoch}, batch {b}, sentence {}",
                            data.train[i].id
                        )));
                    }
                    (value, g.backward(loss)?.param_grads(&g))
                };
                total += loss;
                for (id, grad) in &grads {
                    model.store.accumulate_grad(*id, grad)?;
                }
            }
            opt.step(&mut model.store, chunk.len() as f64).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("{m} at epoch {epoch}, batch {b}")),
                other => other,
            })?;
        }
        let preds = model.predict_all(&dev_inputs)?;
        let dev_f1 = f1_of(&data.dev, &preds);
        let train_loss = total / train_set.inputs.len() as f64;
        debug!("epoch {epoch}: loss {train_loss:.4}, dev F1 {dev_f1:.4}");
        history.push(EpochLog {
            epoch,
            train_loss,
            dev_f1,
        });
        if best.as_ref().is_none_or(|(f, _, _)| dev_f1 > *f) {
            best = Some((dev_f1, epoch, model.store.clone()));
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= config.patience.max(1) {
                info!("{}: stopping after epoch {epoch}, no dev gain for {bad_epochs} epochs", config.name());
                break;
            }
        }
        if config.target_dev_f1.is_some_and(|t| dev_f1 >= t) {
            info!("{}: dev F1 {dev_f1:.4} reached target at epoch {epoch}", config.name());
            break;
        }
    }

    let (best_f1, best_epoch, store) = best.expect("at least one epoch runs");
    info!("{}: best dev F1 {best_f1:.4} at epoch {best_epoch}", config.name());
    model.store = store;
    model.store.zero_grads();
    let metadata = TrainingMetadata {
        epochs_run: history.len(),
        best_epoch,
        dev_f1_history: history.iter().map(|h| h.dev_f1).collect(),
        train_loss_history: history.iter().map(|h| h.train_loss).collect(),
        inventory: EntityInventory::from_sentences(&data.train),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            config: config.clone(),
            metadata,
        },
        history,
    })
}

/// Viterbi labels for every sentence.
pub fn predict(model: &Model, sentences: &[Sentence], features: Option<&FeatureTable>) -> Result<Vec<Vec<Label>>> {
    model.predict_all(&model.inputs(sentences, features)?)
}

/// Decodes `sentences` and scores them against their gold labels.
pub fn evaluate(ck: &Checkpoint, sentences: &[Sentence], features: Option<&FeatureTable>) -> Result<EvalReport> {
    if ck.model.kind().feature_kind().is_some() && features.is_none() {
        return Err(Error::Data(format!(
            "{} needs a {} feature sidecar",
            ck.model.kind(),
            ck.model.kind().feature_kind().expect("checked")
        )));
    }
    let preds = predict(&ck.model, sentences, features)?;
    EvalReport::compute(sentences, &preds, &ck.metadata.inventory)
}
