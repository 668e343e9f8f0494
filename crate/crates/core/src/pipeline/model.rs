use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crf::{viterbi, CrfLayer, Emissions};
use crate::data::{make_batches, BatchConfig, FeatureTable, Label, Sentence, Vocab};
use crate::encoder::{Dropout, Encoder, EncoderConfig, EncoderInput, LstmQuery};
use crate::error::{Error, Result};
use crate::fusion::{fuse_tam, Cam, Cm, Diagnostic, Vam};
use crate::tensor::{Graph, ParamStore, Var};

use super::config::{ExperimentConfig, FusionKind, ModelKind};

/// Everything needed to rebuild a model's parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub encoder: EncoderConfig,
    /// Width of the image vectors the model was built for.
    pub image_dim: Option<usize>,
    pub constrain_bio: bool,
    pub caption_max_len: usize,
    pub max_chars: usize,
}

impl ModelSpec {
    pub fn from_config(config: &ExperimentConfig, image_dim: Option<usize>) -> Result<Self> {
        match (config.model.feature_kind(), image_dim) {
            (Some(kind), None) => {
                return Err(Error::Data(format!("{} needs {kind} features", config.model)));
            }
            (None, Some(_)) => {
                return Err(Error::contract(format!("{} takes no image features", config.model)));
            }
            _ => {}
        }
        Ok(Self {
            kind: config.model,
            encoder: config.encoder,
            image_dim,
            constrain_bio: config.constrain_bio,
            caption_max_len: config.caption_max_len,
            max_chars: config.max_chars,
        })
    }
}

#[derive(Debug, Clone)]
pub enum Fusion {
    None,
    Cm(Cm),
    Vam { vam: Vam, query: LstmQuery },
    Cam(Cam),
    Tam,
}

/// Emission scores for the word positions of one row, plus whatever the
/// fusion module exposes.
#[derive(Debug, Clone)]
pub struct Forward {
    pub emissions: Var,
    pub diagnostics: BTreeMap<String, Diagnostic>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<Label>,
    pub score: f64,
    pub diagnostics: BTreeMap<String, Diagnostic>,
}

/// Encoder, optional fusion module and CRF over one parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub fusion: Fusion,
    pub crf: CrfLayer,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(spec: ModelSpec, vocab: Vocab, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = spec.encoder.d_model;
        let fusion_kind = spec.kind.fusion();
        let region_dim = if fusion_kind == Some(FusionKind::Tam) {
            spec.image_dim
        } else {
            None
        };
        let encoder = Encoder::new(&mut store, spec.encoder, vocab.len(), vocab.num_chars(), region_dim, &mut rng)?;
        let dim = || spec.image_dim.ok_or_else(|| Error::contract("fusion model without image_dim"));
        let fusion = match fusion_kind {
            None => Fusion::None,
            Some(FusionKind::Cm) => Fusion::Cm(Cm::new(&mut store, d, spec.encoder.char_filters, dim()?, &mut rng)?),
            Some(FusionKind::Vam) => Fusion::Vam {
                vam: Vam::new(&mut store, d, dim()?, &mut rng)?,
                query: LstmQuery::new(&mut store, "fusion.vam.query", d, &mut rng)?,
            },
            Some(FusionKind::Cam) => Fusion::Cam(Cam::new(&mut store, d, dim()?, &mut rng)?),
            Some(FusionKind::Tam) => {
                dim()?;
                Fusion::Tam
            }
        };
        let crf = CrfLayer::new(&mut store, "crf", d, vocab.num_labels(), &mut rng)?;
        Ok(Self {
            spec,
            vocab,
            store,
            encoder,
            fusion,
            crf,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn batch_config(&self, batch_size: usize) -> BatchConfig {
        BatchConfig {
            mode: self.spec.kind.input_mode(),
            image_kind: self.spec.kind.feature_kind(),
            batch_size,
            caption_max_len: self.spec.caption_max_len,
            max_chars: self.spec.max_chars,
            max_len: self.spec.encoder.max_len,
        }
    }

    /// Unpadded encoder rows for `sentences`, in order.
    pub fn inputs(&self, sentences: &[Sentence], features: Option<&FeatureTable>) -> Result<Vec<EncoderInput>> {
        if let (Some(kind), Some(table)) = (self.spec.kind.feature_kind(), features) {
            if table.kind.is_some_and(|k| k != kind) {
                return Err(Error::Data(format!("{} needs {kind} features, got a {} table", self.kind(), table.kind.unwrap())));
            }
            if table.dim().is_some_and(|d| Some(d) != self.spec.image_dim) {
                return Err(Error::Data(format!(
                    "feature dimension {} does not match the model's {:?}",
                    table.dim().unwrap_or(0),
                    self.spec.image_dim
                )));
            }
        }
        let batches = make_batches(sentences, features, &self.vocab, &self.batch_config(64))?;
        Ok(batches
            .iter()
            .flat_map(|b| (0..b.len()).map(move |i| EncoderInput::from_batch(b, i)))
            .collect())
    }

    /// Builds the emission scores of one row on `g`, which must borrow `self.store`.
    pub fn forward(&self, g: &mut Graph<'_>, input: &EncoderInput, dropout: Option<&mut Dropout<'_>>) -> Result<Forward> {
        let hs = self.encoder.encode(g, input, dropout)?;
        let words = input.word_positions();
        let image = || {
            input
                .image
                .as_deref()
                .ok_or_else(|| Error::Data(format!("{} row without image features", self.kind())))
        };
        let (states, diagnostics) = match &self.fusion {
            Fusion::None => (g.gather_rows(hs.h, &words)?, BTreeMap::new()),
            Fusion::Cm(cm) => {
                let wh = g.gather_rows(hs.h, &words)?;
                let ch = g.gather_rows(hs.chars, &words)?;
                let out = cm.fuse(g, wh, ch, image()?)?;
                (out.m, out.diagnostics)
            }
            Fusion::Vam { vam, query } => {
                let wh = g.gather_rows(hs.h, &words)?;
                let mask = vec![true; words.len()];
                let q = query.query(g, wh, &mask)?;
                let out = vam.fuse(g, wh, q, image()?)?;
                (out.m, out.diagnostics)
            }
            Fusion::Cam(cam) => {
                let wh = g.gather_rows(hs.h, &words)?;
                let out = cam.fuse(g, wh, image()?)?;
                (out.m, out.diagnostics)
            }
            Fusion::Tam => {
                let out = fuse_tam(g, &hs, input)?;
                (out.m, out.diagnostics)
            }
        };
        let emissions = self.crf.emissions(g, states)?;
        Ok(Forward { emissions, diagnostics })
    }

    /// Negative log-likelihood of `gold` for one row.
    pub fn loss(&self, g: &mut Graph<'_>, input: &EncoderInput, gold: &[usize], dropout: Option<&mut Dropout<'_>>) -> Result<Var> {
        let f = self.forward(g, input, dropout)?;
        self.crf.nll(g, f.emissions, gold)
    }

    /// Raw emission scores, row-major `words × labels`.
    pub fn emission_scores(&self, input: &EncoderInput) -> Result<Vec<f64>> {
        let mut g = Graph::with_params(&self.store);
        let f = self.forward(&mut g, input, None)?;
        Ok(g.value(f.emissions).to_vec())
    }

    /// Viterbi decoding of one row.
    pub fn predict(&self, input: &EncoderInput) -> Result<Prediction> {
        let mut g = Graph::with_params(&self.store);
        g.set_nan_guard(true);
        let f = self.forward(&mut g, input, None)?;
        let em = Emissions::from_tensor(&g.tensor(f.emissions))?;
        let (path, score) = viterbi(&em, &self.crf.params(&self.store), self.spec.constrain_bio)?;
        let labels = path
            .into_iter()
            .map(|i| self.vocab.label(i).ok_or_else(|| Error::contract(format!("label id {i} outside the label set"))))
            .collect::<Result<_>>()?;
        Ok(Prediction {
            labels,
            score,
            diagnostics: f.diagnostics,
        })
    }

    pub fn predict_all(&self, inputs: &[EncoderInput]) -> Result<Vec<Vec<Label>>> {
        inputs.iter().map(|x| self.predict(x).map(|p| p.labels)).collect()
    }

    /// Forces the co-attention filtration gate to a constant; no-op for
    /// other fusion modules.
    pub fn set_filtration_override(&mut self, value: Option<f64>) {
        if let Fusion::Cam(cam) = &mut self.fusion {
            cam.filtration_override = value;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic, Signal, SynthConfig};
    use crate::data::VocabConfig;

    pub(crate) fn small_encoder() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_len: 48,
            char_dim: 4,
            char_filters: 4,
            dropout: 0.0,
        }
    }

    #[test]
    fn every_model_kind_builds_and_decodes() {
        let corpus = generate_synthetic(&SynthConfig {
            n_train: 12,
            n_dev: 4,
            n_test: 4,
            feature_dim: 8,
            ..SynthConfig::default()
        })
        .unwrap();
        let vocab = Vocab::build(&corpus.train, &VocabConfig::default()).unwrap();
        let global = corpus.global_table();
        let regional = corpus.regional_table();
        for kind in ModelKind::ALL {
            let mut cfg = ExperimentConfig::for_model(kind);
            cfg.encoder = small_encoder();
            let table = kind.feature_kind().map(|k| match k {
                crate::data::FeatureKind::Global => &global,
                crate::data::FeatureKind::Regional => &regional,
            });
            let spec = ModelSpec::from_config(&cfg, table.and_then(|t| t.dim())).unwrap();
            let model = Model::new(spec, vocab.clone(), 3).unwrap();
            let inputs = model.inputs(&corpus.test, table).unwrap();
            for (x, s) in inputs.iter().zip(&corpus.test) {
                let p = model.predict(x).unwrap();
                assert_eq!(p.labels.len(), s.len(), "{kind}");
                assert!(crate::data::is_valid_bio(&p.labels));
            }
        }
    }

    #[test]
    fn missing_features_is_a_data_error() {
        let corpus = generate_synthetic(&SynthConfig {
            n_train: 6,
            n_dev: 2,
            n_test: 2,
            signal: Signal::Region,
            ..SynthConfig::default()
        })
        .unwrap();
        let vocab = Vocab::build(&corpus.train, &VocabConfig::default()).unwrap();
        let mut cfg = ExperimentConfig::for_model(ModelKind::BertVamCrf);
        cfg.encoder = small_encoder();
        let spec = ModelSpec::from_config(&cfg, Some(corpus.global_table().dim().unwrap())).unwrap();
        let model = Model::new(spec, vocab, 0).unwrap();
        assert!(matches!(model.inputs(&corpus.test, None), Err(Error::Data(_))));
        assert!(matches!(
            model.inputs(&corpus.test, Some(&corpus.regional_table())),
            Err(Error::Data(_))
        ));
        assert!(matches!(ModelSpec::from_config(&cfg, None), Err(Error::Data(_))));
    }
}
