use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{FeatureKind, InputMode, VocabConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

/// The eight model configurations of the experiment matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    BertCrf,
    BertCmCrf,
    BertVamCrf,
    BertCamCrf,
    VbertCrf,
    VbertTamCrf,
    BertCaptionCrf,
    VbertCaptionCrf,
}

/// Feature choice in a config file; `none` means the model takes no image features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Features {
    None,
    Global,
    Regional,
}

impl Features {
    pub const ALL: [Features; 3] = [Features::None, Features::Global, Features::Regional];

    pub fn kind(self) -> Option<FeatureKind> {
        match self {
            Features::None => None,
            Features::Global => Some(FeatureKind::Global),
            Features::Regional => Some(FeatureKind::Regional),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    Cm,
    Vam,
    Cam,
    Tam,
}

impl ModelKind {
    pub const ALL: [ModelKind; 8] = [
        ModelKind::BertCrf,
        ModelKind::BertCmCrf,
        ModelKind::BertVamCrf,
        ModelKind::BertCamCrf,
        ModelKind::VbertCrf,
        ModelKind::VbertTamCrf,
        ModelKind::BertCaptionCrf,
        ModelKind::VbertCaptionCrf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::BertCrf => "bert_crf",
            ModelKind::BertCmCrf => "bert_cm_crf",
            ModelKind::BertVamCrf => "bert_vam_crf",
            ModelKind::BertCamCrf => "bert_cam_crf",
            ModelKind::VbertCrf => "vbert_crf",
            ModelKind::VbertTamCrf => "vbert_tam_crf",
            ModelKind::BertCaptionCrf => "bert_caption_crf",
            ModelKind::VbertCaptionCrf => "vbert_caption_crf",
        }
    }

    /// Image features the model consumes, if any.
    pub fn feature_kind(self) -> Option<FeatureKind> {
        match self {
            ModelKind::BertCmCrf | ModelKind::BertVamCrf | ModelKind::BertCamCrf => Some(FeatureKind::Global),
            ModelKind::VbertTamCrf => Some(FeatureKind::Regional),
            _ => None,
        }
    }

    pub fn uses_caption(self) -> bool {
        matches!(self, ModelKind::BertCaptionCrf | ModelKind::VbertCaptionCrf)
    }

    pub fn fusion(self) -> Option<FusionKind> {
        match self {
            ModelKind::BertCmCrf => Some(FusionKind::Cm),
            ModelKind::BertVamCrf => Some(FusionKind::Vam),
            ModelKind::BertCamCrf => Some(FusionKind::Cam),
            ModelKind::VbertTamCrf => Some(FusionKind::Tam),
            _ => None,
        }
    }

    /// Single-stream encoders own a region projection even when fed text only.
    pub fn single_stream(self) -> bool {
        matches!(self, ModelKind::VbertCrf | ModelKind::VbertTamCrf | ModelKind::VbertCaptionCrf)
    }

    pub fn input_mode(self) -> InputMode {
        if self.uses_caption() {
            InputMode::TextCaption
        } else if self == ModelKind::VbertTamCrf {
            InputMode::TextRegions
        } else {
            InputMode::Text
        }
    }

    /// The text-only model of the same encoder family.
    pub fn baseline(self) -> ModelKind {
        if self.single_stream() {
            ModelKind::VbertCrf
        } else {
            ModelKind::BertCrf
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: Some(5.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub global_features: Option<PathBuf>,
    pub regional_features: Option<PathBuf>,
}

impl DataPaths {
    pub fn features(&self, kind: FeatureKind) -> Option<&PathBuf> {
        match kind {
            FeatureKind::Global => self.global_features.as_ref(),
            FeatureKind::Regional => self.regional_features.as_ref(),
        }
    }

    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.train,
            &mut self.dev,
            &mut self.test,
            &mut self.global_features,
            &mut self.regional_features,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Settings for the length and training-size analyses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub fractions: Vec<f64>,
    /// Seeds for repeated runs; empty means the experiment seed only.
    pub seeds: Vec<u64>,
    pub length_edges: Vec<usize>,
    pub bootstrap_resamples: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            fractions: vec![0.1, 0.25, 0.5, 1.0],
            seeds: Vec::new(),
            length_edges: vec![8, 16, 24],
            bootstrap_resamples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Run name; defaults to the model name.
    pub name: Option<String>,
    pub model: ModelKind,
    pub encoder: EncoderConfig,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    /// Epochs without dev improvement tolerated before stopping; 0 stops at
    /// the first non-improving epoch.
    pub patience: usize,
    /// Stop as soon as dev F1 reaches this value.
    pub target_dev_f1: Option<f64>,
    pub batch_size: usize,
    pub seed: u64,
    pub data: DataPaths,
    /// Must agree with the model; derived from it when omitted.
    pub feature_kind: Option<Features>,
    /// Must agree with the model; derived from it when omitted.
    pub caption: Option<bool>,
    pub constrain_bio: bool,
    pub vocab: VocabConfig,
    pub caption_max_len: usize,
    pub max_chars: usize,
    /// Where `train` writes its checkpoint and reports.
    pub output_dir: Option<PathBuf>,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: None,
            model: ModelKind::BertCrf,
            encoder: EncoderConfig::default(),
            optimizer: AdamConfig::default(),
            epochs: 50,
            patience: 10,
            target_dev_f1: None,
            batch_size: 16,
            seed: 13,
            data: DataPaths::default(),
            feature_kind: None,
            caption: None,
            constrain_bio: true,
            vocab: VocabConfig::default(),
            caption_max_len: 16,
            max_chars: 16,
            output_dir: None,
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn for_model(model: ModelKind) -> Self {
        Self {
            model,
            ..Self::default()
        }
    }

    pub fn name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.model.to_string())
    }

    /// Reads a JSON config; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.resolve(base);
        if let Some(out) = &mut cfg.output_dir {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks the model / feature kind / caption pairing and numeric ranges.
    /// Data paths are checked separately, when data is loaded.
    pub fn validate(&self) -> Result<()> {
        validate_pairing(self.model, self.feature_kind, self.caption)?;
        self.encoder.validate()?;
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", o.lr)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(o.eps > 0.0) || o.weight_decay < 0.0 {
            return Err(Error::Config("Adam eps must be positive and weight decay non-negative".into()));
        }
        if o.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if self.caption_max_len == 0 || self.max_chars == 0 {
            return Err(Error::Config("caption_max_len and max_chars must be at least 1".into()));
        }
        if self.model.fusion() == Some(FusionKind::Cm) && self.encoder.d_model < 3 {
            return Err(Error::Config("bert_cm_crf needs d_model >= 3".into()));
        }
        if self.ablation.bootstrap_resamples < 1000 {
            return Err(Error::Config("bootstrap_resamples must be at least 1000".into()));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.ablation.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.ablation.seeds.clone()
        }
    }
}

/// Rejects every (model, feature kind, caption) combination other than the
/// one the model is defined with.
pub fn validate_pairing(model: ModelKind, features: Option<Features>, caption: Option<bool>) -> Result<()> {
    if let Some(f) = features {
        if model.feature_kind() != f.kind() {
            return Err(Error::Config(format!(
                "{model} expects {} image features, config says {}",
                model.feature_kind().map_or("no".to_string(), |k| k.to_string()),
                f.kind().map_or("none".to_string(), |k| k.to_string())
            )));
        }
    }
    if let Some(c) = caption {
        if c != model.uses_caption() {
            return Err(Error::Config(format!(
                "{model} {} captions",
                if model.uses_caption() { "requires" } else { "does not take" }
            )));
        }
    }
    Ok(())
}
