use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::data::{Label, Sentence};
use crate::error::{Error, Result};
use crate::eval::{
    length_buckets, nested_samples, significance, write_attention_dump, AttentionRecord, BucketName, EvalReport,
    LengthEdges, LengthRow, ScoredSentences, SizeRow,
};

use super::checkpoint::Checkpoint;
use super::config::{ExperimentConfig, ModelKind};
use super::train::{predict, train, Dataset};

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub name: String,
    pub model: ModelKind,
    /// `None` on success, otherwise the failure message.
    pub error: Option<String>,
    pub report: Option<EvalReport>,
    pub best_dev_f1: Option<f64>,
    /// Paired-bootstrap p-value of the F1 difference to the baseline row.
    pub p_value: Option<f64>,
    #[serde(skip)]
    pub predictions: Option<Vec<Vec<Label>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub baseline: Option<String>,
    pub rows: Vec<MatrixRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

impl MatrixReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "name,model,status,precision,recall,f1,dev_f1,seen_f1,unseen_f1,multi_type_f1,single_type_f1,p_value_vs_baseline\n",
        );
        for r in &self.rows {
            let status = match &r.error {
                None => "ok".to_string(),
                Some(e) => format!("\"error: {}\"", e.replace('"', "'")),
            };
            let (p, rc, f) = r
                .report
                .as_ref()
                .map_or((None, None, None), |x| (Some(x.overall.precision), Some(x.overall.recall), Some(x.overall.f1)));
            let bucket = |b: BucketName| r.report.as_ref().and_then(|x| x.breakdown.get(b).f1);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.name,
                r.model,
                status,
                opt(p),
                opt(rc),
                opt(f),
                opt(r.best_dev_f1),
                opt(bucket(BucketName::Seen)),
                opt(bucket(BucketName::Unseen)),
                opt(bucket(BucketName::MultiType)),
                opt(bucket(BucketName::SingleType)),
                opt(r.p_value),
            );
        }
        out
    }
}

/// The text-only `bert_crf` config if present, else the first one.
fn baseline_index(configs: &[ExperimentConfig]) -> Option<usize> {
    configs
        .iter()
        .position(|c| c.model == ModelKind::BertCrf)
        .or((!configs.is_empty()).then_some(0))
}

/// Trains and tests every config on `data`; failures are recorded per row.
/// Writes `matrix.csv`, per-run reports and checkpoints when `out` is given.
pub fn run_matrix_on(configs: &[ExperimentConfig], data: &Dataset, out: Option<&Path>) -> Result<MatrixReport> {
    if configs.is_empty() {
        return Err(Error::Config("matrix has no configs".into()));
    }
    if data.test.is_empty() {
        return Err(Error::Data("matrix needs a non-empty test split".into()));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        let name = cfg.name();
        info!("matrix: training {name}");
        let run = || -> Result<(Checkpoint, Vec<Vec<Label>>, EvalReport)> {
            let outcome = train(cfg, data)?;
            let ck = outcome.checkpoint;
            let features = data.features(cfg.model.feature_kind());
            let preds = predict(&ck.model, &data.test, features)?;
            let report = EvalReport::compute(&data.test, &preds, &ck.metadata.inventory)?;
            if let Some(dir) = out {
                ck.save(dir.join(format!("{name}.ckpt")))?;
                std::fs::write(dir.join(format!("{name}.report.json")), report.to_json()?)?;
            }
            Ok((ck, preds, report))
        };
        rows.push(match run() {
            Ok((ck, preds, report)) => MatrixRow {
                name,
                model: cfg.model,
                error: None,
                best_dev_f1: ck.metadata.dev_f1_history.get(ck.metadata.best_epoch.wrapping_sub(1)).copied(),
                report: Some(report),
                p_value: None,
                predictions: Some(preds),
            },
            Err(e) => {
                warn!("matrix: {name} failed: {e}");
                MatrixRow {
                    name,
                    model: cfg.model,
                    error: Some(e.to_string()),
                    report: None,
                    best_dev_f1: None,
                    p_value: None,
                    predictions: None,
                }
            }
        });
    }

    let base = baseline_index(configs).expect("non-empty");
    let base_scored = match &rows[base].predictions {
        Some(p) => Some(ScoredSentences::new(&data.test, p)?),
        None => None,
    };
    if let Some(b) = &base_scored {
        let seed = configs[base].seed;
        let resamples = configs[base].ablation.bootstrap_resamples;
        for (i, row) in rows.iter_mut().enumerate() {
            if i == base {
                continue;
            }
            if let Some(p) = &row.predictions {
                let a = ScoredSentences::new(&data.test, p)?;
                row.p_value = Some(significance(&a, b, resamples, seed)?);
            }
        }
    }
    let report = MatrixReport {
        baseline: Some(rows[base].name.clone()),
        rows,
    };
    if let Some(dir) = out {
        std::fs::write(dir.join("matrix.csv"), report.to_csv())?;
    }
    Ok(report)
}

/// Loads every `*.json` config in `dir` (sorted by file name).
pub fn load_configs(dir: impl AsRef<Path>) -> Result<Vec<ExperimentConfig>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no .json configs in {}", dir.display())));
    }
    paths.iter().map(ExperimentConfig::load).collect()
}

/// `matrix --configs <dir> --out <dir>`: all configs must share data paths.
pub fn run_matrix(config_dir: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<MatrixReport> {
    let configs = load_configs(config_dir)?;
    if configs.iter().any(|c| c.data != configs[0].data) {
        return Err(Error::Config("matrix configs must share data paths".into()));
    }
    let data = Dataset::load(&configs[0])?;
    run_matrix_on(&configs, &data, Some(out.as_ref()))
}

/// The config's model plus, if different, its text-only baseline.
fn with_baseline(config: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let mut out = vec![config.clone()];
    let base = config.model.baseline();
    if base != config.model {
        let mut b = config.clone();
        b.model = base;
        b.name = None;
        b.feature_kind = None;
        b.caption = None;
        out.push(b);
    }
    out
}

/// Test-split F1 per sentence-length bucket for the model and its baseline,
/// pooled over the configured seeds.
pub fn ablate_length(config: &ExperimentConfig, data: &Dataset) -> Result<Vec<LengthRow>> {
    let edges = LengthEdges(config.ablation.length_edges.clone());
    let seeds = config.seeds();
    let pooled: Vec<Sentence> = seeds.iter().flat_map(|_| data.test.iter().cloned()).collect();
    let mut models = Vec::new();
    for cfg in with_baseline(config) {
        let mut preds = Vec::with_capacity(pooled.len());
        for &seed in &seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            info!("length ablation: {} seed {seed}", c.name());
            let ck = train(&c, data)?.checkpoint;
            preds.extend(predict(&ck.model, &data.test, data.features(c.model.feature_kind()))?);
        }
        models.push((cfg.name(), preds));
    }
    length_buckets(&pooled, &models, &edges)
}

/// Test F1 after training on nested fractions of the training split, for the
/// model and its baseline, once per seed. Dev and test stay fixed.
pub fn ablate_size(config: &ExperimentConfig, data: &Dataset) -> Result<Vec<SizeRow>> {
    let fractions = &config.ablation.fractions;
    let mut rows = Vec::new();
    for seed in config.seeds() {
        let samples = nested_samples(data.train.len(), fractions, seed)?;
        for (&fraction, idx) in fractions.iter().zip(&samples) {
            let subset = Dataset {
                train: idx.iter().map(|&i| data.train[i].clone()).collect(),
                ..data.clone()
            };
            for cfg in with_baseline(config) {
                let mut c = cfg.clone();
                c.seed = seed;
                info!("size ablation: {} fraction {fraction} seed {seed}", c.name());
                let ck = train(&c, &subset)?.checkpoint;
                let preds = predict(&ck.model, &data.test, data.features(c.model.feature_kind()))?;
                rows.push(SizeRow {
                    model: c.name(),
                    fraction,
                    seed,
                    train_sentences: subset.train.len(),
                    f1: ScoredSentences::new(&data.test, &preds)?.f1(),
                });
            }
        }
    }
    Ok(rows)
}

/// Decodes `sentences` and collects each one's fusion diagnostics.
pub fn attention_records(
    ck: &Checkpoint,
    sentences: &[Sentence],
    features: Option<&crate::data::FeatureTable>,
) -> Result<Vec<AttentionRecord>> {
    let inputs = ck.model.inputs(sentences, features)?;
    sentences
        .iter()
        .zip(&inputs)
        .map(|(s, x)| {
            let p = ck.model.predict(x)?;
            Ok(AttentionRecord {
                sentence_id: s.id.clone(),
                tokens: s.tokens.clone(),
                gold: s.labels.clone(),
                predicted: p.labels,
                diagnostics: p.diagnostics,
            })
        })
        .collect()
}

pub fn dump_attention(
    ck: &Checkpoint,
    sentences: &[Sentence],
    features: Option<&crate::data::FeatureTable>,
    out: impl AsRef<Path>,
) -> Result<Vec<AttentionRecord>> {
    let records = attention_records(ck, sentences, features)?;
    write_attention_dump(out, &records)?;
    Ok(records)
}
