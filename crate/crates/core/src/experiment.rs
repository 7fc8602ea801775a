//! End-to-end runs shared by the CLI and the integration tests: split
//! resolution, vocabulary building, outcome-model training and the
//! predicted-capability recipe (teacher targets, predictor pretraining,
//! fine-tuning).

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::capability::{BiLevelConfig, PredictorTask, DEFAULT_LAMBDA1, DEFAULT_LAMBDA2, DEFAULT_MAX_AUTHORS};
use crate::corpus::{DatasetSplit, PaperRecord};
use crate::encoder::{compose_input, EncoderConfig, Field};
use crate::error::{Error, Result};
use crate::fusion::{FusionKind, FusionSettings};
use crate::model::{predictor_input, Example, Model, Objective};
use crate::params::ParamStore;
use crate::service::TrainedModel;
use crate::tokenizer::Vocab;
use crate::training::{fit, train_outcome_model, EpochMetrics, FitOutcome, TrainConfig, TrialResult};

/// Records of one split, in split order.
#[derive(Debug, Clone)]
pub struct Parts {
    pub train: Vec<PaperRecord>,
    pub val: Vec<PaperRecord>,
    pub test: Vec<PaperRecord>,
}

pub fn partition(records: &[PaperRecord], split: &DatasetSplit) -> Result<Parts> {
    let index: HashMap<&str, &PaperRecord> = records.iter().map(|r| (r.record_id.as_str(), r)).collect();
    let pick = |ids: &[String]| {
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|r| (*r).clone())
                    .ok_or_else(|| Error::Precondition(format!("split references unknown record {id}")))
            })
            .collect::<Result<Vec<_>>>()
    };
    Ok(Parts {
        train: pick(&split.train)?,
        val: pick(&split.val)?,
        test: pick(&split.test)?,
    })
}

/// Vocabulary over every text field the models read, venue included.
pub fn build_vocab(id: &str, records: &[PaperRecord], min_count: usize) -> Vocab {
    let mut texts = Vec::with_capacity(records.len() * 2);
    for r in records {
        for f in [Field::Title, Field::Abstract, Field::Author, Field::Capability, Field::Idea] {
            if let Ok(t) = compose_input(r, &[f], false) {
                texts.push(t);
            }
        }
        texts.push(format!("venue: {}", r.venue));
    }
    Vocab::build(id, texts.iter().map(String::as_str), min_count)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Single,
    ThreeWay,
    CapPred,
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Arch::Single),
            "three-way" => Ok(Arch::ThreeWay),
            "cap-pred" => Ok(Arch::CapPred),
            other => Err(Error::Config(format!("unknown architecture {other}"))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Single => "single",
            Arch::ThreeWay => "three-way",
            Arch::CapPred => "cap-pred",
        })
    }
}

/// Settings for the predicted-capability recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub max_authors: usize,
    pub pretrain_epochs: usize,
    /// Multiplier on both learning rates for the end-to-end fine-tune. The
    /// copied teacher weights sit near a minimum for explicit capability
    /// text, and a larger step moves them to the predictor's output faster.
    pub finetune_lr_scale: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            max_authors: DEFAULT_MAX_AUTHORS,
            pretrain_epochs: 8,
            finetune_lr_scale: 2.0,
            lambda1: DEFAULT_LAMBDA1,
            lambda2: DEFAULT_LAMBDA2,
        }
    }
}

fn prepare_all(model: &Model, vocab: &Vocab, objective: Objective, records: &[PaperRecord]) -> Result<Vec<Example>> {
    records.iter().map(|r| model.prepare(r, vocab, objective)).collect()
}

/// Result of one training run.
pub struct RunOutput {
    pub trained: TrainedModel,
    pub trial: TrialResult,
    pub fit: FitOutcome,
    /// Predictor pretraining history for `cap-pred` runs.
    pub pretrain: Option<FitOutcome>,
}

/// Trains a single-encoder or explicit three-way model.
#[allow(clippy::too_many_arguments)]
pub fn train_model(
    model_id: &str,
    arch: &Arch,
    fields: &[Field],
    fusion: FusionKind,
    encoder: &EncoderConfig,
    config: &TrainConfig,
    vocab: &Vocab,
    parts: &Parts,
    seed: u64,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<RunOutput> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let settings = FusionSettings {
        output_bias: true,
        ..FusionSettings::default()
    };
    let model = match arch {
        Arch::Single => Model::single(&mut store, fields, encoder, vocab.len(), &mut rng)?,
        Arch::ThreeWay => Model::three_way(&mut store, encoder, fusion, settings, None, vocab.len(), &mut rng)?,
        Arch::CapPred => {
            return Err(Error::Config("cap-pred runs need a teacher; use train_predicted".into()));
        }
    };
    let obj = config.objective;
    let train = prepare_all(&model, vocab, obj, &parts.train)?;
    let val = prepare_all(&model, vocab, obj, &parts.val)?;
    let test = prepare_all(&model, vocab, obj, &parts.test)?;
    let labels: Vec<f64> = train.iter().map(|e| e.label).collect();
    model.init_output_bias(&mut store, &labels, obj);
    let (trial, fit) = train_outcome_model(&model, &mut store, &train, &val, &test, config, seed, on_epoch)?;
    Ok(RunOutput {
        trained: TrainedModel {
            model_id: model_id.into(),
            objective: obj,
            model,
            store,
            vocab: vocab.clone(),
        },
        trial,
        fit,
        pretrain: None,
    })
}

/// Replaces the teacher's explicit capability branch with a bi-level
/// predictor: targets come from the frozen teacher on train and val, the
/// predictor is pretrained on the capability loss, and the whole model is
/// then fine-tuned on the teacher's objective.
pub fn train_predicted(
    model_id: &str,
    teacher: &TrainedModel,
    predictor: &PredictorConfig,
    config: &TrainConfig,
    parts: &Parts,
    seed: u64,
    mut on_epoch: impl FnMut(&str, &EpochMetrics),
) -> Result<RunOutput> {
    let crate::model::Model::ThreeWay(t) = &teacher.model else {
        return Err(Error::Precondition("teacher must be a three-way model".into()));
    };
    if config.objective != teacher.objective {
        return Err(Error::Config(format!(
            "teacher was trained for {}, run asks for {}",
            teacher.objective, config.objective
        )));
    }
    let vocab = &teacher.vocab;
    let obj = config.objective;
    let encoder = t.author.config.clone();
    let bilevel = BiLevelConfig::from_encoder(&encoder, predictor.max_authors);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let settings = FusionSettings {
        output_bias: t.fusion.bias.is_some(),
        dropout: t.fusion.dropout,
        ..FusionSettings::default()
    };
    let model = Model::three_way(&mut store, &encoder, t.fusion.kind, settings, Some(&bilevel), vocab.len(), &mut rng)?;
    let copied = model.init_from_explicit(&mut store, &teacher.model, &teacher.store)?;
    log::info!("initialised {copied} tensors from teacher {}", teacher.model_id);

    let explicit = |rs: &[PaperRecord]| prepare_all(&teacher.model, vocab, obj, rs);
    let mut teacher_examples = explicit(&parts.train)?;
    teacher_examples.extend(explicit(&parts.val)?);
    let targets = teacher.model.capability_targets(&teacher.store, &teacher_examples)?;
    let inputs = |rs: &[PaperRecord]| {
        rs.iter()
            .map(|r| Ok((r.record_id.clone(), predictor_input(r, vocab, bilevel.max_authors, obj.include_venue())?)))
            .collect::<Result<Vec<_>>>()
    };
    let p_train = targets.items(inputs(&parts.train)?)?;
    let p_val = targets.items(inputs(&parts.val)?)?;
    let task = PredictorTask {
        predictor: model.predictor().expect("predictor branch"),
        head: targets.head.clone(),
        lambda1: predictor.lambda1,
        lambda2: predictor.lambda2,
    };
    let pre_cfg = TrainConfig {
        epochs: predictor.pretrain_epochs,
        ..config.clone()
    };
    let pretrain = fit(&mut store, &task, &p_train, &p_val, &pre_cfg, seed, |m| on_epoch("pretrain", m))?;

    let train = prepare_all(&model, vocab, obj, &parts.train)?;
    let val = prepare_all(&model, vocab, obj, &parts.val)?;
    let test = prepare_all(&model, vocab, obj, &parts.test)?;
    let ft_cfg = TrainConfig {
        lr_backbone: config.lr_backbone * predictor.finetune_lr_scale,
        lr_head: config.lr_head * predictor.finetune_lr_scale,
        ..config.clone()
    };
    let (trial, fit) = train_outcome_model(&model, &mut store, &train, &val, &test, &ft_cfg, seed, |m| {
        on_epoch("finetune", m)
    })?;
    Ok(RunOutput {
        trained: TrainedModel {
            model_id: model_id.into(),
            objective: obj,
            model,
            store,
            vocab: vocab.clone(),
        },
        trial,
        fit,
        pretrain: Some(pretrain),
    })
}
