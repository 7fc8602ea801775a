//! Outcome models: a single text encoder with a linear head, and the
//! three-encoder model merged by a fusion mechanism.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::capability::{CapabilityPredictor, CapabilityTarget, PredictorInput, SharedHead, TargetCache};
use crate::corpus::{author_fragments, PaperRecord};
use crate::encoder::{compose_input, compose_input_budgeted, Encoder, EncoderConfig, Field};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionKind, FusionSettings};
use crate::nn::{ForwardCtx, Linear};
use crate::params::{ParamGroup, ParamStore};
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Rating,
    Acceptance,
}

impl Objective {
    /// Venue text conditions rating prediction only.
    pub fn include_venue(self) -> bool {
        self == Objective::Rating
    }

    pub fn label(self, record: &PaperRecord) -> Option<f64> {
        match self {
            Objective::Rating => record.avg_rating,
            Objective::Acceptance => record.accepted.map(|a| if a { 1.0 } else { 0.0 }),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Rating => "rating",
            Objective::Acceptance => "acceptance",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "rating" => Ok(Objective::Rating),
            "acceptance" | "accept" => Ok(Objective::Acceptance),
            other => Err(Error::Config(format!("unknown objective {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CapabilitySource {
    Explicit,
    Predicted,
}

impl CapabilitySource {
    pub fn as_str(self) -> &'static str {
        match self {
            CapabilitySource::Explicit => "explicit",
            CapabilitySource::Predicted => "predicted",
        }
    }
}

/// Tokenised model input for one record. Branches a model does not use are
/// left empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub record_id: String,
    pub label: f64,
    pub composite: Vec<u32>,
    pub author: Vec<u32>,
    pub capability: Vec<u32>,
    pub idea: Vec<u32>,
    pub predictor: Option<PredictorInput>,
}

/// Capability branch of the three-way model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum CapabilityBranch {
    Explicit(Encoder),
    Predicted(CapabilityPredictor),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SingleModel {
    pub fields: Vec<Field>,
    pub encoder: Encoder,
    pub head: Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThreeWayModel {
    pub author: Encoder,
    pub capability: CapabilityBranch,
    pub idea: Encoder,
    pub fusion: Fusion,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Model {
    Single(SingleModel),
    ThreeWay(ThreeWayModel),
}

/// Parameter-name prefixes used by the constructors.
pub mod names {
    pub const SINGLE: &str = "single";
    pub const SINGLE_HEAD: &str = "single_head";
    pub const AUTHOR: &str = "author";
    pub const CAPABILITY: &str = "capability";
    pub const PREDICTOR: &str = "predictor";
    pub const IDEA: &str = "idea";
    pub const FUSION: &str = "fusion";
}

impl Model {
    pub fn single<R: Rng + ?Sized>(
        store: &mut ParamStore,
        fields: &[Field],
        config: &EncoderConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::Config("single-encoder model needs at least one field".into()));
        }
        let encoder = Encoder::new(store, names::SINGLE, config, vocab_size, rng)?;
        let head = Linear::new(
            store,
            names::SINGLE_HEAD,
            config.hidden_size,
            1,
            true,
            config.init_std,
            ParamGroup::Head,
            rng,
        );
        Ok(Model::Single(SingleModel {
            fields: fields.to_vec(),
            encoder,
            head,
        }))
    }

    /// Three-way model. With `predictor` set, the capability branch is a
    /// bi-level predictor built from that configuration instead of an
    /// encoder over explicit capability text.
    #[allow(clippy::too_many_arguments)]
    pub fn three_way<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &EncoderConfig,
        fusion: FusionKind,
        fusion_settings: FusionSettings,
        predictor: Option<&crate::capability::BiLevelConfig>,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let author = Encoder::new(store, names::AUTHOR, config, vocab_size, rng)?;
        let capability = match predictor {
            None => CapabilityBranch::Explicit(Encoder::new(store, names::CAPABILITY, config, vocab_size, rng)?),
            Some(cfg) => {
                if cfg.target_dim != config.hidden_size {
                    return Err(Error::DimensionMismatch {
                        expected: config.hidden_size,
                        got: cfg.target_dim,
                    });
                }
                CapabilityBranch::Predicted(CapabilityPredictor::new(
                    store,
                    names::PREDICTOR,
                    cfg,
                    vocab_size,
                    rng,
                )?)
            }
        };
        let idea = Encoder::new(store, names::IDEA, config, vocab_size, rng)?;
        let fusion = Fusion::new(store, names::FUSION, fusion, config.hidden_size, fusion_settings, rng)?;
        Ok(Model::ThreeWay(ThreeWayModel {
            author,
            capability,
            idea,
            fusion,
        }))
    }

    pub fn capability_source(&self) -> Option<CapabilitySource> {
        match self {
            Model::Single(_) => None,
            Model::ThreeWay(m) => Some(match m.capability {
                CapabilityBranch::Explicit(_) => CapabilitySource::Explicit,
                CapabilityBranch::Predicted(_) => CapabilitySource::Predicted,
            }),
        }
    }

    /// Short architecture label, e.g. `single[author]` or `three-way/sa1`.
    pub fn describe(&self) -> String {
        match self {
            Model::Single(m) => format!(
                "single[{}]",
                m.fields.iter().map(|f| f.as_str()).collect::<Vec<_>>().join("+")
            ),
            Model::ThreeWay(m) => format!("three-way/{}", m.fusion.kind),
        }
    }

    pub fn fusion_variant(&self) -> String {
        match self {
            Model::Single(_) => "none".into(),
            Model::ThreeWay(m) => m.fusion.kind.key(),
        }
    }

    fn max_tokens(&self) -> usize {
        match self {
            Model::Single(m) => m.encoder.config.max_tokens,
            Model::ThreeWay(m) => m.author.config.max_tokens,
        }
    }

    /// Tokenises the branches this model reads. The label is taken from the
    /// record when present and zero otherwise.
    pub fn prepare(&self, record: &PaperRecord, vocab: &Vocab, objective: Objective) -> Result<Example> {
        let venue = objective.include_venue();
        let max = self.max_tokens();
        let mut ex = Example {
            record_id: record.record_id.clone(),
            label: objective.label(record).unwrap_or(0.0),
            ..Default::default()
        };
        match self {
            Model::Single(m) => {
                let text = compose_input_budgeted(record, &m.fields, venue, vocab, max)?;
                ex.composite = vocab.encode_with_cls(&text, max);
            }
            Model::ThreeWay(m) => {
                let author = compose_input_budgeted(record, &[Field::Author], venue, vocab, max)?;
                ex.author = vocab.encode_with_cls(&author, max);
                let idea = compose_input(record, &[Field::Idea], venue)?;
                ex.idea = vocab.encode_with_cls(&idea, max);
                match &m.capability {
                    CapabilityBranch::Explicit(_) => {
                        let cap = compose_input(record, &[Field::Capability], venue)?;
                        ex.capability = vocab.encode_with_cls(&cap, max);
                    }
                    CapabilityBranch::Predicted(p) => {
                        ex.predictor = Some(predictor_input(record, vocab, p.config.max_authors, venue)?);
                    }
                }
            }
        }
        Ok(ex)
    }

    /// Raw scalar output (`1 x 1`): rating, or acceptance logit.
    pub fn forward(&self, g: &mut Graph<'_>, ex: &Example, ctx: &mut ForwardCtx) -> Result<Var> {
        match self {
            Model::Single(m) => {
                let h = m.encoder.pooled(g, &ex.composite, ctx)?;
                Ok(m.head.forward(g, h))
            }
            Model::ThreeWay(m) => {
                let ha = m.author.pooled(g, &ex.author, ctx)?;
                let hc = match &m.capability {
                    CapabilityBranch::Explicit(enc) => enc.pooled(g, &ex.capability, ctx)?,
                    CapabilityBranch::Predicted(p) => {
                        let input = ex
                            .predictor
                            .as_ref()
                            .ok_or_else(|| Error::Precondition("example lacks predictor input".into()))?;
                        p.forward(g, input, ctx)?
                    }
                };
                let hi = m.idea.pooled(g, &ex.idea, ctx)?;
                Ok(m.fusion.forward(g, [ha, hc, hi], ctx)?.y)
            }
        }
    }

    /// Eval-mode raw output for one example.
    pub fn predict_raw(&self, store: &ParamStore, ex: &Example) -> Result<f64> {
        let mut g = Graph::new(store);
        let y = self.forward(&mut g, ex, &mut ForwardCtx::eval())?;
        let v = g.scalar(y);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("prediction for {}", ex.record_id)));
        }
        Ok(v)
    }
}

/// Bi-level predictor input: anonymised author fragments plus the idea text
/// (venue-prefixed when `include_venue`).
pub fn predictor_input(
    record: &PaperRecord,
    vocab: &Vocab,
    max_authors: usize,
    include_venue: bool,
) -> Result<PredictorInput> {
    if record.authors.is_empty() {
        return Err(Error::MissingField {
            record_id: record.record_id.clone(),
            field: "author".into(),
        });
    }
    let idea = compose_input(record, &[Field::Idea], include_venue)?;
    PredictorInput::new(vocab, &author_fragments(record, true), &idea, max_authors)
}

impl Model {
    pub fn predictor(&self) -> Option<&CapabilityPredictor> {
        match self {
            Model::ThreeWay(ThreeWayModel {
                capability: CapabilityBranch::Predicted(p),
                ..
            }) => Some(p),
            _ => None,
        }
    }

    /// The scalar bias added last in the forward pass, if any.
    pub fn output_bias(&self) -> Option<crate::params::ParamId> {
        match self {
            Model::Single(m) => m.head.bias,
            Model::ThreeWay(m) => m.fusion.bias.or(match &m.fusion.params {
                crate::fusion::FusionParams::Transformer { readout, .. } => readout.bias,
                _ => None,
            }),
        }
    }

    /// Sets the output bias to the label mean (rating) or the base-rate
    /// logit (acceptance) so early updates are not spent fitting the
    /// intercept. Returns false when the model has no output bias.
    pub fn init_output_bias(&self, store: &mut ParamStore, labels: &[f64], objective: Objective) -> bool {
        let Some(b) = self.output_bias() else {
            return false;
        };
        if labels.is_empty() {
            return false;
        }
        let m = labels.iter().sum::<f64>() / labels.len() as f64;
        let v = match objective {
            Objective::Rating => m,
            Objective::Acceptance => {
                let p = m.clamp(1e-3, 1.0 - 1e-3);
                (p / (1.0 - p)).ln()
            }
        };
        store.set_value(b, crate::tensor::Tensor::scalar(v));
        true
    }

    /// Frozen predictor targets from an explicit-capability three-way model:
    /// `c` from its capability encoder, `a` from its author encoder and
    /// `y_c` from its fusion readout.
    pub fn capability_targets(&self, store: &ParamStore, examples: &[Example]) -> Result<TargetCache> {
        let Model::ThreeWay(ThreeWayModel {
            author,
            capability: CapabilityBranch::Explicit(cap),
            fusion,
            ..
        }) = self
        else {
            return Err(Error::Precondition("targets need an explicit-capability three-way model".into()));
        };
        let head = SharedHead::from_fusion(store, fusion);
        let mut targets = std::collections::BTreeMap::new();
        let mut ctx = ForwardCtx::eval();
        for ex in examples {
            let mut g = Graph::new(store);
            let c = cap.pooled(&mut g, &ex.capability, &mut ctx)?;
            let a = author.pooled(&mut g, &ex.author, &mut ctx)?;
            let c = g.value(c).data().to_vec();
            let a = g.value(a).data().to_vec();
            if c.iter().chain(&a).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("target for {}", ex.record_id)));
            }
            let y_c = head.apply(&c);
            targets.insert(ex.record_id.clone(), CapabilityTarget { c, a, y_c });
        }
        Ok(TargetCache { head, targets })
    }

    /// Initialises a predicted-capability model from a trained
    /// explicit-capability one: author, idea and fusion weights are copied
    /// as-is, predictor level 1 from the author encoder and level 2 from the
    /// capability encoder. Returns the number of copied tensors.
    pub fn init_from_explicit(&self, store: &mut ParamStore, teacher: &Model, teacher_store: &ParamStore) -> Result<usize> {
        let (Some(p), Some(CapabilitySource::Explicit)) = (self.predictor(), teacher.capability_source()) else {
            return Err(Error::Precondition(
                "initialisation needs a predictor model and an explicit-capability teacher".into(),
            ));
        };
        let mut n = 0;
        for prefix in [names::AUTHOR, names::IDEA, names::FUSION] {
            n += store.copy_matching(teacher_store, &format!("{prefix}."), &format!("{prefix}."));
        }
        n += p.init_from_pretrained(store, names::PREDICTOR, teacher_store, names::AUTHOR, names::CAPABILITY);
        Ok(n)
    }
}

/// Per-example training loss on a raw model output.
pub fn objective_loss(g: &mut Graph<'_>, output: Var, label: f64, objective: Objective) -> Var {
    match objective {
        Objective::Rating => {
            let t = g.constant(crate::tensor::Tensor::scalar(label));
            g.squared_error(output, t)
        }
        Objective::Acceptance => g.bce_logits(output, label),
    }
}
