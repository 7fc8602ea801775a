//! Bi-level capability predictor and its training objective.
//!
//! Level 1 encodes every author fragment in one sequence, each fragment
//! opened by its own `[CLS]` and tagged with its author index as segment.
//! Level 2 reads the per-author vectors followed by the idea tokens (embedded
//! by level 2's own embedding layer) and projects its first output to the
//! target dimension.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::{select_authors, Encoder, EncoderConfig, PooledVector, SourceField};
use crate::error::{Error, Result};
use crate::fusion::Fusion;
use crate::nn::{ForwardCtx, Linear};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;
use crate::tokenizer::{Vocab, CLS};
use crate::training::TrainTask;

pub const DEFAULT_MAX_AUTHORS: usize = 16;
pub const DEFAULT_LAMBDA1: f64 = 0.2;
pub const DEFAULT_LAMBDA2: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiLevelConfig {
    pub max_authors: usize,
    pub level1: EncoderConfig,
    pub level2: EncoderConfig,
    /// Output dimension of the projection (the capability vector width).
    pub target_dim: usize,
}

impl BiLevelConfig {
    /// Both levels share `encoder`'s shape; level 1 gets one segment per
    /// author slot.
    pub fn from_encoder(encoder: &EncoderConfig, max_authors: usize) -> Self {
        Self {
            max_authors,
            level1: EncoderConfig {
                segment_count: max_authors.max(encoder.segment_count),
                ..encoder.clone()
            },
            level2: encoder.clone(),
            target_dim: encoder.hidden_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.level1.validate()?;
        self.level2.validate()?;
        if self.max_authors == 0 {
            return Err(Error::Config("max_authors must be positive".into()));
        }
        if self.level1.hidden_size != self.level2.hidden_size {
            return Err(Error::Config(format!(
                "level-1 width {} differs from level-2 embedding width {}",
                self.level1.hidden_size, self.level2.hidden_size
            )));
        }
        if self.level1.segment_count < self.max_authors {
            return Err(Error::Config(format!(
                "level-1 needs {} segments, has {}",
                self.max_authors, self.level1.segment_count
            )));
        }
        if self.level1.max_tokens < self.max_authors || self.level2.max_tokens <= self.max_authors {
            return Err(Error::Config("token budgets too small for max_authors".into()));
        }
        if self.target_dim == 0 {
            return Err(Error::Config("target_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Tokenised predictor input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorInput {
    /// Word ids per author fragment, without `[CLS]`.
    pub authors: Vec<Vec<u32>>,
    /// Idea word ids, without `[CLS]`.
    pub idea: Vec<u32>,
}

impl PredictorInput {
    /// Tokenises fragments (keeping at most `max_authors`, first and last
    /// preferred) and the idea text.
    pub fn new(vocab: &Vocab, fragments: &[String], idea: &str, max_authors: usize) -> Result<Self> {
        if fragments.is_empty() {
            return Err(Error::Precondition("at least one author fragment is required".into()));
        }
        if idea.trim().is_empty() {
            return Err(Error::Precondition("idea text must be non-empty".into()));
        }
        let authors = select_authors(fragments.len(), max_authors)
            .into_iter()
            .map(|i| vocab.encode(&fragments[i]))
            .collect();
        Ok(Self {
            authors,
            idea: vocab.encode(idea),
        })
    }
}

/// Level-1 token layout: ids, segment ids and the `[CLS]` position of each
/// author. Trailing fragments are truncated to fit `max_tokens`; every
/// author keeps its `[CLS]`.
pub fn level1_layout(authors: &[Vec<u32>], max_tokens: usize) -> Result<(Vec<u32>, Vec<usize>, Vec<usize>)> {
    if authors.is_empty() {
        return Err(Error::Precondition("at least one author fragment is required".into()));
    }
    if authors.len() > max_tokens {
        return Err(Error::Precondition(format!(
            "{} authors do not fit in {} tokens",
            authors.len(),
            max_tokens
        )));
    }
    let mut room = max_tokens - authors.len();
    let mut ids = Vec::new();
    let mut segments = Vec::new();
    let mut cls_positions = Vec::with_capacity(authors.len());
    for (k, frag) in authors.iter().enumerate() {
        cls_positions.push(ids.len());
        ids.push(CLS);
        segments.push(k);
        let take = frag.len().min(room);
        room -= take;
        ids.extend_from_slice(&frag[..take]);
        segments.extend(std::iter::repeat_n(k, take));
    }
    Ok((ids, segments, cls_positions))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CapabilityPredictor {
    pub config: BiLevelConfig,
    pub level1: Encoder,
    pub level2: Encoder,
    pub projection: Linear,
}

impl CapabilityPredictor {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: &BiLevelConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let level1 = Encoder::new(store, &format!("{name}.level1"), &config.level1, vocab_size, rng)?;
        let level2 = Encoder::new(store, &format!("{name}.level2"), &config.level2, vocab_size, rng)?;
        let projection = Linear::new(
            store,
            &format!("{name}.projection"),
            config.level2.hidden_size,
            config.target_dim,
            true,
            config.level2.init_std,
            ParamGroup::Head,
            rng,
        );
        // Start as a pass-through so the output keeps the scale of a pooled
        // encoder vector; the cosine terms of the loss do not pin it.
        if config.level2.hidden_size == config.target_dim {
            store.set_value(projection.weight, Tensor::identity(config.target_dim));
        }
        Ok(Self {
            config: config.clone(),
            level1,
            level2,
            projection,
        })
    }

    /// One `1 x d` vector per author, in input order.
    pub fn level1_author_encode(
        &self,
        g: &mut Graph<'_>,
        authors: &[Vec<u32>],
        ctx: &mut ForwardCtx,
    ) -> Result<Vec<Var>> {
        if authors.len() > self.config.max_authors {
            return Err(Error::Precondition(format!(
                "{} authors exceed max_authors {}",
                authors.len(),
                self.config.max_authors
            )));
        }
        let (ids, segments, cls) = level1_layout(authors, self.config.level1.max_tokens)?;
        let h = self.level1.forward(g, &ids, &segments, ctx)?;
        Ok(cls.into_iter().map(|p| g.row(h, p)).collect())
    }

    /// Predicted capability vector `ĉ` as a `1 x target_dim` node.
    pub fn forward(&self, g: &mut Graph<'_>, input: &PredictorInput, ctx: &mut ForwardCtx) -> Result<Var> {
        if input.idea.is_empty() {
            return Err(Error::Precondition("idea has no tokens".into()));
        }
        let authors = self.level1_author_encode(g, &input.authors, ctx)?;
        let k = authors.len();
        let room = self.config.level2.max_tokens - k;
        let idea = &input.idea[..input.idea.len().min(room)];
        let segments = vec![1; idea.len()];
        let idea_emb = self.level2.embed(g, idea, &segments, k, ctx)?;
        let mut rows = authors;
        rows.push(idea_emb);
        let x = g.concat_rows(&rows);
        let h = self.level2.run_layers(g, x, ctx);
        let first = g.row(h, 0);
        Ok(self.projection.forward(g, first))
    }

    pub fn predict(&self, store: &ParamStore, input: &PredictorInput) -> Result<PooledVector> {
        let mut g = Graph::new(store);
        let c = self.forward(&mut g, input, &mut ForwardCtx::eval())?;
        PooledVector::new(g.value(c).data().to_vec(), SourceField::Capability)
    }

    /// Copies level-1 weights from a pretrained author encoder and level-2
    /// weights from a pretrained capability encoder. Tables whose shapes
    /// differ (e.g. the segment table) are left as initialised.
    pub fn init_from_pretrained(
        &self,
        store: &mut ParamStore,
        name: &str,
        source: &ParamStore,
        author_prefix: &str,
        capability_prefix: &str,
    ) -> usize {
        store.copy_matching(source, &format!("{author_prefix}."), &format!("{name}.level1."))
            + store.copy_matching(source, &format!("{capability_prefix}."), &format!("{name}.level2."))
    }
}

/// Frozen targets for one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapabilityTarget {
    /// Capability representation from the frozen capability encoder.
    pub c: Vec<f64>,
    /// Author-only representation used as the anchor.
    pub a: Vec<f64>,
    /// `shared_head(c)`, cached.
    pub y_c: f64,
}

/// Frozen linear map `d -> 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedHead {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl SharedHead {
    pub fn zero(dim: usize) -> Self {
        Self {
            weight: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn apply(&self, v: &[f64]) -> f64 {
        self.weight.iter().zip(v).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }

    pub fn from_linear(store: &ParamStore, head: &Linear) -> Self {
        Self {
            weight: store.value(head.weight).data().to_vec(),
            bias: head.bias.map(|b| store.value(b).item()).unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub similarity: f64,
    pub anchor: f64,
    pub head: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.similarity + self.anchor + self.head
    }
}

fn cosine(a: &[f64], b: &[f64], what: &'static str) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm(what));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// `−cos(ĉ, c) + λ1·max(cos(ĉ, a), 0) + λ2·(head(ĉ) − head(c))²`.
pub fn capability_loss(
    c_hat: &[f64],
    target: &CapabilityTarget,
    head: &SharedHead,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossTerms> {
    for v in [&target.c, &target.a] {
        if v.len() != c_hat.len() {
            return Err(Error::DimensionMismatch {
                expected: c_hat.len(),
                got: v.len(),
            });
        }
    }
    let sim_c = cosine(c_hat, &target.c, "prediction or capability target")?;
    let sim_a = cosine(c_hat, &target.a, "prediction or author anchor")?;
    let diff = head.apply(c_hat) - target.y_c;
    Ok(LossTerms {
        similarity: -sim_c,
        anchor: lambda1 * sim_a.max(0.0),
        head: lambda2 * diff * diff,
    })
}

/// Graph form of [`capability_loss`]. `c_hat` is `1 x d`.
pub fn capability_loss_graph(
    g: &mut Graph<'_>,
    c_hat: Var,
    target: &CapabilityTarget,
    head: &SharedHead,
    lambda1: f64,
    lambda2: f64,
) -> Result<Var> {
    let d = g.value(c_hat).cols();
    if target.c.len() != d || target.a.len() != d || head.weight.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: target.c.len(),
        });
    }
    if g.value(c_hat).norm() == 0.0 {
        return Err(Error::ZeroNorm("prediction"));
    }
    let c = g.constant(Tensor::row_vector(&target.c));
    let a = g.constant(Tensor::row_vector(&target.a));
    let w = g.constant(Tensor::row_vector(&head.weight));
    let sim_c = g.cosine(c_hat, c);
    let sim_a = g.cosine(c_hat, a);
    let anchor = g.relu(sim_a);
    let anchor = g.scale(anchor, lambda1);
    let prod = g.mul(c_hat, w);
    let y_hat = g.sum_all(prod);
    // head(ĉ) − head(c): the bias cancels
    let y_c = g.constant(Tensor::scalar(target.y_c - head.bias));
    let head_term = g.squared_error(y_hat, y_c);
    let head_term = g.scale(head_term, lambda2);
    let neg = g.scale(sim_c, -1.0);
    let l = g.add(neg, anchor);
    Ok(g.add(l, head_term))
}

impl SharedHead {
    /// The fusion readout as a frozen head, or a zero head when the fusion
    /// variant has no single linear readout.
    pub fn from_fusion(store: &ParamStore, fusion: &Fusion) -> Self {
        match fusion.readout_weights(store) {
            Some((weight, bias)) => Self { weight, bias },
            None => Self::zero(fusion.dim),
        }
    }
}

/// One predictor training example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorItem {
    pub record_id: String,
    pub input: PredictorInput,
    pub target: CapabilityTarget,
}

/// Frozen targets keyed by record id, with the head used to compute `y_c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetCache {
    pub head: SharedHead,
    pub targets: BTreeMap<String, CapabilityTarget>,
}

impl TargetCache {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Pairs predictor inputs with their cached targets.
    pub fn items(&self, inputs: Vec<(String, PredictorInput)>) -> Result<Vec<PredictorItem>> {
        inputs
            .into_iter()
            .map(|(record_id, input)| {
                let target = self
                    .targets
                    .get(&record_id)
                    .cloned()
                    .ok_or_else(|| Error::Precondition(format!("no cached target for {record_id}")))?;
                Ok(PredictorItem {
                    record_id,
                    input,
                    target,
                })
            })
            .collect()
    }
}

/// Predictor pretraining against frozen targets.
pub struct PredictorTask<'a> {
    pub predictor: &'a CapabilityPredictor,
    pub head: SharedHead,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl TrainTask for PredictorTask<'_> {
    type Item = PredictorItem;

    fn loss(&self, g: &mut Graph<'_>, item: &PredictorItem, ctx: &mut ForwardCtx) -> Result<Var> {
        let c_hat = self.predictor.forward(g, &item.input, ctx)?;
        capability_loss_graph(g, c_hat, &item.target, &self.head, self.lambda1, self.lambda2)
    }
}
