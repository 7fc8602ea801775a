//! Request/response types for the prediction service, the scoring trait it
//! runs on, and what-if ranking of candidate ideas or author groups.

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::sigmoid;
use crate::corpus::{normalize_author_key, AuthorRecord, PaperRecord};
use crate::error::{Error, Result};
use crate::llm::map_concurrent;
use crate::model::{CapabilitySource, Model, Objective};
use crate::params::ParamStore;
use crate::tokenizer::Vocab;

pub const RATING_MIN: f64 = 1.0;
pub const RATING_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthorInput {
    pub display_name: String,
    #[serde(default)]
    pub position: String,
    #[serde(default)]
    pub affiliation: String,
    #[serde(default)]
    pub country: String,
}

/// A submission as sent by clients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    #[serde(default)]
    pub title: String,
    pub authors: Vec<AuthorInput>,
    pub venue: String,
    pub idea: String,
    /// Needed only by models that read explicit capability text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capability: Option<String>,
}

impl Submission {
    pub fn to_record(&self, record_id: &str) -> Result<PaperRecord> {
        if self.authors.is_empty() {
            return Err(Error::MissingField {
                record_id: record_id.into(),
                field: "author".into(),
            });
        }
        if self.idea.trim().is_empty() {
            return Err(Error::MissingField {
                record_id: record_id.into(),
                field: "idea".into(),
            });
        }
        let authors: Vec<AuthorRecord> = self
            .authors
            .iter()
            .enumerate()
            .map(|(i, a)| AuthorRecord {
                display_name: a.display_name.clone(),
                position: a.position.clone(),
                affiliation: a.affiliation.clone(),
                country: a.country.to_lowercase(),
                order_index: i,
            })
            .collect();
        Ok(PaperRecord {
            record_id: record_id.into(),
            title: self.title.clone(),
            r#abstract: String::new(),
            first_author_key: normalize_author_key(&authors[0].display_name),
            authors,
            venue: self.venue.clone(),
            idea_text: Some(self.idea.clone()),
            capability_text: self.capability.clone(),
            avg_rating: None,
            accepted: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model_id: String,
    pub architecture: String,
    pub fusion_variant: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capability_source: Option<CapabilitySource>,
}

impl ModelInfo {
    /// Models reading explicit capability text cannot score submissions
    /// that lack it.
    pub fn needs_capability_text(&self) -> bool {
        self.capability_source == Some(CapabilitySource::Explicit)
    }
}

/// Anything that maps a record to raw outcome scores: a rating and an
/// acceptance logit.
pub trait OutcomeModel: Send + Sync {
    fn info(&self) -> ModelInfo;
    fn raw_score(&self, record: &PaperRecord, objective: Objective) -> Result<f64>;
}

/// Maps a raw score to the reported scale: ratings are clipped to
/// `[1, 10]`, acceptance logits go through a sigmoid.
pub fn finalize_score(objective: Objective, raw: f64) -> Result<f64> {
    if !raw.is_finite() {
        return Err(Error::NonFinite("model output".into()));
    }
    Ok(match objective {
        Objective::Rating => raw.clamp(RATING_MIN, RATING_MAX),
        Objective::Acceptance => sigmoid(raw),
    })
}

pub fn score(model: &dyn OutcomeModel, record: &PaperRecord, objective: Objective) -> Result<f64> {
    if model.info().needs_capability_text() && record.capability_text.as_deref().is_none_or(|c| c.trim().is_empty()) {
        return Err(Error::MissingField {
            record_id: record.record_id.clone(),
            field: "capability".into(),
        });
    }
    finalize_score(objective, model.raw_score(record, objective)?)
}

/// One trained model for one objective, with its vocabulary. This is what
/// `train` writes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedModel {
    pub model_id: String,
    pub objective: Objective,
    pub model: Model,
    pub store: ParamStore,
    pub vocab: Vocab,
}

impl TrainedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::NotLoaded(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn raw(&self, record: &PaperRecord) -> Result<f64> {
        let ex = self.model.prepare(record, &self.vocab, self.objective)?;
        self.model.predict_raw(&self.store, &ex)
    }
}

/// A rating model and an acceptance model served under one id. Both must
/// read the capability branch the same way.
#[derive(Debug, Clone)]
pub struct ModelPair {
    pub model_id: String,
    pub rating: TrainedModel,
    pub acceptance: TrainedModel,
}

impl ModelPair {
    pub fn new(model_id: impl Into<String>, rating: TrainedModel, acceptance: TrainedModel) -> Result<Self> {
        if rating.objective != Objective::Rating || acceptance.objective != Objective::Acceptance {
            return Err(Error::Config("model pair needs a rating and an acceptance model".into()));
        }
        if rating.model.capability_source() != acceptance.model.capability_source() {
            return Err(Error::Config("paired models disagree on capability source".into()));
        }
        Ok(Self {
            model_id: model_id.into(),
            rating,
            acceptance,
        })
    }
}

impl OutcomeModel for ModelPair {
    fn info(&self) -> ModelInfo {
        ModelInfo {
            model_id: self.model_id.clone(),
            architecture: self.rating.model.describe(),
            fusion_variant: self.rating.model.fusion_variant(),
            capability_source: self.rating.model.capability_source(),
        }
    }

    fn raw_score(&self, record: &PaperRecord, objective: Objective) -> Result<f64> {
        match objective {
            Objective::Rating => self.rating.raw(record),
            Objective::Acceptance => self.acceptance.raw(record),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub submission: Submission,
    /// Picks a model; otherwise the first model able to score the
    /// submission is used (explicit-capability models need capability text).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResponse {
    /// Predicted average rating in `[1, 10]`.
    pub rating: f64,
    /// Acceptance probability in `[0, 1]`.
    pub acceptance_probability: f64,
    pub model_id: String,
    pub fusion_variant: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capability_source: Option<CapabilitySource>,
}

pub fn predict_outcome(model: &dyn OutcomeModel, submission: &Submission) -> Result<PredictionResponse> {
    let record = submission.to_record("query")?;
    let info = model.info();
    Ok(PredictionResponse {
        rating: score(model, &record, Objective::Rating)?,
        acceptance_probability: score(model, &record, Objective::Acceptance)?,
        model_id: info.model_id,
        fusion_variant: info.fusion_variant,
        capability_source: info.capability_source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateKind {
    Ideas,
    AuthorGroups,
}

/// One alternative to score. Idea candidates carry `idea`, author-group
/// candidates carry `authors`; either may override the capability text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idea: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub authors: Option<Vec<AuthorInput>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capability: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecommendRequest {
    /// Fixed context; the varied part is replaced per candidate.
    pub base: Submission,
    pub kind: CandidateKind,
    pub candidates: Vec<Candidate>,
    #[serde(default = "default_objective")]
    pub objective: Objective,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
}

fn default_objective() -> Objective {
    Objective::Rating
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendResponse {
    pub kind: CandidateKind,
    pub objective: Objective,
    /// Id of the highest-scoring candidate.
    pub best: String,
    /// All candidates, best first; ties keep lexicographic id order.
    pub ranking: Vec<RankedCandidate>,
    pub model: ModelInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub models_loaded: usize,
}

/// Materialises one record per candidate.
pub fn candidate_records(req: &RecommendRequest) -> Result<Vec<(String, PaperRecord)>> {
    if req.candidates.is_empty() {
        return Err(Error::Precondition("candidate set is empty".into()));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(req.candidates.len());
    for c in &req.candidates {
        if !seen.insert(c.id.as_str()) {
            return Err(Error::Precondition(format!("duplicate candidate id {}", c.id)));
        }
        let mut sub = req.base.clone();
        match req.kind {
            CandidateKind::Ideas => {
                if c.authors.is_some() {
                    return Err(Error::Precondition(format!("candidate {} has authors in an idea set", c.id)));
                }
                sub.idea = c
                    .idea
                    .clone()
                    .ok_or_else(|| Error::Precondition(format!("idea candidate {} has no idea", c.id)))?;
            }
            CandidateKind::AuthorGroups => {
                if c.idea.is_some() {
                    return Err(Error::Precondition(format!("candidate {} has an idea in an author-group set", c.id)));
                }
                sub.authors = c
                    .authors
                    .clone()
                    .ok_or_else(|| Error::Precondition(format!("author-group candidate {} has no authors", c.id)))?;
            }
        }
        if c.capability.is_some() {
            sub.capability = c.capability.clone();
        }
        out.push((c.id.clone(), sub.to_record(&c.id)?));
    }
    Ok(out)
}

/// Sorts by score descending, ties by id ascending.
pub fn rank(mut scored: Vec<RankedCandidate>) -> Vec<RankedCandidate> {
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    scored
}

/// Scores every candidate on up to `width` threads and ranks them.
pub fn recommend(model: &dyn OutcomeModel, req: &RecommendRequest, width: usize) -> Result<RecommendResponse> {
    let records = candidate_records(req)?;
    let scored = map_concurrent(&records, width, |(id, rec)| {
        Ok(RankedCandidate {
            score: score(model, rec, req.objective)?,
            id: id.clone(),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let ranking = rank(scored);
    Ok(RecommendResponse {
        kind: req.kind,
        objective: req.objective,
        best: ranking[0].id.clone(),
        ranking,
        model: model.info(),
    })
}

/// The set of loaded models.
#[derive(Clone)]
pub struct Registry {
    models: Vec<Arc<dyn OutcomeModel>>,
    /// Worker threads per recommendation request.
    pub fanout: usize,
}

impl Default for Registry {
    fn default() -> Self {
        Self {
            models: Vec::new(),
            fanout: 4,
        }
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, model: Arc<dyn OutcomeModel>) -> Result<()> {
        let id = model.info().model_id;
        if self.models.iter().any(|m| m.info().model_id == id) {
            return Err(Error::Config(format!("model id {id} registered twice")));
        }
        self.models.push(model);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn infos(&self) -> Vec<ModelInfo> {
        self.models.iter().map(|m| m.info()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Arc<dyn OutcomeModel>> {
        self.models.iter().find(|m| m.info().model_id == id)
    }

    /// The requested model, or the first one that can score `submission`.
    pub fn select(&self, id: Option<&str>, submission: &Submission) -> Result<&Arc<dyn OutcomeModel>> {
        if self.models.is_empty() {
            return Err(Error::NotLoaded("no model loaded".into()));
        }
        match id {
            Some(id) => self.get(id).ok_or_else(|| Error::NotLoaded(format!("model {id}"))),
            None => {
                let has_cap = submission.capability.as_deref().is_some_and(|c| !c.trim().is_empty());
                Ok(self
                    .models
                    .iter()
                    .find(|m| has_cap || !m.info().needs_capability_text())
                    .unwrap_or(&self.models[0]))
            }
        }
    }

    pub fn predict(&self, req: &PredictRequest) -> Result<PredictionResponse> {
        predict_outcome(self.select(req.model_id.as_deref(), &req.submission)?.as_ref(), &req.submission)
    }

    pub fn recommend(&self, req: &RecommendRequest) -> Result<RecommendResponse> {
        recommend(self.select(req.model_id.as_deref(), &req.base)?.as_ref(), req, self.fanout)
    }

    pub fn health(&self) -> HealthResponse {
        HealthResponse {
            status: "ok".into(),
            models_loaded: self.len(),
        }
    }
}
