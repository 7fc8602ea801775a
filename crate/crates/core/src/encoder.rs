//! Input composition and the bidirectional transformer text encoder.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::{author_fragments, PaperRecord};
use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, LayerNorm, TransformerLayer};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Title,
    Abstract,
    Author,
    Capability,
    Idea,
}

impl Field {
    pub fn as_str(self) -> &'static str {
        match self {
            Field::Title => "title",
            Field::Abstract => "abstract",
            Field::Author => "author",
            Field::Capability => "capability",
            Field::Idea => "idea",
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Field {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_lowercase().as_str() {
            "title" => Field::Title,
            "abstract" | "abs" => Field::Abstract,
            "author" | "authors" => Field::Author,
            "capability" | "cap" => Field::Capability,
            "idea" => Field::Idea,
            other => return Err(Error::Config(format!("unknown field {other}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceField {
    Author,
    Capability,
    Idea,
    Title,
    Abstract,
    Composite,
}

impl From<Field> for SourceField {
    fn from(f: Field) -> Self {
        match f {
            Field::Title => SourceField::Title,
            Field::Abstract => SourceField::Abstract,
            Field::Author => SourceField::Author,
            Field::Capability => SourceField::Capability,
            Field::Idea => SourceField::Idea,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledVector {
    pub values: Vec<f64>,
    pub source_field: SourceField,
}

impl PooledVector {
    pub fn new(values: Vec<f64>, source_field: SourceField) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{source_field:?} pooled vector")));
        }
        Ok(Self { values, source_field })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

pub const SEPARATOR: &str = " [SEP] ";

fn field_text(record: &PaperRecord, field: Field) -> Result<String> {
    let missing = || Error::MissingField {
        record_id: record.record_id.clone(),
        field: field.to_string(),
    };
    let non_empty = |s: &str| (!s.trim().is_empty()).then(|| s.to_string());
    match field {
        Field::Title => non_empty(&record.title).ok_or_else(missing),
        Field::Abstract => non_empty(&record.r#abstract).ok_or_else(missing),
        Field::Author => {
            if record.authors.is_empty() {
                Err(missing())
            } else {
                Ok(author_fragments(record, true).join("; "))
            }
        }
        Field::Capability => record.capability_text.as_deref().and_then(non_empty).ok_or_else(missing),
        Field::Idea => record.idea_text.as_deref().and_then(non_empty).ok_or_else(missing),
    }
}

/// `venue: {venue} [SEP] ` (when requested) followed by the field texts
/// joined with ` [SEP] `. Author lines use anonymised tags.
pub fn compose_input(record: &PaperRecord, fields: &[Field], include_venue: bool) -> Result<String> {
    let parts = fields
        .iter()
        .map(|&f| field_text(record, f))
        .collect::<Result<Vec<_>>>()?;
    let mut out = String::new();
    if include_venue {
        out.push_str("venue: ");
        out.push_str(&record.venue);
        out.push_str(SEPARATOR);
    }
    out.push_str(&parts.join(SEPARATOR));
    Ok(out)
}

/// Like [`compose_input`], but when an author line would push the token
/// count past `max_tokens - 1`, middle authors are dropped (latest first) so
/// that the first and last author fragments survive.
pub fn compose_input_budgeted(
    record: &PaperRecord,
    fields: &[Field],
    include_venue: bool,
    vocab: &Vocab,
    max_tokens: usize,
) -> Result<String> {
    let full = compose_input(record, fields, include_venue)?;
    let budget = max_tokens.saturating_sub(1);
    if !fields.contains(&Field::Author) || vocab.count_tokens(&full) <= budget {
        return Ok(full);
    }
    let fragments = author_fragments(record, true);
    let mut keep: Vec<usize> = (0..fragments.len()).collect();
    loop {
        let line = keep.iter().map(|&i| fragments[i].as_str()).collect::<Vec<_>>().join("; ");
        let mut trimmed = record.clone();
        trimmed.authors = keep.iter().map(|&i| record.authors[i].clone()).collect();
        let text = compose_input(&trimmed, fields, include_venue)?;
        if vocab.count_tokens(&text) <= budget || keep.len() <= 2 {
            debug_assert!(text.contains(&line));
            return Ok(text);
        }
        // drop the latest middle author
        keep.remove(keep.len() - 2);
    }
}

/// Indices of at most `max` authors: first and last, then the earliest
/// middle authors, in original order.
pub fn select_authors(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    if max == 1 {
        return vec![0];
    }
    let mut idx: Vec<usize> = (0..max - 1).collect();
    idx.push(n - 1);
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden_size: usize,
    pub max_tokens: usize,
    pub vocab_id: String,
    pub layer_count: usize,
    pub head_count: usize,
    /// MLP width; zero means `4 * hidden_size`.
    #[serde(default)]
    pub intermediate_size: usize,
    #[serde(default = "default_segments")]
    pub segment_count: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_segments() -> usize {
    2
}
fn default_dropout() -> f64 {
    0.1
}
fn default_init_std() -> f64 {
    0.02
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_size: 768,
            max_tokens: 512,
            vocab_id: "default".into(),
            layer_count: 12,
            head_count: 12,
            intermediate_size: 0,
            segment_count: 2,
            dropout: 0.1,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    /// Two-layer, 32-wide encoder for desk-scale experiments.
    pub fn toy(vocab_id: &str) -> Self {
        Self {
            hidden_size: 32,
            max_tokens: 128,
            vocab_id: vocab_id.into(),
            layer_count: 2,
            head_count: 4,
            intermediate_size: 64,
            segment_count: 2,
            dropout: 0.0,
            init_std: 0.1,
        }
    }

    pub fn mlp_width(&self) -> usize {
        if self.intermediate_size == 0 {
            4 * self.hidden_size
        } else {
            self.intermediate_size
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.max_tokens == 0 || self.layer_count == 0 || self.head_count == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.hidden_size % self.head_count != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by head count {}",
                self.hidden_size, self.head_count
            )));
        }
        if self.segment_count == 0 {
            return Err(Error::Config("segment_count must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub segment_embedding: ParamId,
    pub embedding_norm: LayerNorm,
    pub layers: Vec<TransformerLayer>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: &EncoderConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (d, std, group) = (config.hidden_size, config.init_std, ParamGroup::Backbone);
        let token_embedding = store.add_normal(format!("{name}.token_embedding"), vocab_size, d, std, group, rng);
        let position_embedding =
            store.add_normal(format!("{name}.position_embedding"), config.max_tokens, d, std, group, rng);
        let segment_embedding =
            store.add_normal(format!("{name}.segment_embedding"), config.segment_count, d, std, group, rng);
        let embedding_norm = LayerNorm::new(store, &format!("{name}.embedding_norm"), d, group);
        let layers = (0..config.layer_count)
            .map(|i| {
                TransformerLayer::new(
                    store,
                    &format!("{name}.layer{i}"),
                    d,
                    config.head_count,
                    config.mlp_width(),
                    config.dropout,
                    std,
                    group,
                    rng,
                )
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            token_embedding,
            position_embedding,
            segment_embedding,
            embedding_norm,
            layers,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    /// Token + position + segment embeddings, normalised. Positions start at
    /// `position_offset`.
    pub fn embed(
        &self,
        g: &mut Graph<'_>,
        ids: &[u32],
        segments: &[usize],
        position_offset: usize,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Precondition("cannot encode an empty token sequence".into()));
        }
        if position_offset + ids.len() > self.config.max_tokens {
            return Err(Error::Precondition(format!(
                "sequence of {} tokens exceeds max_tokens {}",
                position_offset + ids.len(),
                self.config.max_tokens
            )));
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let tok = g.embed(self.token_embedding, &idx);
        let pos: Vec<usize> = (position_offset..position_offset + ids.len()).collect();
        let pos = g.embed(self.position_embedding, &pos);
        let seg: Vec<usize> = segments
            .iter()
            .map(|&s| s.min(self.config.segment_count - 1))
            .collect();
        let seg = g.embed(self.segment_embedding, &seg);
        let x = g.add(tok, pos);
        let x = g.add(x, seg);
        let x = self.embedding_norm.forward(g, x);
        Ok(ctx.dropout(g, x, self.config.dropout))
    }

    pub fn run_layers(&self, g: &mut Graph<'_>, mut x: Var, ctx: &mut ForwardCtx) -> Var {
        for layer in &self.layers {
            x = layer.forward(g, x, ctx);
        }
        x
    }

    /// Top-layer states for a token sequence (`L x d`).
    pub fn forward(&self, g: &mut Graph<'_>, ids: &[u32], segments: &[usize], ctx: &mut ForwardCtx) -> Result<Var> {
        let x = self.embed(g, ids, segments, 0, ctx)?;
        Ok(self.run_layers(g, x, ctx))
    }

    /// First-position top-layer state (`1 x d`) for a single-segment input.
    pub fn pooled(&self, g: &mut Graph<'_>, ids: &[u32], ctx: &mut ForwardCtx) -> Result<Var> {
        let segments = vec![0; ids.len()];
        let h = self.forward(g, ids, &segments, ctx)?;
        Ok(g.row(h, 0))
    }
}

/// Encodes `text` to its pooled vector: `[CLS]` prefix, truncation to
/// `max_tokens`, first-position top-layer state.
pub fn encode(
    text: &str,
    encoder: &Encoder,
    store: &ParamStore,
    vocab: &Vocab,
    source_field: SourceField,
    ctx: &mut ForwardCtx,
) -> Result<PooledVector> {
    if text.trim().is_empty() {
        return Err(Error::Precondition("text must be non-empty".into()));
    }
    if vocab.id() != encoder.config.vocab_id {
        return Err(Error::Config(format!(
            "vocab {} does not match encoder vocab_id {}",
            vocab.id(),
            encoder.config.vocab_id
        )));
    }
    let ids = vocab.encode_with_cls(text, encoder.config.max_tokens);
    let mut g = Graph::new(store);
    let pooled = encoder.pooled(&mut g, &ids, ctx)?;
    PooledVector::new(g.value(pooled).data().to_vec(), source_field)
}

/// Prefix of `text` holding the first `max_tokens - 1` tokens.
pub fn truncate_text(text: &str, max_tokens: usize) -> String {
    crate::tokenizer::split_words(text)
        .into_iter()
        .take(max_tokens.saturating_sub(1))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{normalize_author_key, AuthorRecord};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rec() -> PaperRecord {
        PaperRecord {
            record_id: "r1".into(),
            title: "Title".into(),
            r#abstract: "Abstract".into(),
            authors: vec![AuthorRecord {
                display_name: "Ann Example".into(),
                position: "phd student".into(),
                affiliation: "uni".into(),
                country: "us".into(),
                order_index: 0,
            }],
            venue: "ICLR2025".into(),
            idea_text: Some("an idea about gates".into()),
            capability_text: None,
            avg_rating: Some(5.0),
            accepted: None,
            first_author_key: normalize_author_key("Ann Example"),
        }
    }

    fn toy() -> (Vocab, Encoder, ParamStore) {
        let vocab = Vocab::build("toy", ["a b c d e f g an idea about gates"], 1);
        let cfg = EncoderConfig {
            max_tokens: 8,
            ..EncoderConfig::toy("toy")
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new(&mut store, "enc", &cfg, vocab.len(), &mut rng).unwrap();
        (vocab, enc, store)
    }

    #[test]
    fn compose_formats() {
        let r = rec();
        assert_eq!(
            compose_input(&r, &[Field::Idea], true).unwrap(),
            "venue: ICLR2025 [SEP] an idea about gates"
        );
        let author_only = compose_input(&r, &[Field::Author], false).unwrap();
        assert!(author_only.starts_with('#') && author_only.ends_with("( phd student, uni, us )"));
        assert!(matches!(
            compose_input(&r, &[Field::Capability], false),
            Err(Error::MissingField { field, .. }) if field == "capability"
        ));
        assert_eq!(
            compose_input(&r, &[Field::Title, Field::Abstract], false).unwrap(),
            "Title [SEP] Abstract"
        );
    }

    #[test]
    fn budgeted_author_line_keeps_first_and_last() {
        let mut r = rec();
        r.authors = (0..6)
            .map(|i| AuthorRecord {
                display_name: format!("Person {i}"),
                position: format!("pos{i}"),
                affiliation: "uni".into(),
                country: String::new(),
                order_index: i,
            })
            .collect();
        let vocab = Vocab::build("v", ["x"], 1);
        let text = compose_input_budgeted(&r, &[Field::Author], false, &vocab, 30).unwrap();
        assert!(vocab.count_tokens(&text) <= 29);
        assert!(text.contains("pos0") && text.contains("pos5"));
        assert!(!text.contains("pos4"));
    }

    #[test]
    fn author_selection_prefers_first_and_last() {
        assert_eq!(select_authors(3, 16), vec![0, 1, 2]);
        assert_eq!(select_authors(20, 4), vec![0, 1, 2, 19]);
        assert_eq!(select_authors(5, 1), vec![0]);
    }

    #[test]
    fn encode_is_deterministic_and_truncation_consistent() {
        let (vocab, enc, store) = toy();
        let a = encode("a", &enc, &store, &vocab, SourceField::Idea, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(a.dim(), 32);
        assert!(a.values.iter().all(|v| v.is_finite()));
        assert!(a.values.iter().map(|v| v * v).sum::<f64>() > 0.0);
        let b = encode("a", &enc, &store, &vocab, SourceField::Idea, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(a, b);

        let long = "a b c d e f g a b c d e f g";
        let full = encode(long, &enc, &store, &vocab, SourceField::Idea, &mut ForwardCtx::eval()).unwrap();
        let cut = truncate_text(long, 8);
        let trunc = encode(&cut, &enc, &store, &vocab, SourceField::Idea, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(full, trunc);
    }

    #[test]
    fn encode_rejects_empty_text_and_bad_config() {
        let (vocab, enc, store) = toy();
        assert!(encode("  ", &enc, &store, &vocab, SourceField::Idea, &mut ForwardCtx::eval()).is_err());
        let cfg = EncoderConfig {
            head_count: 5,
            ..EncoderConfig::toy("toy")
        };
        assert!(cfg.validate().is_err());
    }
}
