//! Submission records: ingestion, filtering, deterministic splits and the
//! canonical author-line rendering fed to the encoders.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthorRecord {
    pub display_name: String,
    #[serde(default)]
    pub position: String,
    #[serde(default)]
    pub affiliation: String,
    /// ISO-2 lowercase, or empty when unknown.
    #[serde(default)]
    pub country: String,
    #[serde(default)]
    pub order_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperRecord {
    pub record_id: String,
    pub title: String,
    #[serde(default)]
    pub r#abstract: String,
    pub authors: Vec<AuthorRecord>,
    pub venue: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idea_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capability_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_rating: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted: Option<bool>,
    pub first_author_key: String,
}

impl PaperRecord {
    pub fn is_labeled(&self) -> bool {
        self.avg_rating.is_some() || self.accepted.is_some()
    }
}

/// Lowercased, whitespace-collapsed display name.
pub fn normalize_author_key(name: &str) -> String {
    name.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestConfig {
    pub venues: Vec<String>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            venues: ["ICLR2024", "ICLR2025", "NeurIPS2023", "NeurIPS2024"]
                .into_iter()
                .map(String::from)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    /// Zero-based position of the document in the input stream.
    pub position: usize,
    pub record_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub records: Vec<PaperRecord>,
    pub rejections: Vec<Rejection>,
}

fn venue_pattern() -> &'static Regex {
    use std::sync::OnceLock;
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[A-Za-z]+\d{4}$").expect("static regex"))
}

fn str_field<'a>(doc: &'a Value, key: &str) -> Option<&'a str> {
    doc.get(key).and_then(Value::as_str)
}

/// Maps a review decision string to a label. `None` means the submission is
/// excluded (withdrawn, desk rejected or unknown wording).
fn decision_label(decision: &str) -> Option<bool> {
    let d = decision.trim().to_lowercase();
    if d.starts_with("accept") {
        Some(true)
    } else if d == "reject" || d == "rejected" {
        Some(false)
    } else {
        None
    }
}

fn parse_document(doc: &Value, config: &IngestConfig) -> std::result::Result<PaperRecord, String> {
    if !doc.is_object() {
        return Err("document is not an object".into());
    }
    let record_id = str_field(doc, "record_id")
        .filter(|s| !s.trim().is_empty())
        .ok_or("missing record_id")?
        .to_string();
    let title = str_field(doc, "title")
        .filter(|s| !s.trim().is_empty())
        .ok_or("missing title")?
        .to_string();
    let venue = str_field(doc, "venue")
        .filter(|s| !s.trim().is_empty())
        .ok_or("missing venue")?
        .to_string();
    if !venue_pattern().is_match(&venue) {
        return Err(format!("venue {venue:?} is not conference name followed by a 4-digit year"));
    }
    if !config.venues.iter().any(|v| v == &venue) {
        return Err(format!("venue {venue} not in whitelist"));
    }

    let raw_authors = doc
        .get("authors")
        .and_then(Value::as_array)
        .ok_or("missing authors")?;
    if raw_authors.is_empty() {
        return Err("empty authors".into());
    }
    let mut authors = Vec::with_capacity(raw_authors.len());
    for (i, a) in raw_authors.iter().enumerate() {
        let mut author: AuthorRecord =
            serde_json::from_value(a.clone()).map_err(|e| format!("author {i}: {e}"))?;
        if author.display_name.trim().is_empty() {
            return Err(format!("author {i} has empty display_name"));
        }
        if a.get("order_index").is_none() {
            author.order_index = i;
        }
        author.country = author.country.trim().to_lowercase();
        authors.push(author);
    }
    authors.sort_by_key(|a| a.order_index);
    if authors.iter().enumerate().any(|(i, a)| a.order_index != i) {
        return Err("author order_index values must form 0..n-1".into());
    }

    let avg_rating = match doc.get("avg_rating") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let r = v.as_f64().ok_or("avg_rating is not a number")?;
            if !(1.0..=10.0).contains(&r) {
                return Err(format!("avg_rating {r} outside [1, 10]"));
            }
            Some(r)
        }
    };
    let mut accepted = match doc.get("accepted") {
        None | Some(Value::Null) => None,
        Some(v) => Some(v.as_bool().ok_or("accepted is not a boolean")?),
    };
    if let Some(decision) = str_field(doc, "decision") {
        match decision_label(decision) {
            Some(label) => {
                accepted.get_or_insert(label);
            }
            None => return Err(format!("excluded decision {decision:?}")),
        }
    }

    let opt_text = |key: &str| {
        str_field(doc, key)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
    };
    let first_author_key = normalize_author_key(&authors[0].display_name);
    Ok(PaperRecord {
        record_id,
        title,
        r#abstract: opt_text("abstract").unwrap_or_default(),
        authors,
        venue,
        idea_text: opt_text("idea_text"),
        capability_text: opt_text("capability_text"),
        avg_rating,
        accepted,
        first_author_key,
    })
}

/// Validates raw documents. Schema violations are reported per document;
/// a repeated `record_id` aborts the whole ingest.
pub fn ingest_records<I>(documents: I, config: &IngestConfig) -> Result<IngestReport>
where
    I: IntoIterator<Item = Value>,
{
    let mut report = IngestReport::default();
    let mut seen = HashSet::new();
    for (position, doc) in documents.into_iter().enumerate() {
        let id = str_field(&doc, "record_id").map(String::from);
        if let Some(id) = &id {
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicateRecord(id.clone()));
            }
        }
        match parse_document(&doc, config) {
            Ok(record) => report.records.push(record),
            Err(reason) => report.rejections.push(Rejection {
                position,
                record_id: id,
                reason,
            }),
        }
    }
    Ok(report)
}

/// Parses newline-delimited JSON. Lines that are not valid JSON become
/// rejections; blank lines are skipped.
pub fn ingest_jsonl(text: &str, config: &IngestConfig) -> Result<IngestReport> {
    let mut docs = Vec::new();
    let mut broken = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Value>(line) {
            Ok(v) => docs.push(v),
            Err(e) => {
                broken.push((docs.len(), e.to_string()));
                docs.push(Value::Null);
            }
        }
    }
    let mut report = ingest_records(docs, config)?;
    for r in &mut report.rejections {
        if let Some((_, e)) = broken.iter().find(|(pos, _)| *pos == r.position) {
            r.reason = format!("malformed json: {e}");
        }
    }
    Ok(report)
}

pub fn read_records(path: &Path) -> Result<Vec<PaperRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn write_records(path: &Path, records: &[PaperRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Keeps the records whose first author leads at least two records.
pub fn filter_first_author_repeat(records: &[PaperRecord]) -> Vec<PaperRecord> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in records {
        *counts.entry(r.first_author_key.as_str()).or_default() += 1;
    }
    records
        .iter()
        .filter(|r| counts[r.first_author_key.as_str()] >= 2)
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    /// `(numerator, denominator)` for train, validation and test.
    pub ratios: [(u32, u32); 3],
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read_manifest(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Part sizes under the floor rule: train and validation are floored,
/// the remainder goes to test.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

/// Uniform integer in `0..=bound` by rejection sampling on 64-bit words.
fn uniform_inclusive(rng: &mut ChaCha20Rng, bound: u64) -> u64 {
    let span = bound + 1;
    let zone = u64::MAX - (u64::MAX % span + 1) % span;
    loop {
        let x = rng.next_u64();
        if x <= zone {
            return x % span;
        }
    }
}

/// Fisher–Yates shuffle of `items`, descending `i` from `n-1` to `1` and
/// swapping with `j` uniform in `0..=i`. The word stream is ChaCha20 seeded
/// through `SeedableRng::seed_from_u64(seed)`.
pub fn seeded_shuffle<T>(items: &mut [T], seed: u64) {
    shuffle_with(items, &mut ChaCha20Rng::seed_from_u64(seed));
}

/// The same Fisher–Yates pass, continuing an existing stream.
pub fn shuffle_with<T>(items: &mut [T], rng: &mut ChaCha20Rng) {
    for i in (1..items.len()).rev() {
        let j = uniform_inclusive(rng, i as u64) as usize;
        items.swap(i, j);
    }
}

pub fn split_ids(ids: &[String], seed: u64) -> Result<DatasetSplit> {
    let n = ids.len();
    if n < 3 {
        return Err(Error::TooFewRecords(n));
    }
    let mut shuffled = ids.to_vec();
    seeded_shuffle(&mut shuffled, seed);
    let (train, val, _) = split_sizes(n);
    let test = shuffled.split_off(train + val);
    let val_ids = shuffled.split_off(train);
    Ok(DatasetSplit {
        seed,
        ratios: [(8, 10), (1, 10), (1, 10)],
        train: shuffled,
        val: val_ids,
        test,
    })
}

pub fn make_split(records: &[PaperRecord], seed: u64) -> Result<DatasetSplit> {
    let ids: Vec<String> = records.iter().map(|r| r.record_id.clone()).collect();
    split_ids(&ids, seed)
}

pub const DEFAULT_TAG_KEY: &str = "capfuse-author-tag";

/// `#` followed by six uppercase hex digits of a keyed SHA-256 of the name.
pub fn author_tag(display_name: &str, key: &str) -> String {
    let mut h = Sha256::new();
    h.update(key.as_bytes());
    h.update([0u8]);
    h.update(display_name.as_bytes());
    let d = h.finalize();
    format!("#{:02X}{:02X}{:02X}", d[0], d[1], d[2])
}

/// `NAME ( position, affiliation, country )`; an empty country leaves the
/// trailing `, )`.
pub fn render_author_fragment(author: &AuthorRecord, anonymize: bool) -> String {
    let name = if anonymize {
        author_tag(&author.display_name, DEFAULT_TAG_KEY)
    } else {
        author.display_name.clone()
    };
    let mut s = format!("{name} ( {}, {},", author.position, author.affiliation);
    if !author.country.is_empty() {
        s.push(' ');
        s.push_str(&author.country);
    }
    s.push_str(" )");
    s
}

pub fn author_fragments(record: &PaperRecord, anonymize: bool) -> Vec<String> {
    record
        .authors
        .iter()
        .map(|a| render_author_fragment(a, anonymize))
        .collect()
}

pub fn render_author_text(record: &PaperRecord, anonymize: bool) -> String {
    author_fragments(record, anonymize).join("; ")
}
