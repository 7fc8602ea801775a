//! Prompt rendering, an OpenAI-style chat gateway with retries, caching and
//! bounded concurrency, and parsers for idea, capability and judge replies.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::PaperRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptFamily {
    Idea,
    Capability,
    Judge,
}

impl PromptFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptFamily::Idea => "idea",
            PromptFamily::Capability => "capability",
            PromptFamily::Judge => "judge",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub family: PromptFamily,
    pub version: String,
    /// Optional system message, sent verbatim.
    pub system: Option<String>,
    /// User message with `{name}` placeholders.
    pub template_text: String,
}

impl PromptTemplate {
    pub fn idea() -> Self {
        Self {
            family: PromptFamily::Idea,
            version: "idea-v1".into(),
            system: Some(include_str!("../prompts/idea.system.txt").trim_end().into()),
            template_text: include_str!("../prompts/idea.user.txt").trim_end().into(),
        }
    }

    pub fn capability() -> Self {
        Self {
            family: PromptFamily::Capability,
            version: "capability-v1".into(),
            system: Some(include_str!("../prompts/capability.system.txt").trim_end().into()),
            template_text: include_str!("../prompts/capability.user.txt").trim_end().into(),
        }
    }

    pub fn judge() -> Self {
        Self {
            family: PromptFamily::Judge,
            version: "judge-v1".into(),
            system: Some(include_str!("../prompts/judge.system.txt").trim_end().into()),
            template_text: include_str!("../prompts/judge.user.txt").trim_end().into(),
        }
    }

    pub fn placeholders(&self) -> Vec<String> {
        let mut out = Vec::new();
        for seg in segments(&self.template_text) {
            if let Segment::Hole(name) = seg {
                if !out.iter().any(|n: &String| n == name) {
                    out.push(name.to_string());
                }
            }
        }
        out
    }

    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<String> {
        render_prompt(&self.template_text, bindings)
    }

    pub fn messages(&self, bindings: &BTreeMap<String, String>) -> Result<Vec<ChatMessage>> {
        let mut out = Vec::with_capacity(2);
        if let Some(s) = &self.system {
            out.push(ChatMessage::system(s));
        }
        out.push(ChatMessage::user(self.render(bindings)?));
        Ok(out)
    }
}

enum Segment<'a> {
    Text(&'a str),
    Hole(&'a str),
}

/// Splits a template into literal text and `{identifier}` holes. A brace
/// not followed by an identifier and `}` is literal.
fn segments(template: &str) -> Vec<Segment<'_>> {
    let bytes = template.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let mut j = i + 1;
            if j < bytes.len() && (bytes[j].is_ascii_alphabetic() || bytes[j] == b'_') {
                j += 1;
                while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j] == b'}' {
                    if start < i {
                        out.push(Segment::Text(&template[start..i]));
                    }
                    out.push(Segment::Hole(&template[i + 1..j]));
                    i = j + 1;
                    start = i;
                    continue;
                }
            }
        }
        i += 1;
    }
    if start < template.len() {
        out.push(Segment::Text(&template[start..]));
    }
    out
}

/// Substitutes every `{name}` placeholder.
pub fn render_prompt(template: &str, bindings: &BTreeMap<String, String>) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    for seg in segments(template) {
        match seg {
            Segment::Text(t) => out.push_str(t),
            Segment::Hole(name) => {
                let v = bindings
                    .get(name)
                    .ok_or_else(|| Error::UnboundPlaceholder(name.to_string()))?;
                out.push_str(v);
            }
        }
    }
    Ok(out)
}

/// Judge bindings: every value JSON-encoded so the user message is itself
/// a dictionary.
pub fn judge_bindings(record: &PaperRecord) -> Result<BTreeMap<String, String>> {
    let missing = |field: &str| Error::MissingField {
        record_id: record.record_id.clone(),
        field: field.into(),
    };
    let idea = record.idea_text.as_deref().ok_or_else(|| missing("idea"))?;
    let cap = record.capability_text.as_deref().ok_or_else(|| missing("capability"))?;
    if record.authors.is_empty() {
        return Err(missing("author"));
    }
    let mut authors: Vec<_> = record.authors.iter().collect();
    authors.sort_by_key(|a| a.order_index);
    let authors: Vec<serde_json::Value> = authors
        .iter()
        .map(|a| {
            serde_json::json!({
                "name": a.display_name,
                "institution": a.affiliation,
                "position": a.position,
                "country": a.country,
            })
        })
        .collect();
    Ok(BTreeMap::from([
        ("author_cap".to_string(), serde_json::to_string(cap)?),
        ("idea".to_string(), serde_json::to_string(idea)?),
        ("authors".to_string(), serde_json::to_string(&authors)?),
        ("venue".to_string(), serde_json::to_string(&record.venue)?),
    ]))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

/// One outbound chat completion. Implementations return the assistant text.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub base_url: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    pub model: String,
    pub max_concurrency: usize,
    /// Outbound calls allowed per logical request.
    pub max_attempts: usize,
    pub temperature: f64,
    /// Minimum spacing between outbound calls, shared by all workers.
    pub min_interval_ms: u64,
    pub cache_dir: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            api_key: None,
            model: "gpt-4o-mini".into(),
            max_concurrency: 4,
            max_attempts: 3,
            temperature: 0.0,
            min_interval_ms: 0,
            cache_dir: None,
        }
    }
}

impl GatewayConfig {
    /// Overrides fields from `LLM_BASE_URL`, `LLM_API_KEY`, `LLM_MODEL` and
    /// `LLM_MAX_CONCURRENCY` when set.
    pub fn apply_env(mut self, get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        if let Some(v) = get("LLM_BASE_URL") {
            self.base_url = v;
        }
        if let Some(v) = get("LLM_API_KEY") {
            self.api_key = Some(v);
        }
        if let Some(v) = get("LLM_MODEL") {
            self.model = v;
        }
        if let Some(v) = get("LLM_MAX_CONCURRENCY") {
            self.max_concurrency = v
                .parse()
                .map_err(|_| Error::Config(format!("LLM_MAX_CONCURRENCY={v} is not an integer")))?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn from_env() -> Result<Self> {
        Self::default().apply_env(|k| std::env::var(k).ok())
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_concurrency == 0 || self.max_attempts == 0 {
            return Err(Error::Config("max_concurrency and max_attempts must be positive".into()));
        }
        Ok(())
    }
}

/// Minimum-interval limiter shared across threads.
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(interval: Duration) -> Self {
        Self {
            interval,
            next: Mutex::new(None),
        }
    }

    /// Blocks until the caller may send.
    pub fn acquire(&self) {
        if self.interval.is_zero() {
            return;
        }
        let wait = {
            let mut next = self.next.lock().unwrap_or_else(|e| e.into_inner());
            let now = Instant::now();
            let slot = match *next {
                Some(t) if t > now => t,
                _ => now,
            };
            *next = Some(slot + self.interval);
            slot - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

/// Response cache on disk, one JSON file per key under
/// `root/family/version/<sha256>.json`.
pub struct DiskCache {
    root: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    family: PromptFamily,
    version: String,
    response: String,
}

impl DiskCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn content_hash(request: &ChatRequest) -> String {
        let mut h = Sha256::new();
        h.update(request.model.as_bytes());
        h.update([0]);
        h.update(request.temperature.to_le_bytes());
        for m in &request.messages {
            h.update(m.role.as_bytes());
            h.update([0]);
            h.update(m.content.as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }

    fn path(&self, family: PromptFamily, version: &str, hash: &str) -> PathBuf {
        self.root.join(family.as_str()).join(version).join(format!("{hash}.json"))
    }

    pub fn get(&self, family: PromptFamily, version: &str, request: &ChatRequest) -> Option<String> {
        let p = self.path(family, version, &Self::content_hash(request));
        let bytes = fs::read(p).ok()?;
        serde_json::from_slice::<CacheEntry>(&bytes).ok().map(|e| e.response)
    }

    pub fn put(&self, family: PromptFamily, version: &str, request: &ChatRequest, response: &str) -> Result<()> {
        let p = self.path(family, version, &Self::content_hash(request));
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        let entry = CacheEntry {
            family,
            version: version.to_string(),
            response: response.to_string(),
        };
        // write-then-rename so concurrent readers never see partial files
        let tmp = p.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, serde_json::to_vec(&entry)?)?;
        fs::rename(tmp, p)?;
        Ok(())
    }
}

/// Banned outcome phrases in an idea paragraph.
pub fn banned_phrases(text: &str) -> Vec<String> {
    static PATTERNS: std::sync::OnceLock<Vec<Regex>> = std::sync::OnceLock::new();
    let pats = PATTERNS.get_or_init(|| {
        [
            r"(?i)\boutperform\w*",
            r"(?i)\bachiev\w*\s+(?:an?\s+|up\s+to\s+)?[\d.]+\s*%",
            r"(?i)state[- ]of[- ]the[- ]art\s+(?:results?|performance)",
        ]
        .iter()
        .map(|p| Regex::new(p).expect("valid pattern"))
        .collect()
    });
    pats.iter()
        .flat_map(|re| re.find_iter(text).map(|m| m.as_str().to_string()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdeaExtraction {
    pub text: String,
    /// Phrases that suggest experimental outcomes leaked into the idea.
    pub flags: Vec<String>,
}

impl IdeaExtraction {
    pub fn flagged_for_review(&self) -> bool {
        !self.flags.is_empty()
    }
}

/// Normalises an idea reply to a single paragraph and runs the outcome
/// heuristic.
pub fn parse_idea(reply: &str) -> Result<IdeaExtraction> {
    let text = reply.split_whitespace().collect::<Vec<_>>().join(" ");
    if text.is_empty() {
        return Err(Error::Parse("empty idea reply".into()));
    }
    Ok(IdeaExtraction {
        flags: banned_phrases(&text),
        text,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Low,
    Medium,
    High,
    VeryHigh,
}

impl Level {
    pub fn score(self) -> u8 {
        match self {
            Level::Low => 1,
            Level::Medium => 2,
            Level::High => 3,
            Level::VeryHigh => 4,
        }
    }

    pub fn text(self) -> &'static str {
        match self {
            Level::Low => "low",
            Level::Medium => "medium",
            Level::High => "high",
            Level::VeryHigh => "very high",
        }
    }

    pub const ALL: [Level; 4] = [Level::Low, Level::Medium, Level::High, Level::VeryHigh];
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_lowercase().replace(['_', '-'], " ");
        match norm.split_whitespace().collect::<Vec<_>>().join(" ").as_str() {
            "low" => Ok(Level::Low),
            "medium" => Ok(Level::Medium),
            "high" => Ok(Level::High),
            "very high" => Ok(Level::VeryHigh),
            _ => Err(Error::Parse(format!("unknown level {s:?}"))),
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.text())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Skill {
    MathematicalDerivation,
    TheoreticalAnalysis,
    ModelDesign,
    DataCollection,
    ExperimentalDesign,
    PaperPresentation,
}

impl Skill {
    pub const ALL: [Skill; 6] = [
        Skill::MathematicalDerivation,
        Skill::TheoreticalAnalysis,
        Skill::ModelDesign,
        Skill::DataCollection,
        Skill::ExperimentalDesign,
        Skill::PaperPresentation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Skill::MathematicalDerivation => "mathematical derivation",
            Skill::TheoreticalAnalysis => "theoretical analysis/proving",
            Skill::ModelDesign => "model/architecture design",
            Skill::DataCollection => "data collection",
            Skill::ExperimentalDesign => "experimental design",
            Skill::PaperPresentation => "paper presentation",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        let n = s.trim().to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
        let n = n.replace(" / ", "/");
        Some(match n.as_str() {
            "mathematical derivation" => Skill::MathematicalDerivation,
            "theoretical analysis/proving" | "theoretical analysis" | "theoretical proving" => {
                Skill::TheoreticalAnalysis
            }
            "model/architecture design" | "model design" | "architecture design" => Skill::ModelDesign,
            "data collection" => Skill::DataCollection,
            "experimental design" => Skill::ExperimentalDesign,
            "paper presentation" | "presentation" => Skill::PaperPresentation,
            _ => return None,
        })
    }
}

pub const MIN_EXPERTISE: usize = 5;
pub const MAX_EXPERTISE: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapabilityProfile {
    pub skill_levels: BTreeMap<Skill, Level>,
    pub expertise: Vec<(String, Level)>,
    pub compute_note: String,
    pub cost_usd_note: String,
    pub time_note: String,
    pub rendered_text: String,
}

impl CapabilityProfile {
    pub fn new(
        skill_levels: BTreeMap<Skill, Level>,
        expertise: Vec<(String, Level)>,
        compute_note: String,
        cost_usd_note: String,
        time_note: String,
    ) -> Result<Self> {
        if let Some(missing) = Skill::ALL.iter().find(|s| !skill_levels.contains_key(s)) {
            return Err(Error::Parse(format!("missing skill: {}", missing.name())));
        }
        let n = expertise.len();
        if n < MIN_EXPERTISE {
            return Err(Error::Parse(format!("expertise count {n} < {MIN_EXPERTISE}")));
        }
        if n > MAX_EXPERTISE {
            return Err(Error::Parse(format!("expertise count {n} > {MAX_EXPERTISE}")));
        }
        let mut p = Self {
            skill_levels,
            expertise,
            compute_note,
            cost_usd_note,
            time_note,
            rendered_text: String::new(),
        };
        p.rendered_text = p.render_text();
        Ok(p)
    }

    /// Templated sentence form used as capability text.
    pub fn render_text(&self) -> String {
        let skills: Vec<String> = Skill::ALL
            .iter()
            .map(|s| format!("{} in {}", self.skill_levels[s], s.name()))
            .collect();
        let exp: Vec<String> = self.expertise.iter().map(|(n, l)| format!("{n} ({l})")).collect();
        let mut out = format!(
            "The authors' capability is {}. Core expertise includes {}.",
            join_and(&skills),
            join_and(&exp)
        );
        if !self.compute_note.is_empty() {
            out.push_str(&format!(" Computational work utilized {}.", self.compute_note.trim_end_matches('.')));
        }
        if !self.cost_usd_note.is_empty() || !self.time_note.is_empty() {
            out.push_str(&format!(
                " Estimated costs: a) {}; b) {}.",
                self.cost_usd_note.trim_end_matches('.'),
                self.time_note.trim_end_matches('.')
            ));
        }
        out
    }

    /// Skill levels on the 1..4 scale, in canonical skill order.
    pub fn scores(&self) -> [u8; 6] {
        let mut out = [0; 6];
        for (i, s) in Skill::ALL.iter().enumerate() {
            out[i] = self.skill_levels[s].score();
        }
        out
    }
}

fn join_and(items: &[String]) -> String {
    match items.len() {
        0 => String::new(),
        1 => items[0].clone(),
        2 => format!("{} and {}", items[0], items[1]),
        n => format!("{}, and {}", items[..n - 1].join(", "), items[n - 1]),
    }
}

/// Splits an English list "a, b, and c" into items.
fn split_list(s: &str) -> Vec<String> {
    let mut items = Vec::new();
    for part in s.split(',') {
        let p = part.trim();
        let p = p.strip_prefix("and ").unwrap_or(p).trim();
        if p.is_empty() {
            continue;
        }
        if let Some((a, b)) = p.split_once(" and ") {
            // "x and y" without an Oxford comma
            if items.is_empty() && !a.contains('(') {
                items.push(p.to_string());
                continue;
            }
            items.push(a.trim().to_string());
            items.push(b.trim().to_string());
        } else {
            items.push(p.to_string());
        }
    }
    items
}

fn parse_skill_clause(clause: &str) -> Result<BTreeMap<Skill, Level>> {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?i)^(very\s+high|high|medium|low)\s+in\s+(.+)$").expect("valid"));
    let mut map = BTreeMap::new();
    for part in clause.split(',') {
        let part = part.trim();
        let part = part.strip_prefix("and ").unwrap_or(part).trim();
        if part.is_empty() {
            continue;
        }
        // "high in data collection and experimental design" style pairs
        let pieces: Vec<&str> = if re.is_match(part) && part.matches(" in ").count() > 1 {
            part.split(" and ").collect()
        } else {
            vec![part]
        };
        for piece in pieces {
            let caps = re
                .captures(piece.trim())
                .ok_or_else(|| Error::Parse(format!("cannot read skill item {piece:?}")))?;
            let level: Level = caps[1].parse()?;
            let skill = Skill::from_name(&caps[2])
                .ok_or_else(|| Error::Parse(format!("unknown skill {:?}", &caps[2])))?;
            if map.insert(skill, level).is_some() {
                return Err(Error::Parse(format!("duplicate skill: {}", skill.name())));
            }
        }
    }
    Ok(map)
}

fn parse_expertise_item(item: &str) -> Result<(String, Level)> {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?i)^(.+?)\s*\(\s*(very\s+high|high|medium|low)\s*\)$").expect("valid"));
    let caps = re
        .captures(item.trim())
        .ok_or_else(|| Error::Parse(format!("cannot read expertise item {item:?}")))?;
    Ok((caps[1].trim().to_string(), caps[2].parse()?))
}

/// Parses the sentence form produced by [`CapabilityProfile::render_text`].
pub fn parse_capability_text(text: &str) -> Result<CapabilityProfile> {
    let text = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let lower = text.to_lowercase();
    let start = lower
        .find("capability is ")
        .ok_or_else(|| Error::Parse("no capability sentence".into()))?
        + "capability is ".len();
    let exp_marker = "core expertise includes ";
    let exp_at = lower[start..]
        .find(exp_marker)
        .map(|i| i + start)
        .ok_or_else(|| Error::Parse("no core expertise sentence".into()))?;
    let skill_clause = text[start..exp_at].trim().trim_end_matches('.');
    let skill_levels = parse_skill_clause(skill_clause)?;

    let after = &text[exp_at + exp_marker.len()..];
    let after_lower = after.to_lowercase();
    let end = ["computational work utilized", "estimated costs:"]
        .iter()
        .filter_map(|m| after_lower.find(m))
        .min()
        .unwrap_or(after.len());
    let exp_clause = after[..end].trim().trim_end_matches('.');
    let expertise = split_list(exp_clause)
        .iter()
        .map(|i| parse_expertise_item(i))
        .collect::<Result<Vec<_>>>()?;

    let rest = &after[end..];
    let rest_lower = rest.to_lowercase();
    let mut compute_note = String::new();
    let mut cost_usd_note = String::new();
    let mut time_note = String::new();
    let cost_at = rest_lower.find("estimated costs:");
    if let Some(i) = rest_lower.find("computational work utilized") {
        let from = i + "computational work utilized".len();
        let to = cost_at.filter(|&c| c > from).unwrap_or(rest.len());
        compute_note = rest[from..to].trim().trim_end_matches('.').to_string();
    }
    if let Some(i) = cost_at {
        let costs = rest[i + "estimated costs:".len()..].trim().trim_end_matches(['.', '"']);
        let (a, b) = costs.split_once(';').unwrap_or((costs, ""));
        let strip = |s: &str, tag: &str| s.trim().strip_prefix(tag).unwrap_or(s.trim()).trim().to_string();
        cost_usd_note = strip(a, "a)");
        time_note = strip(b, "b)");
    }
    CapabilityProfile::new(skill_levels, expertise, compute_note, cost_usd_note, time_note)
}

fn json_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Null => String::new(),
        other => other.to_string(),
    }
}

fn capability_from_json(v: &serde_json::Value) -> Result<CapabilityProfile> {
    let obj = v.as_object().ok_or_else(|| Error::Parse("capability reply is not an object".into()))?;
    let skills = obj
        .get("skills")
        .or_else(|| obj.get("skill_levels"))
        .and_then(|s| s.as_object())
        .ok_or_else(|| Error::Parse("capability reply lacks skills".into()))?;
    let mut skill_levels = BTreeMap::new();
    for (k, lv) in skills {
        let skill = Skill::from_name(k).ok_or_else(|| Error::Parse(format!("unknown skill {k:?}")))?;
        let level: Level = json_string(lv).parse()?;
        if skill_levels.insert(skill, level).is_some() {
            return Err(Error::Parse(format!("duplicate skill: {}", skill.name())));
        }
    }
    let mut expertise = Vec::new();
    match obj.get("expertise") {
        Some(serde_json::Value::Array(items)) => {
            for it in items {
                match it {
                    serde_json::Value::String(s) => expertise.push(parse_expertise_item(s)?),
                    serde_json::Value::Object(o) => {
                        let name = o.get("name").map(json_string).unwrap_or_default();
                        let level: Level = o.get("level").map(json_string).unwrap_or_default().parse()?;
                        if name.trim().is_empty() {
                            return Err(Error::Parse("expertise entry without a name".into()));
                        }
                        expertise.push((name.trim().to_string(), level));
                    }
                    _ => return Err(Error::Parse("unreadable expertise entry".into())),
                }
            }
        }
        Some(serde_json::Value::Object(o)) => {
            for (k, lv) in o {
                expertise.push((k.clone(), json_string(lv).parse()?));
            }
        }
        _ => return Err(Error::Parse("capability reply lacks expertise".into())),
    }
    let note = |keys: &[&str]| {
        keys.iter()
            .find_map(|k| obj.get(*k))
            .map(json_string)
            .unwrap_or_default()
    };
    CapabilityProfile::new(
        skill_levels,
        expertise,
        note(&["compute", "compute_note"]),
        note(&["cost_usd", "cost", "cost_usd_note"]),
        note(&["time", "time_note"]),
    )
}

/// Parses a capability reply given either as a JSON object (possibly
/// wrapped in prose) or as the templated sentence.
pub fn parse_capability(reply: &str) -> Result<CapabilityProfile> {
    if let Some(v) = parse_json_object(reply) {
        return capability_from_json(&v);
    }
    parse_capability_text(reply)
}

/// First brace-balanced `{...}` block, honouring quoted strings.
pub fn first_brace_block(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut quote: Option<char> = None;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == q {
                quote = None;
            }
            continue;
        }
        match c {
            '"' | '\'' => quote = Some(c),
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Parses a JSON object from a reply: the whole text, else the first
/// brace-balanced block, else that block with single quotes and Python
/// literals normalised.
pub fn parse_json_object(reply: &str) -> Option<serde_json::Value> {
    let trimmed = reply.trim();
    let trimmed = trimmed
        .strip_prefix("```json")
        .or_else(|| trimmed.strip_prefix("```"))
        .map(|s| s.trim_end().trim_end_matches("```").trim())
        .unwrap_or(trimmed);
    if let Ok(v @ serde_json::Value::Object(_)) = serde_json::from_str(trimmed) {
        return Some(v);
    }
    let block = first_brace_block(trimmed)?;
    if let Ok(v @ serde_json::Value::Object(_)) = serde_json::from_str(block) {
        return Some(v);
    }
    let norm = block
        .replace('\'', "\"")
        .replace("True", "true")
        .replace("False", "false")
        .replace("None", "null");
    match serde_json::from_str(&norm) {
        Ok(v @ serde_json::Value::Object(_)) => Some(v),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeOutput {
    pub acc_chance: f64,
    pub rating_ave: f64,
}

/// Distinguishes unreadable replies (eligible for a re-ask) from readable
/// replies with invalid values.
#[derive(Debug)]
pub enum JudgeParseError {
    Unreadable(String),
    Invalid(Error),
}

pub fn parse_judge_reply(reply: &str) -> std::result::Result<JudgeOutput, JudgeParseError> {
    let v = parse_json_object(reply).ok_or_else(|| JudgeParseError::Unreadable(reply.chars().take(200).collect()))?;
    let field = |k: &str| {
        let x = v.get(k).ok_or_else(|| JudgeParseError::Unreadable(format!("missing {k}")))?;
        match x {
            serde_json::Value::Number(n) => n.as_f64(),
            serde_json::Value::String(s) => s.trim().parse().ok(),
            _ => None,
        }
        .ok_or_else(|| JudgeParseError::Unreadable(format!("{k} is not a number")))
    };
    let acc_chance = field("acc_chance")?;
    let rating_ave = field("rating_ave")?;
    if !acc_chance.is_finite() || !(0.0..=1.0).contains(&acc_chance) {
        return Err(JudgeParseError::Invalid(Error::Range(format!("acc_chance {acc_chance} outside [0,1]"))));
    }
    if !rating_ave.is_finite() || !(0.0..=10.0).contains(&rating_ave) {
        return Err(JudgeParseError::Invalid(Error::Range(format!("rating_ave {rating_ave} outside [0,10]"))));
    }
    Ok(JudgeOutput { acc_chance, rating_ave })
}

pub const REASK_SUFFIX: &str = "Output only the dictionary";

/// Records excluded from a judge batch, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub record_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JudgeBatch {
    pub outputs: Vec<(String, JudgeOutput)>,
    pub excluded: Vec<Exclusion>,
}

pub struct Gateway<T: ChatTransport> {
    pub config: GatewayConfig,
    transport: T,
    cache: Option<DiskCache>,
    limiter: RateLimiter,
    calls: AtomicUsize,
}

impl<T: ChatTransport> Gateway<T> {
    pub fn new(config: GatewayConfig, transport: T) -> Result<Self> {
        config.validate()?;
        let cache = config.cache_dir.clone().map(DiskCache::new);
        let limiter = RateLimiter::new(Duration::from_millis(config.min_interval_ms));
        Ok(Self {
            config,
            transport,
            cache,
            limiter,
            calls: AtomicUsize::new(0),
        })
    }

    /// Outbound calls made so far (cache hits excluded).
    pub fn outbound_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn request(&self, messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest {
            model: self.config.model.clone(),
            messages,
            temperature: self.config.temperature,
        }
    }

    /// Sends `request` with the cache and up to `budget` outbound attempts.
    /// Returns the reply and the attempts spent.
    fn send(&self, template: &PromptTemplate, request: &ChatRequest, budget: usize) -> Result<(String, usize)> {
        if let Some(c) = &self.cache {
            if let Some(hit) = c.get(template.family, &template.version, request) {
                return Ok((hit, 0));
            }
        }
        let mut last = None;
        for attempt in 1..=budget {
            self.limiter.acquire();
            self.calls.fetch_add(1, Ordering::SeqCst);
            match self.transport.complete(request) {
                Ok(reply) => {
                    if let Some(c) = &self.cache {
                        if let Err(e) = c.put(template.family, &template.version, request, &reply) {
                            log::warn!("cache write failed: {e}");
                        }
                    }
                    return Ok((reply, attempt));
                }
                Err(e) => {
                    log::warn!("{} call attempt {attempt} failed: {e}", template.family.as_str());
                    last = Some(e);
                }
            }
        }
        Err(Error::Transport(format!(
            "{} request failed after {budget} attempts: {}",
            template.family.as_str(),
            last.map(|e| e.to_string()).unwrap_or_default()
        )))
    }

    pub fn extract_idea(&self, manuscript: &str) -> Result<IdeaExtraction> {
        if manuscript.trim().is_empty() {
            return Err(Error::Precondition("manuscript text is empty".into()));
        }
        let t = PromptTemplate::idea();
        let req = self.request(t.messages(&BTreeMap::from([("manuscript".to_string(), manuscript.to_string())]))?);
        let (reply, _) = self.send(&t, &req, self.config.max_attempts)?;
        let out = parse_idea(&reply)?;
        if out.flagged_for_review() {
            log::warn!("idea extraction flagged for review: {:?}", out.flags);
        }
        Ok(out)
    }

    pub fn extract_capability(&self, manuscript: &str, authors: &str) -> Result<CapabilityProfile> {
        if manuscript.trim().is_empty() || authors.trim().is_empty() {
            return Err(Error::Precondition("manuscript and author text must be non-empty".into()));
        }
        let t = PromptTemplate::capability();
        let req = self.request(t.messages(&BTreeMap::from([
            ("manuscript".to_string(), manuscript.to_string()),
            ("authors".to_string(), authors.to_string()),
        ]))?);
        let (reply, _) = self.send(&t, &req, self.config.max_attempts)?;
        parse_capability(&reply)
    }

    /// Scores one record. An unreadable reply earns one re-ask within the
    /// same attempt budget; out-of-range values fail immediately.
    pub fn judge_paper(&self, record: &PaperRecord) -> Result<JudgeOutput> {
        let t = PromptTemplate::judge();
        let messages = t.messages(&judge_bindings(record)?)?;
        let budget = self.config.max_attempts;
        let req = self.request(messages.clone());
        let (reply, used) = self.send(&t, &req, budget)?;
        match parse_judge_reply(&reply) {
            Ok(o) => Ok(o),
            Err(JudgeParseError::Invalid(e)) => Err(e),
            Err(JudgeParseError::Unreadable(why)) => {
                let remaining = budget.saturating_sub(used.max(1));
                if remaining == 0 {
                    return Err(Error::Parse(format!("unreadable judge reply: {why}")));
                }
                let mut again = messages;
                again.push(ChatMessage::assistant(reply));
                again.push(ChatMessage::user(REASK_SUFFIX));
                let req = self.request(again);
                let (reply, _) = self.send(&t, &req, remaining)?;
                parse_judge_reply(&reply).map_err(|e| match e {
                    JudgeParseError::Invalid(e) => e,
                    JudgeParseError::Unreadable(why) => Error::Parse(format!("unreadable judge reply after re-ask: {why}")),
                })
            }
        }
    }

    /// Judges every record under the concurrency bound; failures are
    /// logged and excluded.
    pub fn judge_records(&self, records: &[PaperRecord]) -> JudgeBatch {
        let results = map_concurrent(records, self.config.max_concurrency, |r| self.judge_paper(r));
        let mut batch = JudgeBatch::default();
        for (r, res) in records.iter().zip(results) {
            match res {
                Ok(o) => batch.outputs.push((r.record_id.clone(), o)),
                Err(e) => {
                    log::warn!("judge excluded {}: {e}", r.record_id);
                    batch.excluded.push(Exclusion {
                        record_id: r.record_id.clone(),
                        reason: e.to_string(),
                    });
                }
            }
        }
        batch
    }
}

/// Applies `f` to every item with at most `width` worker threads; results
/// keep input order.
pub fn map_concurrent<I, O, F>(items: &[I], width: usize, f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync,
{
    let width = width.max(1).min(items.len().max(1));
    if width == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<O>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..width {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap_or_else(|e| e.into_inner()).expect("every slot filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const CASE_ONE: &str = "The authors' capability is high in mathematical derivation, medium in theoretical analysis/proving, high in model/architecture design, very high in data collection, high in experimental design, and high in paper presentation. Core expertise includes LLM evaluation (high), educational assessment (medium), prompt engineering (high), data synthesis (high), and statistical analysis (medium). Computational work utilized ~20 A100 GPUs for 2 months. Estimated costs: a) $50K USD; b) ~12 PhD-equivalent months.";

    #[test]
    fn substitution_and_unbound_placeholder() {
        let b = BTreeMap::from([("idea".to_string(), "X".to_string())]);
        assert_eq!(render_prompt("Evaluate: {idea}", &b).unwrap(), "Evaluate: X");
        let err = render_prompt("{idea} at {venue}", &b).unwrap_err();
        assert_eq!(err.to_string(), "unbound placeholder: venue");
        // JSON braces are literal
        assert_eq!(render_prompt(r#"{"k": {idea}}"#, &b).unwrap(), r#"{"k": X}"#);
    }

    #[test]
    fn templates_expose_expected_placeholders() {
        assert_eq!(PromptTemplate::judge().placeholders(), ["author_cap", "idea", "authors", "venue"]);
        assert_eq!(PromptTemplate::idea().placeholders(), ["manuscript"]);
        assert_eq!(PromptTemplate::capability().placeholders(), ["authors", "manuscript"]);
    }

    #[test]
    fn capability_sentence_parses_and_round_trips() {
        let p = parse_capability(CASE_ONE).unwrap();
        assert_eq!(p.skill_levels[&Skill::DataCollection], Level::VeryHigh);
        assert_eq!(p.skill_levels[&Skill::TheoreticalAnalysis], Level::Medium);
        assert!(p.expertise.contains(&("LLM evaluation".to_string(), Level::High)));
        assert_eq!(p.compute_note, "~20 A100 GPUs for 2 months");
        assert_eq!(p.cost_usd_note, "$50K USD");
        assert_eq!(p.time_note, "~12 PhD-equivalent months");
        assert_eq!(p.rendered_text, CASE_ONE);
        let again = parse_capability(&p.rendered_text).unwrap();
        assert_eq!(again.skill_levels, p.skill_levels);
        assert_eq!(p.scores(), [3, 2, 3, 4, 3, 3]);
    }

    #[test]
    fn capability_aliases_and_case_variants() {
        let text = "The authors' capability is Very High in mathematical derivation, high in theoretical analysis, very high in model design, medium in data collection, high in experimental design, and high in paper presentation. Core expertise includes a (high), b (low), c (Very High), d (medium), and e (high).";
        let p = parse_capability(text).unwrap();
        assert_eq!(p.skill_levels[&Skill::MathematicalDerivation], Level::VeryHigh);
        assert_eq!(p.skill_levels[&Skill::ModelDesign], Level::VeryHigh);
        assert_eq!(p.expertise[2], ("c".to_string(), Level::VeryHigh));
    }

    #[test]
    fn capability_errors_name_the_problem() {
        let four = CASE_ONE.replace(", and statistical analysis (medium)", "");
        assert_eq!(parse_capability(&four).unwrap_err().to_string(), "parse error: expertise count 4 < 5");
        let missing = CASE_ONE.replace(" very high in data collection,", "");
        assert_eq!(
            parse_capability(&missing).unwrap_err().to_string(),
            "parse error: missing skill: data collection"
        );
    }

    #[test]
    fn capability_json_reply() {
        let reply = r#"Here you go: {"skills": {"mathematical derivation": "low", "theoretical analysis/proving": "medium", "model/architecture design": "high", "data collection": "very_high", "experimental design": "High", "paper presentation": "medium"}, "expertise": [{"name": "graphs", "level": "high"}, "optimization (medium)", {"name": "vision", "level": "low"}, {"name": "nlp", "level": "high"}, {"name": "rl", "level": "very high"}], "compute": "8 A100 for a week", "cost_usd": "$5K", "time": "3 months"}"#;
        let p = parse_capability(reply).unwrap();
        assert_eq!(p.skill_levels[&Skill::DataCollection], Level::VeryHigh);
        assert_eq!(p.expertise.len(), 5);
        assert!(p.rendered_text.contains("Computational work utilized 8 A100 for a week."));
        assert_eq!(parse_capability(&p.rendered_text).unwrap().skill_levels, p.skill_levels);
    }

    #[test]
    fn judge_reply_parsing() {
        let o = parse_judge_reply(r#"{"acc_chance": 0.31, "rating_ave": 5.8}"#).unwrap();
        assert_eq!((o.acc_chance, o.rating_ave), (0.31, 5.8));
        let o = parse_judge_reply("Sure. {'acc_chance': 0.2, 'rating_ave': '6.1'} done").unwrap();
        assert_eq!((o.acc_chance, o.rating_ave), (0.2, 6.1));
        assert!(matches!(
            parse_judge_reply(r#"{"acc_chance": 1.4, "rating_ave": 5}"#),
            Err(JudgeParseError::Invalid(Error::Range(_)))
        ));
        assert!(matches!(parse_judge_reply("no dictionary"), Err(JudgeParseError::Unreadable(_))));
    }

    #[test]
    fn brace_block_respects_strings() {
        assert_eq!(first_brace_block(r#"x {"a": "}{", "b": {"c": 1}} y"#), Some(r#"{"a": "}{", "b": {"c": 1}}"#));
        assert_eq!(first_brace_block("{ unbalanced"), None);
    }

    #[test]
    fn banned_phrase_heuristic() {
        assert!(parse_idea("Our method achieves 95% accuracy.").unwrap().flagged_for_review());
        assert!(parse_idea("It outperforms prior work").unwrap().flagged_for_review());
        assert!(parse_idea("yielding state-of-the-art results").unwrap().flagged_for_review());
        let clean = parse_idea("We combine gating mechanisms\nwith delta rules.").unwrap();
        assert!(!clean.flagged_for_review());
        assert_eq!(clean.text, "We combine gating mechanisms with delta rules.");
    }

    #[test]
    fn env_overrides() {
        let env = BTreeMap::from([
            ("LLM_BASE_URL", "http://x/v1"),
            ("LLM_MODEL", "m"),
            ("LLM_MAX_CONCURRENCY", "7"),
        ]);
        let c = GatewayConfig::default()
            .apply_env(|k| env.get(k).map(|s| s.to_string()))
            .unwrap();
        assert_eq!((c.base_url.as_str(), c.model.as_str(), c.max_concurrency), ("http://x/v1", "m", 7));
        assert!(GatewayConfig::default()
            .apply_env(|k| (k == "LLM_MAX_CONCURRENCY").then(|| "many".to_string()))
            .is_err());
    }

    #[test]
    fn map_concurrent_keeps_order() {
        let items: Vec<usize> = (0..50).collect();
        let out = map_concurrent(&items, 4, |x| x * 2);
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
