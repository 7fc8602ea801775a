//! Synthetic submissions with a planted outcome function, for smoke runs
//! and end-to-end checks without real review data.
//!
//! Skill levels follow from team strength (best author position plus the
//! first author's institution tier) and the idea's topic. The rating is a
//! fixed function of those levels, a novelty word in the idea and three
//! detail words drawn from a 2000-word lexicon with fixed weights. Idea
//! tokens carry most of the variance, so authors alone cannot explain it.
//! Each detail word shows up only a few times in a couple of thousand
//! records, so that part acts like the unexplained variance of real
//! reviews: deterministic, yet out of reach for any model trained here.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_author_key, AuthorRecord, PaperRecord};
use crate::error::{Error, Result};
use crate::llm::{CapabilityProfile, Level, Skill};

pub const POSITIONS: [&str; 4] = ["PhD Student", "Postdoc", "Assistant Professor", "Professor"];
pub const INSTITUTIONS: [(&str, usize); 6] = [
    ("Maple College", 0),
    ("Birch College", 0),
    ("Cedar University", 1),
    ("Aspen University", 1),
    ("Summit Institute", 2),
    ("Harbor Institute", 2),
];
pub const NOVELTY: [&str; 5] = ["incremental", "modest", "solid", "novel", "groundbreaking"];
const COUNTRIES: [&str; 4] = ["us", "cn", "de", "ca"];
const FIRST: [&str; 12] = [
    "Ada", "Ben", "Chen", "Dana", "Eli", "Fang", "Gus", "Hana", "Ivo", "Jun", "Kira", "Lior",
];
const LAST: [&str; 12] = [
    "Abel", "Baker", "Cruz", "Diaz", "Evans", "Fujita", "Gupta", "Holm", "Ito", "Jones", "Kim", "Lund",
];
const FILLER: [&str; 8] = [
    "with sparse updates",
    "under limited supervision",
    "via contrastive signals",
    "through modular components",
    "using curriculum schedules",
    "with light annotation",
    "across several domains",
    "for streaming inputs",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Topic {
    Theory,
    Vision,
    Data,
    Language,
}

impl Topic {
    pub const ALL: [Topic; 4] = [Topic::Theory, Topic::Vision, Topic::Data, Topic::Language];

    pub fn phrase(self) -> &'static str {
        match self {
            Topic::Theory => "convergence theory",
            Topic::Vision => "image recognition",
            Topic::Data => "dataset curation",
            Topic::Language => "language modeling",
        }
    }

    /// Skills that get a one-level bonus for this topic.
    pub fn boosted(self) -> [Skill; 2] {
        match self {
            Topic::Theory => [Skill::MathematicalDerivation, Skill::TheoreticalAnalysis],
            Topic::Vision => [Skill::ModelDesign, Skill::ExperimentalDesign],
            Topic::Data => [Skill::DataCollection, Skill::ExperimentalDesign],
            Topic::Language => [Skill::ModelDesign, Skill::PaperPresentation],
        }
    }

    fn expertise(self) -> [&'static str; 5] {
        match self {
            Topic::Theory => ["optimization", "learning theory", "probability", "convex analysis", "statistics"],
            Topic::Vision => ["computer vision", "detection", "segmentation", "representation learning", "benchmarks"],
            Topic::Data => ["data mining", "annotation", "crowdsourcing", "data quality", "benchmarks"],
            Topic::Language => ["language models", "tokenization", "pretraining", "evaluation", "dialogue"],
        }
    }
}

pub const DETAIL_WORDS: usize = 2000;
pub const DETAIL_PER_IDEA: usize = 3;
const DETAIL_WEIGHT: f64 = 0.4;
const ONSETS: [&str; 10] = ["b", "d", "f", "k", "l", "m", "n", "r", "s", "v"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Pseudo-word for detail index `i`: three onset-vowel syllables read as
/// base-50 digits, so every `i < 125000` maps to a distinct word.
pub fn detail_word(i: usize) -> String {
    let syllable = |d: usize| format!("{}{}", ONSETS[d % 10], VOWELS[d / 10]);
    format!("{}{}{}", syllable(i % 50), syllable(i / 50 % 50), syllable(i / 2500 % 50))
}

/// Fixed weight in `[-0.4, 0.4]` for detail index `i`, independent of the
/// generation seed.
pub fn detail_weight(i: usize) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(0xd37a_11 + i as u64);
    rng.random_range(-DETAIL_WEIGHT..=DETAIL_WEIGHT)
}

/// Latent factors behind one synthetic record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Planted {
    pub team_strength: usize,
    pub topic: Topic,
    pub novelty: usize,
    pub details: Vec<usize>,
    pub levels: [u8; 6],
}

/// Team strength in `0..=5`: highest position rank plus first-author tier.
pub fn team_strength(authors: &[AuthorRecord]) -> usize {
    let best = authors
        .iter()
        .filter_map(|a| POSITIONS.iter().position(|p| *p == a.position))
        .max()
        .unwrap_or(0);
    let tier = authors
        .first()
        .and_then(|a| INSTITUTIONS.iter().find(|(n, _)| *n == a.affiliation))
        .map(|(_, t)| *t)
        .unwrap_or(0);
    best + tier
}

/// Skill levels (1..=4) in canonical skill order.
pub fn skill_levels(strength: usize, topic: Topic) -> [u8; 6] {
    let base = 1 + strength / 2;
    let boosted = topic.boosted();
    let mut out = [0u8; 6];
    for (i, s) in Skill::ALL.iter().enumerate() {
        let bonus = usize::from(boosted.contains(s));
        out[i] = (base + bonus).min(4) as u8;
    }
    out
}

/// The planted outcome: `2.2 + 0.2·Σ(level−1) + 0.75·novelty + Σ detail
/// weights`, which already lies in `[1, 10]`; the clip only guards rounding.
pub fn planted_rating(levels: &[u8; 6], novelty: usize, details: &[usize]) -> f64 {
    let skill: f64 = levels.iter().map(|&l| f64::from(l) - 1.0).sum();
    let detail: f64 = details.iter().map(|&d| detail_weight(d)).sum();
    (2.2 + 0.2 * skill + 0.75 * novelty as f64 + detail).clamp(1.0, 10.0)
}

pub const ACCEPT_THRESHOLD: f64 = 5.5;

fn level_of(score: u8) -> Level {
    Level::ALL[usize::from(score.clamp(1, 4)) - 1]
}

/// Capability sentence for the given levels and topic.
pub fn capability_text(levels: &[u8; 6], topic: Topic) -> Result<String> {
    let skills: BTreeMap<Skill, Level> = Skill::ALL.iter().zip(levels).map(|(s, &l)| (*s, level_of(l))).collect();
    let mean = levels.iter().map(|&l| u32::from(l)).sum::<u32>() as f64 / 6.0;
    let exp_level = level_of(mean.round() as u8);
    let expertise = topic.expertise().iter().map(|e| (e.to_string(), exp_level)).collect();
    Ok(CapabilityProfile::new(skills, expertise, String::new(), String::new(), String::new())?.rendered_text)
}

/// Generates `n` labelled records from `seed`. Identical inputs give
/// identical output.
pub fn generate(n: usize, seed: u64, venue: &str) -> Result<Vec<(PaperRecord, Planted)>> {
    if n == 0 {
        return Err(Error::Precondition("record count must be positive".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let k = rng.random_range(1..=4usize);
        let authors: Vec<AuthorRecord> = (0..k)
            .map(|j| {
                let name = format!(
                    "{} {}",
                    FIRST.choose(&mut rng).expect("non-empty"),
                    LAST.choose(&mut rng).expect("non-empty")
                );
                let (inst, _) = INSTITUTIONS.choose(&mut rng).expect("non-empty");
                AuthorRecord {
                    display_name: name,
                    position: POSITIONS.choose(&mut rng).expect("non-empty").to_string(),
                    affiliation: inst.to_string(),
                    country: COUNTRIES.choose(&mut rng).expect("non-empty").to_string(),
                    order_index: j,
                }
            })
            .collect();
        let topic = *Topic::ALL.choose(&mut rng).expect("non-empty");
        let novelty = rng.random_range(0..NOVELTY.len());
        let strength = team_strength(&authors);
        let levels = skill_levels(strength, topic);
        let details: Vec<usize> = rand::seq::index::sample(&mut rng, DETAIL_WORDS, DETAIL_PER_IDEA).into_vec();
        let rating = planted_rating(&levels, novelty, &details);
        let words: Vec<String> = details.iter().map(|&d| detail_word(d)).collect();
        let idea = format!(
            "We propose a {} approach to {} {}, built on {}.",
            NOVELTY[novelty],
            topic.phrase(),
            FILLER.choose(&mut rng).expect("non-empty"),
            words.join(" ")
        );
        let first_author_key = normalize_author_key(&authors[0].display_name);
        let record = PaperRecord {
            record_id: format!("syn-{seed}-{i:05}"),
            title: format!("Study {i} on {}", topic.phrase()),
            r#abstract: idea.clone(),
            authors,
            venue: venue.to_string(),
            idea_text: Some(idea),
            capability_text: Some(capability_text(&levels, topic)?),
            avg_rating: Some(rating),
            accepted: Some(rating >= ACCEPT_THRESHOLD),
            first_author_key,
        };
        out.push((
            record,
            Planted {
                team_strength: strength,
                topic,
                novelty,
                details,
                levels,
            },
        ));
    }
    Ok(out)
}
